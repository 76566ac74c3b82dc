use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::train::{train, Callback, Recorder, RunState, SnapshotAt};
use crate::masking::{reset_scores, GateMode, Mask, TemperatureSchedule};
use crate::model::Model;

use super::{
    new_state, prune_lowest, push_ticket, require_maskable, rewind, take_snapshot, train_round, Algorithm, Halt,
    RoundConfig, RunEnv, TicketResult,
};

fn soft_state(mut model: Model, env: &RunEnv, cfg: &RoundConfig) -> Result<RunState> {
    require_maskable(&model)?;
    model.configure_masks(GateMode::SoftDeterministic, cfg.s_init);
    let mut state = new_state(model, env, cfg)?;
    state.schedule = Some(TemperatureSchedule::new(cfg.beta_final, cfg.iters_per_round)?);
    Ok(state)
}

/// Applies `s ← min(β_T s_T, s0)` to every group.
fn reset_all_scores(state: &mut RunState, cfg: &RoundConfig) {
    let beta_final = state.schedule.map_or(cfg.beta_final, |s| s.beta_final);
    for gi in 0..state.model.groups.len() {
        let g = &state.model.groups[gi];
        let (Some(id), s_init) = (g.scores, g.s_init) else {
            continue;
        };
        let p = state.model.param_mut(id);
        let fresh = reset_scores(p.value.data(), beta_final, s_init);
        p.value.data_mut().copy_from_slice(&fresh);
    }
}

/// Continuous Sparsification.
///
/// Each round anneals `β` from 1 to `β_T` over `T` iterations while training
/// weights and mask parameters jointly. Between rounds the mask parameters are
/// reset and `β` returns to 1; weights carry over unless
/// `rewind_between_rounds` is set. Every round emits `H(s)` as a ticket.
pub fn run_cs(model: Model, env: &RunEnv, cfg: &RoundConfig) -> Result<TicketResult> {
    cfg.validate(false)?;
    let mut state = soft_state(model, env, cfg)?;
    let meta = env.meta(Algorithm::Cs, cfg.lambda, cfg.s_init);
    let mut snapshot = SnapshotAt::new(cfg.rewind_iter, None);
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    for round in 1..=cfg.rounds {
        train_round(&mut state, env, cfg, round, &mut snapshot, &meta, &mut records, None)?;
        let mask = state.model.current_mask();
        push_ticket(&state, env, &meta, mask, round, &mut tickets, &mut records)?;
        if round < cfg.rounds {
            reset_all_scores(&mut state, cfg);
            if cfg.rewind_between_rounds {
                let store = snapshot.store.as_ref().expect("captured in round 1");
                rewind(&mut state, store)?;
            }
        }
    }
    Ok(TicketResult {
        algorithm: Algorithm::Cs,
        tickets,
        rewind: take_snapshot(snapshot)?,
        records,
        iterations: state.iter,
        halted: None,
        state,
    })
}

/// Sequential CS: trains like CS, then permanently removes the `τ` fraction of
/// surviving weights with the lowest mask parameters (one global ranking).
pub fn run_sequential_cs(model: Model, env: &RunEnv, cfg: &RoundConfig) -> Result<TicketResult> {
    cfg.validate(true)?;
    let rate = cfg.prune_rate.expect("validated");
    let mut state = soft_state(model, env, cfg)?;
    let meta = env.meta(Algorithm::Seqcs, cfg.lambda, cfg.s_init);
    let mut snapshot = SnapshotAt::new(cfg.rewind_iter, None);
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    let mut halted = None;
    for round in 1..=cfg.rounds {
        train_round(&mut state, env, cfg, round, &mut snapshot, &meta, &mut records, None)?;
        let scores: Vec<f64> = (0..state.model.groups.len())
            .flat_map(|gi| state.model.scores(gi).expect("soft gates").data().to_vec())
            .collect();
        let alive: Vec<bool> = state.model.groups.iter().flat_map(|g| g.alive.clone()).collect();
        let remaining = alive.iter().filter(|&&a| a).count();
        let count = (rate * remaining as f64).floor() as usize;
        if count == 0 {
            halted = Some(Halt::PruneExhausted { round });
            break;
        }
        let next = prune_lowest(&scores, &alive, count);
        let mut offset = 0;
        for g in &mut state.model.groups {
            let n = g.numel();
            g.alive.copy_from_slice(&next[offset..offset + n]);
            offset += n;
        }
        let mask = alive_mask(&state.model);
        push_ticket(&state, env, &meta, mask, round, &mut tickets, &mut records)?;
        if round < cfg.rounds {
            reset_all_scores(&mut state, cfg);
            if cfg.rewind_between_rounds {
                let store = snapshot.store.as_ref().expect("captured in round 1");
                rewind(&mut state, store)?;
            }
        }
    }
    Ok(TicketResult {
        algorithm: Algorithm::Seqcs,
        tickets,
        rewind: take_snapshot(snapshot)?,
        records,
        iterations: state.iter,
        halted,
        state,
    })
}

pub(crate) fn alive_mask(model: &Model) -> Mask {
    let mut mask = model.current_mask();
    for (gm, g) in mask.groups.iter_mut().zip(&model.groups) {
        gm.bits = g.alive.clone();
    }
    mask
}

/// Fixes `m = H(s) ∧ alive`, stops training the mask parameters and trains
/// the surviving weights for `finetune_iters` more iterations at `lr`.
pub fn freeze_mask_and_finetune(
    state: &mut RunState,
    data: &Dataset,
    finetune_iters: u64,
    lr: f64,
    callbacks: &mut [&mut dyn Callback],
) -> Result<Mask> {
    if state.model.groups.iter().any(|g| g.frozen_mask.is_some()) {
        return Err(Error::Contract("mask is already frozen".into()));
    }
    let mask = state.model.current_mask();
    for (g, gm) in state.model.groups.iter_mut().zip(&mask.groups) {
        g.frozen_mask = Some(gm.bits.clone());
    }
    let score_ids: Vec<_> = state.model.groups.iter().filter_map(|g| g.scores).collect();
    for id in score_ids {
        let p = state.model.param_mut(id);
        p.trainable = false;
        p.grad = None;
    }
    state.optimizer.config.weights.lr = lr;
    state.optimizer.lr_factor = 1.0;
    train(state, data, finetune_iters, callbacks)?;
    Ok(mask)
}

/// Pruning mode: one CS round of `cfg.iters_per_round` iterations, then the
/// mask is frozen and the surviving weights are fine-tuned.
pub fn run_cs_prune(
    model: Model,
    env: &RunEnv,
    cfg: &RoundConfig,
    finetune_iters: u64,
    finetune_lr: f64,
) -> Result<TicketResult> {
    let single = RoundConfig {
        rounds: 1,
        ..cfg.clone()
    };
    let mut result = run_cs(model, env, &single)?;
    let meta = env.meta(Algorithm::Cs, cfg.lambda, cfg.s_init);
    let mut recorder = Recorder {
        meta: &meta,
        every: env.record_every,
        records: &mut result.records,
    };
    let mask = freeze_mask_and_finetune(
        &mut result.state,
        env.train,
        finetune_iters,
        finetune_lr,
        &mut [&mut recorder],
    )?;
    result.tickets.clear();
    push_ticket(&result.state, env, &meta, mask, 1, &mut result.tickets, &mut result.records)?;
    result.iterations = result.state.iter;
    Ok(result)
}
