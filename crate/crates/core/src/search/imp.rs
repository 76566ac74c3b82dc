use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::train::{Callback, SnapshotAt};
use crate::masking::GateMode;
use crate::model::Model;

use super::cs::alive_mask;
use super::{
    new_state, push_ticket, require_maskable, rewind, take_snapshot, train_round, Algorithm, Halt, RoundConfig,
    RunEnv, TicketResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One ranking across every maskable layer.
    #[default]
    Global,
    /// Each layer loses `floor(τ · remaining)` of its own weights.
    PerLayer,
}

/// Clears the `count` alive entries with the smallest `values`; ties go to the
/// lowest index first. Returns the new alive flags.
pub fn prune_lowest(values: &[f64], alive: &[bool], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| alive[i]).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut next = alive.to_vec();
    for &i in order.iter().take(count) {
        next[i] = false;
    }
    next
}

fn prune_round(model: &mut Model, rate: f64, scope: PruneScope) -> bool {
    match scope {
        PruneScope::Global => {
            let magnitudes: Vec<f64> = model
                .groups
                .iter()
                .flat_map(|g| model.param(g.weight).value.data().iter().map(|w| w.abs()))
                .collect();
            let alive: Vec<bool> = model.groups.iter().flat_map(|g| g.alive.clone()).collect();
            let remaining = alive.iter().filter(|&&a| a).count();
            let count = (rate * remaining as f64).floor() as usize;
            if count == 0 {
                return false;
            }
            let next = prune_lowest(&magnitudes, &alive, count);
            let mut offset = 0;
            for g in &mut model.groups {
                let n = g.numel();
                g.alive.copy_from_slice(&next[offset..offset + n]);
                offset += n;
            }
            true
        }
        PruneScope::PerLayer => {
            let mut pruned_any = false;
            for gi in 0..model.groups.len() {
                let magnitudes: Vec<f64> = model.param(model.groups[gi].weight).value.data().iter().map(|w| w.abs()).collect();
                let g = &mut model.groups[gi];
                let remaining = g.alive.iter().filter(|&&a| a).count();
                let count = (rate * remaining as f64).floor() as usize;
                if count > 0 {
                    g.alive = prune_lowest(&magnitudes, &g.alive, count);
                    pruned_any = true;
                }
            }
            pruned_any
        }
    }
}

/// Iterative Magnitude Pruning. With `rewind_between_rounds` the surviving
/// weights go back to `w^(k)` after every pruning step; without it (IMP-C)
/// training continues from the current weights.
pub fn run_imp(model: Model, env: &RunEnv, cfg: &RoundConfig, scope: PruneScope) -> Result<TicketResult> {
    run_imp_observed(model, env, cfg, scope, None)
}

/// [`run_imp`] with an extra callback that sees the start and every step of each round.
pub fn run_imp_observed(
    mut model: Model,
    env: &RunEnv,
    cfg: &RoundConfig,
    scope: PruneScope,
    mut observer: Option<&mut (dyn Callback + '_)>,
) -> Result<TicketResult> {
    cfg.validate(true)?;
    require_maskable(&model)?;
    let rate = cfg.prune_rate.expect("validated");
    let algorithm = if cfg.rewind_between_rounds {
        Algorithm::Imp
    } else {
        Algorithm::ImpC
    };
    model.configure_masks(GateMode::Hard, 0.0);
    let no_penalty = RoundConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut state = new_state(model, env, &no_penalty)?;
    let meta = env.meta(algorithm, 0.0, 0.0);
    let mut snapshot = SnapshotAt::new(cfg.rewind_iter, None);
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    let mut halted = None;
    for round in 1..=cfg.rounds {
        train_round(&mut state, env, cfg, round, &mut snapshot, &meta, &mut records, observer.as_deref_mut())?;
        if !prune_round(&mut state.model, rate, scope) {
            halted = Some(Halt::PruneExhausted { round });
            break;
        }
        let mask = alive_mask(&state.model);
        push_ticket(&state, env, &meta, mask, round, &mut tickets, &mut records)?;
        if round < cfg.rounds && cfg.rewind_between_rounds {
            let store = snapshot.store.as_ref().expect("captured in round 1");
            rewind(&mut state, store)?;
        }
    }
    Ok(TicketResult {
        algorithm,
        tickets,
        rewind: take_snapshot(snapshot)?,
        records,
        iterations: state.iter,
        halted,
        state,
    })
}
