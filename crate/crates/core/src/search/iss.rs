use crate::error::Result;
use crate::harness::train::{RunState, SnapshotAt};
use crate::masking::{sample_bernoulli_mask, GateMode, Mask};
use crate::model::Model;

use super::{
    new_state, push_ticket, require_maskable, rewind, take_snapshot, train_round, Algorithm, RoundConfig, RunEnv,
    TicketResult,
};

/// Draws `m ~ Bernoulli(σ(s))` with permanently pruned components forced to 0.
pub(crate) fn sample_mask(state: &mut RunState) -> Mask {
    let mut mask = state.model.current_mask();
    for (gi, gm) in mask.groups.iter_mut().enumerate() {
        let g = &state.model.groups[gi];
        let s = state.model.scores(gi).expect("stochastic gates").data();
        gm.bits = sample_bernoulli_mask(s, &g.alive, &mut state.gate_rng);
    }
    mask
}

/// Iterative Stochastic Sparsification.
///
/// Trains weights and Bernoulli logits with straight-through gradients. After
/// each round every component whose logit fell below its initial value is
/// permanently pruned and the weights go back to `w^(k)`. Each round's ticket
/// is a fresh Bernoulli sample.
pub fn run_iss(mut model: Model, env: &RunEnv, cfg: &RoundConfig) -> Result<TicketResult> {
    cfg.validate(false)?;
    require_maskable(&model)?;
    model.configure_masks(GateMode::StochasticBernoulli, cfg.s_init);
    model.set_straight_through(cfg.straight_through);
    let mut state = new_state(model, env, cfg)?;
    let meta = env.meta(Algorithm::Iss, cfg.lambda, cfg.s_init);
    let mut snapshot = SnapshotAt::new(cfg.rewind_iter, None);
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    for round in 1..=cfg.rounds {
        train_round(&mut state, env, cfg, round, &mut snapshot, &meta, &mut records, None)?;
        let mask = sample_mask(&mut state);
        push_ticket(&state, env, &meta, mask, round, &mut tickets, &mut records)?;
        if round < cfg.rounds {
            for gi in 0..state.model.groups.len() {
                let s = state.model.scores(gi).expect("stochastic gates").data().to_vec();
                let g = &mut state.model.groups[gi];
                let s_init = g.s_init;
                for (a, v) in g.alive.iter_mut().zip(s) {
                    if v < s_init {
                        *a = false;
                    }
                }
            }
            let store = snapshot.store.as_ref().expect("captured in round 1");
            rewind(&mut state, store)?;
        }
    }
    Ok(TicketResult {
        algorithm: Algorithm::Iss,
        tickets,
        rewind: take_snapshot(snapshot)?,
        records,
        iterations: state.iter,
        halted: None,
        state,
    })
}
