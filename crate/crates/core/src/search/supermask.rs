use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::{Callback, SnapshotAt};
use crate::masking::{GateMode, TemperatureSchedule};
use crate::model::Model;
use crate::param::Role;

use super::iss::sample_mask;
use super::{new_state, push_ticket, require_maskable, take_snapshot, train_round, Algorithm, RoundConfig, RunEnv, TicketResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupermaskVariant {
    /// Deterministic soft gates; outputs `H(s)`.
    #[default]
    Cs,
    /// Bernoulli gates with straight-through gradients; outputs a sample.
    Ss,
}

/// Learns a mask over frozen randomly initialized weights in a single round.
pub fn run_supermask(model: Model, env: &RunEnv, cfg: &RoundConfig, variant: SupermaskVariant) -> Result<TicketResult> {
    run_supermask_observed(model, env, cfg, variant, None)
}

/// [`run_supermask`] with an extra callback that runs after the standard ones on every step.
pub fn run_supermask_observed(
    mut model: Model,
    env: &RunEnv,
    cfg: &RoundConfig,
    variant: SupermaskVariant,
    observer: Option<&mut (dyn Callback + '_)>,
) -> Result<TicketResult> {
    let single = RoundConfig {
        rounds: 1,
        ..cfg.clone()
    };
    single.validate(false)?;
    require_maskable(&model)?;
    let (mode, algorithm) = match variant {
        SupermaskVariant::Cs => (GateMode::SoftDeterministic, Algorithm::SupermaskCs),
        SupermaskVariant::Ss => (GateMode::StochasticBernoulli, Algorithm::SupermaskSs),
    };
    model.configure_masks(mode, cfg.s_init);
    model.set_straight_through(cfg.straight_through);
    model.set_weights_trainable(false);
    let frozen: Vec<Vec<f64>> = model
        .params
        .iter()
        .filter(|p| p.role != Role::Score)
        .map(|p| p.value.data().to_vec())
        .collect();

    let mut state = new_state(model, env, &single)?;
    if variant == SupermaskVariant::Cs {
        state.schedule = Some(TemperatureSchedule::new(cfg.beta_final, cfg.iters_per_round)?);
    }
    let meta = env.meta(algorithm, cfg.lambda, cfg.s_init);
    let mut snapshot = SnapshotAt::new(cfg.rewind_iter, None);
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    train_round(&mut state, env, &single, 1, &mut snapshot, &meta, &mut records, observer)?;

    let after = state.model.params.iter().filter(|p| p.role != Role::Score);
    for (before, p) in frozen.iter().zip(after) {
        let same = before.len() == p.value.numel()
            && before.iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Invariant(format!("frozen parameter {} changed during supermask search", p.name)));
        }
    }

    let mask = match variant {
        SupermaskVariant::Cs => state.model.current_mask(),
        SupermaskVariant::Ss => sample_mask(&mut state),
    };
    push_ticket(&state, env, &meta, mask, 1, &mut tickets, &mut records)?;
    Ok(TicketResult {
        algorithm,
        tickets,
        rewind: take_snapshot(snapshot)?,
        records,
        iterations: state.iter,
        halted: None,
        state,
    })
}
