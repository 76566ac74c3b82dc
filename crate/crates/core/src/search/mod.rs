//! Round-structured ticket search controllers.

mod cs;
mod imp;
mod iss;
mod supermask;

pub use cs::{freeze_mask_and_finetune, run_cs, run_cs_prune, run_sequential_cs};
pub use imp::{prune_lowest, run_imp, run_imp_observed, PruneScope};
pub use iss::run_iss;
pub use supermask::{run_supermask, run_supermask_observed, SupermaskVariant};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::train::{evaluate_masked, train, AnnealBeta, Callback, LrMilestones, Recorder, RunState, SnapshotAt};
use crate::masking::{GatePenalty, Mask, StraightThrough, TemperatureSchedule};
use crate::model::Model;
use crate::optim::{GroupConfig, OptimConfig};
use crate::param::Role;
use crate::persist::records::{RecordMeta, RunRecord};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dense,
    Cs,
    Imp,
    ImpC,
    Iss,
    Seqcs,
    SupermaskCs,
    SupermaskSs,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Dense => "dense",
            Algorithm::Cs => "cs",
            Algorithm::Imp => "imp",
            Algorithm::ImpC => "imp-c",
            Algorithm::Iss => "iss",
            Algorithm::Seqcs => "seqcs",
            Algorithm::SupermaskCs => "supermask-cs",
            Algorithm::SupermaskSs => "supermask-ss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dense" => Algorithm::Dense,
            "cs" => Algorithm::Cs,
            "imp" => Algorithm::Imp,
            "imp-c" => Algorithm::ImpC,
            "iss" => Algorithm::Iss,
            "seqcs" => Algorithm::Seqcs,
            "supermask-cs" => Algorithm::SupermaskCs,
            "supermask-ss" => Algorithm::SupermaskSs,
            other => return Err(Error::Config(format!("unknown algorithm {other:?}"))),
        })
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Round structure and hyperparameters shared by every controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub rounds: usize,
    pub iters_per_round: u64,
    /// Rewind iterate `k`, in optimizer iterations of round 1.
    pub rewind_iter: u64,
    /// Pruning rate for IMP and Sequential CS.
    pub prune_rate: Option<f64>,
    pub rewind_between_rounds: bool,
    pub optim: OptimConfig,
    pub lambda: f64,
    pub beta_final: f64,
    pub s_init: f64,
    pub straight_through: StraightThrough,
    /// Round-relative iterations at which learning rates are multiplied by `lr_gamma`.
    pub lr_milestones: Vec<u64>,
    pub lr_gamma: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 1,
            iters_per_round: 1000,
            rewind_iter: 0,
            prune_rate: None,
            rewind_between_rounds: false,
            optim: OptimConfig {
                weights: GroupConfig::adam(1e-2),
                scores: GroupConfig::adam(1e-2),
            },
            lambda: 1e-8,
            beta_final: 200.0,
            s_init: 0.0,
            straight_through: StraightThrough::Identity,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, needs_rate: bool) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Contract("at least one round is required".into()));
        }
        if self.iters_per_round == 0 {
            return Err(Error::Contract("at least one iteration per round is required".into()));
        }
        if self.rewind_iter >= self.iters_per_round {
            return Err(Error::Contract(format!(
                "rewind iterate {} must precede the round length {}",
                self.rewind_iter, self.iters_per_round
            )));
        }
        if needs_rate {
            match self.prune_rate {
                Some(t) if t > 0.0 && t < 1.0 => {}
                Some(t) => return Err(Error::Contract(format!("pruning rate {t} outside (0, 1)"))),
                None => return Err(Error::Contract("pruning rate required".into())),
            }
        }
        GatePenalty::new(self.lambda)?;
        TemperatureSchedule::new(self.beta_final, self.iters_per_round)?;
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.rounds as u64 * self.iters_per_round
    }
}

/// Per-run context: data, precision, batching and identity.
#[derive(Debug, Clone)]
pub struct RunEnv<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub precision: Precision,
    pub batch_size: usize,
    pub seed: u64,
    pub run_id: String,
    /// Emit a `train` record every this many iterations (epoch ends always log). 0 logs epoch ends only.
    pub record_every: u64,
}

impl RunEnv<'_> {
    pub fn meta(&self, algorithm: Algorithm, lambda: f64, s_init: f64) -> RecordMeta {
        RecordMeta {
            run_id: self.run_id.clone(),
            algorithm: algorithm.as_str().to_string(),
            seed: self.seed,
            lambda,
            s0: s_init,
        }
    }

    pub fn iters_per_epoch(&self) -> u64 {
        (self.train.len() / self.batch_size.max(1)).max(1) as u64
    }
}

/// Weights and biases captured at iterate `k` of round 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RewindStore {
    pub k: u64,
    /// `(parameter index, value)` for every weight and bias.
    pub tensors: Vec<(usize, Tensor)>,
}

impl RewindStore {
    pub fn capture(model: &Model, k: u64) -> Self {
        let tensors = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.role != Role::Score)
            .map(|(i, p)| (i, p.value.clone()))
            .collect();
        RewindStore { k, tensors }
    }

    pub fn restore(&self, model: &mut Model) -> Result<()> {
        for (i, t) in &self.tensors {
            let p = model
                .params
                .get_mut(*i)
                .ok_or_else(|| Error::Contract(format!("rewind store refers to missing parameter {i}")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "rewind tensor {:?} does not fit parameter {} of shape {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub round: usize,
    pub mask: Mask,
    pub remaining: f64,
    /// Global iteration count when the ticket was produced.
    pub iter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    /// `floor(τ · remaining)` reached zero before the final round.
    PruneExhausted { round: usize },
}

#[derive(Debug, Clone)]
pub struct TicketResult {
    pub algorithm: Algorithm,
    pub tickets: Vec<Ticket>,
    pub rewind: RewindStore,
    pub records: Vec<RunRecord>,
    /// Optimizer iterations performed by the search.
    pub iterations: u64,
    pub halted: Option<Halt>,
    /// State at the end of the search (weights `w^(T)`, optimizer, counters).
    pub state: RunState,
}

impl TicketResult {
    pub fn final_ticket(&self) -> Option<&Ticket> {
        self.tickets.last()
    }
}

pub(crate) fn require_maskable(model: &Model) -> Result<()> {
    if model.groups.is_empty() {
        return Err(Error::Contract("model has no maskable layers".into()));
    }
    Ok(())
}

pub(crate) fn new_state(model: Model, env: &RunEnv, cfg: &RoundConfig) -> Result<RunState> {
    let mut state = RunState::new(model, cfg.optim, env.precision, env.batch_size, env.seed, &env.run_id);
    state.penalty = GatePenalty::new(cfg.lambda)?;
    Ok(state)
}

/// Trains one round of `T` iterations with the standard callbacks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_round(
    state: &mut RunState,
    env: &RunEnv,
    cfg: &RoundConfig,
    round: usize,
    snapshot: &mut SnapshotAt,
    meta: &RecordMeta,
    records: &mut Vec<RunRecord>,
    observer: Option<&mut (dyn Callback + '_)>,
) -> Result<()> {
    state.round = round;
    state.round_iter = 0;
    if let Some(s) = state.schedule.as_mut() {
        s.reset();
    }
    let mut recorder = Recorder {
        meta,
        every: env.record_every,
        records,
    };
    let mut lr = LrMilestones {
        milestones: cfg.lr_milestones.clone(),
        gamma: cfg.lr_gamma,
    };
    let mut anneal = AnnealBeta;
    match observer {
        Some(obs) => train(state, env.train, cfg.iters_per_round, &mut [&mut recorder, snapshot, &mut lr, &mut anneal, obs]),
        None => train(state, env.train, cfg.iters_per_round, &mut [&mut recorder, snapshot, &mut lr, &mut anneal]),
    }
}

/// Evaluates the ticket on the test split and appends a `round` record.
pub(crate) fn push_ticket(
    state: &RunState,
    env: &RunEnv,
    meta: &RecordMeta,
    mask: Mask,
    round: usize,
    tickets: &mut Vec<Ticket>,
    records: &mut Vec<RunRecord>,
) -> Result<()> {
    let remaining = mask.remaining_fraction()?;
    let (loss, acc) = evaluate_masked(&state.model, &mask, env.test, env.precision)?;
    let ipe = env.iters_per_epoch();
    records.push(meta.record(
        round,
        state.iter / ipe,
        state.iter,
        "round",
        loss,
        acc,
        remaining,
        state.current_beta(),
    ));
    tickets.push(Ticket {
        round,
        mask,
        remaining,
        iter: state.iter,
    });
    Ok(())
}

pub(crate) fn take_snapshot(snapshot: SnapshotAt) -> Result<RewindStore> {
    snapshot
        .store
        .ok_or_else(|| Error::Invariant(format!("rewind iterate {} was never reached", snapshot.at)))
}

pub(crate) fn rewind(state: &mut RunState, store: &RewindStore) -> Result<()> {
    store.restore(&mut state.model)?;
    state.optimizer.reset_state();
    Ok(())
}
