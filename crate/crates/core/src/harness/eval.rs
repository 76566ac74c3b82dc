//! Ticket evaluation, subnetwork selection, sparsity and cost reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::{evaluate, train, LrMilestones, RunState};
use crate::masking::Mask;
use crate::model::{Model, ModelSpec};
use crate::optim::OptimConfig;
use crate::persist::records::{RecordMeta, RunRecord};
use crate::search::{Algorithm, RewindStore, RunEnv};

use super::plan::DenseConfig;

#[derive(Debug, Clone)]
pub struct DenseResult {
    pub model: Model,
    pub records: Vec<RunRecord>,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub iterations: u64,
}

/// Trains the unmasked network for the dense budget.
pub fn run_dense(spec: &ModelSpec, env: &RunEnv, dense: &DenseConfig) -> Result<DenseResult> {
    let model = Model::build(spec.clone(), env.seed)?;
    let mut state = RunState::new(model, dense.optim(), env.precision, env.batch_size, env.seed, &env.run_id);
    let meta = env.meta(Algorithm::Dense, 0.0, 0.0);
    let mut records = Vec::new();
    let mut recorder = super::train::Recorder {
        meta: &meta,
        every: env.record_every,
        records: &mut records,
    };
    let mut lr = LrMilestones {
        milestones: dense.lr_milestones.clone(),
        gamma: dense.lr_gamma,
    };
    train(&mut state, env.train, dense.iters, &mut [&mut recorder, &mut lr])?;
    let (test_loss, test_accuracy) = evaluate(&state.model, env.test, 1.0, env.precision)?;
    records.push(meta.record(
        1,
        state.iter / env.iters_per_epoch(),
        state.iter,
        "dense",
        test_loss,
        test_accuracy,
        1.0,
        1.0,
    ));
    Ok(DenseResult {
        model: state.model,
        records,
        test_loss,
        test_accuracy,
        iterations: state.iter,
    })
}

#[derive(Debug, Clone)]
pub struct Retrained {
    pub model: Model,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Trains `mask ⊙ w` from the rewind snapshot with a fresh optimizer, the
/// dense budget and the dense shuffle order.
pub fn retrain_ticket(
    spec: &ModelSpec,
    mask: &Mask,
    rewind: &RewindStore,
    env: &RunEnv,
    dense: &DenseConfig,
) -> Result<Retrained> {
    let mut model = Model::build(spec.clone(), env.seed)?;
    model.check_mask(mask)?;
    rewind.restore(&mut model)?;
    model.apply_hard_mask(mask)?;
    train_masked(model, env, dense.optim(), dense.iters, &dense.lr_milestones, dense.lr_gamma)
}

/// Trains `mask ⊙ w^(T)` for `iters` more iterations at `lr`.
pub fn finetune_ticket(searched: &Model, mask: &Mask, env: &RunEnv, dense: &DenseConfig, iters: u64, lr: f64) -> Result<Retrained> {
    let mut model = searched.clone();
    model.check_mask(mask)?;
    model.apply_hard_mask(mask)?;
    let mut optim = dense.optim();
    optim.weights.lr = lr;
    train_masked(model, env, optim, iters, &[], 1.0)
}

fn train_masked(model: Model, env: &RunEnv, optim: OptimConfig, iters: u64, milestones: &[u64], gamma: f64) -> Result<Retrained> {
    let mut state = RunState::new(model, optim, env.precision, env.batch_size, env.seed, &env.run_id);
    let mut lr = LrMilestones {
        milestones: milestones.to_vec(),
        gamma,
    };
    train(&mut state, env.train, iters, &mut [&mut lr])?;
    let (test_loss, test_accuracy) = evaluate(&state.model, env.test, 1.0, env.precision)?;
    Ok(Retrained {
        model: state.model,
        test_loss,
        test_accuracy,
    })
}

/// One evaluated ticket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketRow {
    pub run_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub round: usize,
    pub remaining: f64,
    pub accuracy: f64,
}

impl TicketRow {
    pub fn from_record(r: &RunRecord) -> Self {
        TicketRow {
            run_id: r.run_id.clone(),
            algorithm: r.algorithm.clone(),
            seed: r.seed,
            round: r.round,
            remaining: r.remaining_frac,
            accuracy: r.accuracy,
        }
    }

    fn identity(&self) -> (&str, u64, usize) {
        (&self.run_id, self.seed, self.round)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Selection {
    Found { ticket: TicketRow },
    NoneFound,
}

/// The sparsest ticket whose accuracy is at least `dense_acc`; ties go to the
/// higher accuracy. Row order does not affect the result.
pub fn select_sparsest_matching(rows: &[TicketRow], dense_acc: f64) -> Result<Selection> {
    if rows.is_empty() {
        return Err(Error::Contract("no ticket rows to select from".into()));
    }
    let best = rows.iter().filter(|r| r.accuracy >= dense_acc).min_by(|a, b| {
        a.remaining
            .total_cmp(&b.remaining)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.identity().cmp(&b.identity()))
    });
    Ok(match best {
        Some(t) => Selection::Found { ticket: t.clone() },
        None => Selection::NoneFound,
    })
}

/// The most accurate ticket; ties go to the lower remaining fraction.
pub fn select_best_performing(rows: &[TicketRow]) -> Result<TicketRow> {
    rows.iter()
        .min_by(|a, b| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.remaining.total_cmp(&b.remaining))
                .then(a.identity().cmp(&b.identity()))
        })
        .cloned()
        .ok_or_else(|| Error::Contract("no ticket rows to select from".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub kept: usize,
    pub total: usize,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    /// One entry per configured block of layer indices (into `layers`).
    pub blocks: Vec<LayerSparsity>,
    pub global: f64,
}

/// Remaining fraction per maskable layer and per block of layers.
pub fn per_layer_sparsity(mask: &Mask, blocks: &[Vec<usize>]) -> Result<SparsityReport> {
    let layers: Vec<LayerSparsity> = mask
        .groups
        .iter()
        .map(|g| {
            let kept = g.bits.iter().filter(|&&b| b).count();
            LayerSparsity {
                name: g.name.clone(),
                kept,
                total: g.bits.len(),
                remaining: if g.bits.is_empty() { 0.0 } else { kept as f64 / g.bits.len() as f64 },
            }
        })
        .collect();
    let mut block_rows = Vec::new();
    for block in blocks {
        let mut kept = 0;
        let mut total = 0;
        let mut names = Vec::new();
        for &i in block {
            let l = layers
                .get(i)
                .ok_or_else(|| Error::Contract(format!("block refers to layer {i} of {}", layers.len())))?;
            kept += l.kept;
            total += l.total;
            names.push(l.name.as_str());
        }
        block_rows.push(LayerSparsity {
            name: names.join("+"),
            kept,
            total,
            remaining: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
        });
    }
    Ok(SparsityReport {
        layers,
        blocks: block_rows,
        global: mask.remaining_fraction()?,
    })
}

/// Search cost of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub algorithm: String,
    pub run_id: String,
    pub iterations: u64,
    pub iters_per_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub runs: usize,
    pub parallel_iters: u64,
    pub sequential_iters: u64,
    pub parallel_epochs: f64,
    pub sequential_epochs: f64,
}

/// Parallel cost is the longest run, sequential cost the sum over runs.
pub fn cost_accounting(rows: &[CostRow]) -> BTreeMap<String, CostTotals> {
    let mut out: BTreeMap<String, CostTotals> = BTreeMap::new();
    for r in rows {
        let epochs = r.iterations as f64 / r.iters_per_epoch.max(1) as f64;
        let t = out.entry(r.algorithm.clone()).or_insert(CostTotals {
            runs: 0,
            parallel_iters: 0,
            sequential_iters: 0,
            parallel_epochs: 0.0,
            sequential_epochs: 0.0,
        });
        t.runs += 1;
        t.parallel_iters = t.parallel_iters.max(r.iterations);
        t.sequential_iters += r.iterations;
        t.parallel_epochs = t.parallel_epochs.max(epochs);
        t.sequential_epochs += epochs;
    }
    out
}

/// Record for an evaluated ticket (split `ticket`).
pub fn ticket_record(meta: &RecordMeta, round: usize, iter: u64, iters_per_epoch: u64, loss: f64, accuracy: f64, remaining: f64) -> RunRecord {
    meta.record(round, iter / iters_per_epoch.max(1), iter, "ticket", loss, accuracy, remaining, 1.0)
}
