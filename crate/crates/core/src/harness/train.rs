//! Minibatch training loop with per-iteration callbacks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{remaining_fraction_soft, GateMode, GatePenalty, Mask, TemperatureSchedule};
use crate::model::{argmax_rows, GateCtx, Model};
use crate::optim::{OptimConfig, Optimizer};
use crate::persist::records::{RecordMeta, RunRecord};
use crate::search::RewindStore;
use crate::tape::Tape;
use crate::tensor::{sigmoid, Precision};

/// Stable 64-bit FNV-1a hash, used to derive per-run RNG streams.
pub fn stream_id(run_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in run_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Everything that evolves during a run. Checkpoints serialize this.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub schedule: Option<TemperatureSchedule>,
    pub penalty: GatePenalty,
    pub precision: Precision,
    pub batch_size: usize,
    /// Epoch `e` visits the data in the order of a shuffle keyed by `(shuffle_seed, e)`.
    pub shuffle_seed: u64,
    /// Optimizer iterations performed so far.
    pub iter: u64,
    pub round: usize,
    pub round_iter: u64,
    /// Stream for stochastic gates, keyed by `(seed, run id)`.
    pub gate_rng: ChaCha8Rng,
    pub(crate) perm_cache: Option<(u64, Vec<usize>)>,
}

impl RunState {
    pub fn new(
        model: Model,
        optim: OptimConfig,
        precision: Precision,
        batch_size: usize,
        seed: u64,
        run_id: &str,
    ) -> Self {
        let mut gate_rng = ChaCha8Rng::seed_from_u64(seed);
        gate_rng.set_stream(stream_id(run_id));
        RunState {
            model,
            optimizer: Optimizer::new(optim, precision),
            schedule: None,
            penalty: GatePenalty { lambda: 0.0 },
            precision,
            batch_size,
            shuffle_seed: seed,
            iter: 0,
            round: 1,
            round_iter: 0,
            gate_rng,
            perm_cache: None,
        }
    }

    pub fn current_beta(&self) -> f64 {
        self.schedule.map_or(1.0, |s| s.current_beta())
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size.max(1)).max(1) as u64
    }

    fn permutation(&mut self, epoch: u64, n: usize) -> &[usize] {
        let stale = !matches!(&self.perm_cache, Some((e, p)) if *e == epoch && p.len() == n);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.perm_cache = Some((epoch, order));
        }
        &self.perm_cache.as_ref().expect("cached").1
    }

    /// Fraction of maskable weights the network currently keeps. Soft gates
    /// count as kept while `σ(βs)` is above the reporting threshold.
    pub fn remaining_fraction(&self) -> f64 {
        let beta = self.current_beta();
        let mut kept = 0.0;
        let mut total = 0usize;
        for (gi, g) in self.model.groups.iter().enumerate() {
            let n = g.numel();
            total += n;
            let frac = match (g.mode, self.model.scores(gi), &g.frozen_mask) {
                (_, _, Some(frozen)) => frozen.iter().filter(|&&b| b).count() as f64 / n as f64,
                (GateMode::SoftDeterministic, Some(s), None) => {
                    let gates: Vec<f64> = s
                        .data()
                        .iter()
                        .zip(&g.alive)
                        .map(|(&v, &a)| if a { sigmoid(beta * v) } else { 0.0 })
                        .collect();
                    remaining_fraction_soft(&gates).unwrap_or(0.0)
                }
                _ => g.alive.iter().filter(|&&b| b).count() as f64 / n as f64,
            };
            kept += frac * n as f64;
        }
        if total == 0 {
            1.0
        } else {
            kept / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Global iteration count after this step.
    pub iter: u64,
    pub round_iter: u64,
    /// Completed epochs after this step.
    pub epoch: u64,
    pub epoch_end: bool,
    pub loss: f64,
    pub batch_accuracy: f64,
}

pub trait Callback {
    fn on_start(&mut self, _state: &mut RunState) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, state: &mut RunState, info: &StepInfo) -> Result<()>;
}

/// Advances the temperature schedule once per optimizer step.
pub struct AnnealBeta;

impl Callback for AnnealBeta {
    fn on_step(&mut self, state: &mut RunState, _info: &StepInfo) -> Result<()> {
        if let Some(s) = state.schedule.as_mut() {
            s.advance();
        }
        Ok(())
    }
}

/// Captures a [`RewindStore`] the first time the global iteration equals `at`.
pub struct SnapshotAt {
    pub at: u64,
    pub store: Option<RewindStore>,
}

impl SnapshotAt {
    pub fn new(at: u64, existing: Option<RewindStore>) -> Self {
        SnapshotAt { at, store: existing }
    }

    fn check(&mut self, state: &RunState) {
        if self.store.is_none() && state.iter == self.at {
            self.store = Some(RewindStore::capture(&state.model, self.at));
        }
    }
}

impl Callback for SnapshotAt {
    fn on_start(&mut self, state: &mut RunState) -> Result<()> {
        self.check(state);
        Ok(())
    }
    fn on_step(&mut self, state: &mut RunState, _info: &StepInfo) -> Result<()> {
        self.check(state);
        Ok(())
    }
}

/// Multiplies every learning rate by `gamma` at each milestone (round-relative iterations).
pub struct LrMilestones {
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl LrMilestones {
    pub fn factor_at(&self, round_iter: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= round_iter).count();
        self.gamma.powi(passed as i32)
    }
}

impl Callback for LrMilestones {
    fn on_start(&mut self, state: &mut RunState) -> Result<()> {
        state.optimizer.lr_factor = self.factor_at(state.round_iter);
        Ok(())
    }
    fn on_step(&mut self, state: &mut RunState, info: &StepInfo) -> Result<()> {
        state.optimizer.lr_factor = self.factor_at(info.round_iter);
        Ok(())
    }
}

/// Emits a `train` record every `every` iterations and at every epoch end.
pub struct Recorder<'a> {
    pub meta: &'a RecordMeta,
    pub every: u64,
    pub records: &'a mut Vec<RunRecord>,
}

impl Callback for Recorder<'_> {
    fn on_step(&mut self, state: &mut RunState, info: &StepInfo) -> Result<()> {
        let due = (self.every > 0 && info.iter.is_multiple_of(self.every)) || info.epoch_end;
        if due {
            self.records.push(self.meta.record(
                state.round,
                info.epoch,
                info.iter,
                "train",
                info.loss,
                info.batch_accuracy,
                state.remaining_fraction(),
                state.current_beta(),
            ));
        }
        Ok(())
    }
}

/// Runs `iterations` optimizer steps on shuffled minibatches.
///
/// The batch at global iteration `i` depends only on `(shuffle_seed, i)`,
/// so a run restored from a checkpoint continues on the same batches.
pub fn train(
    state: &mut RunState,
    data: &Dataset,
    iterations: u64,
    callbacks: &mut [&mut dyn Callback],
) -> Result<()> {
    let n = data.len();
    if state.batch_size == 0 || state.batch_size > n {
        return Err(Error::Contract(format!(
            "batch size {} for a dataset of {n} samples",
            state.batch_size
        )));
    }
    for cb in callbacks.iter_mut() {
        cb.on_start(state)?;
    }
    let bpe = state.batches_per_epoch(n);
    let bs = state.batch_size;
    for _ in 0..iterations {
        let epoch = state.iter / bpe;
        let b = (state.iter % bpe) as usize;
        let idx: Vec<usize> = state.permutation(epoch, n)[b * bs..(b + 1) * bs].to_vec();
        let (x, y) = data.batch(&idx);

        let mut tape = Tape::new(state.precision);
        let mut ctx = GateCtx {
            beta: state.current_beta(),
            rng: Some(&mut state.gate_rng),
            track_grad: true,
        };
        let fwd = state.model.forward(&mut tape, &x, &mut ctx)?;
        let loss = state.model.objective(&mut tape, &fwd, &y, state.penalty)?;
        let loss_value = tape.value(loss).item();
        let predictions = argmax_rows(tape.value(fwd.logits));
        tape.backward(loss)?;
        state.model.collect_grads(&tape, &fwd);
        state.optimizer.step(&mut state.model.params)?;
        if let Some(p) = state.model.params.iter().find(|p| p.value.first_non_finite().is_some()) {
            return Err(Error::NonFinite {
                op: "optimizer_step",
                index: p.value.first_non_finite().unwrap_or(0),
            });
        }

        state.iter += 1;
        state.round_iter += 1;
        let correct = predictions.iter().zip(&y).filter(|(p, l)| p == l).count();
        let info = StepInfo {
            iter: state.iter,
            round_iter: state.round_iter,
            epoch: state.iter / bpe,
            epoch_end: state.iter.is_multiple_of(bpe),
            loss: loss_value,
            batch_accuracy: correct as f64 / bs as f64,
        };
        for cb in callbacks.iter_mut() {
            cb.on_step(state, &info)?;
        }
    }
    Ok(())
}

/// Mean loss (cross-entropy only) and accuracy under the model's current gates.
pub fn evaluate(model: &Model, data: &Dataset, beta: f64, precision: Precision) -> Result<(f64, f64)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(512) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new(precision);
        let fwd = model.forward(&mut tape, &x, &mut GateCtx::inference(beta))?;
        let l = tape.softmax_cross_entropy(fwd.logits, &y)?;
        loss += tape.value(l).item() * chunk.len() as f64;
        let preds = argmax_rows(tape.value(fwd.logits));
        correct += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Evaluates `model` with `mask` applied as a fixed hard mask.
pub fn evaluate_masked(model: &Model, mask: &Mask, data: &Dataset, precision: Precision) -> Result<(f64, f64)> {
    let mut m = model.clone();
    m.apply_hard_mask(mask)?;
    evaluate(&m, data, 1.0, precision)
}
