//! Gating mathematics: the annealed sigmoid gate `σ(βs)`, its Heaviside
//! limit, the ℓ1 gate penalty, Bernoulli gates trained with a
//! straight-through estimator, and the between-rounds reset of `s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::sigmoid;

/// A soft gate below this value is reported as pruned.
pub const PRUNED_GATE_THRESHOLD: f64 = 1e-6;

/// Exponential inverse-temperature schedule `β(t) = β_final^(t/T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub beta_final: f64,
    pub total_iters: u64,
    pub current_iter: u64,
}

impl TemperatureSchedule {
    pub fn new(beta_final: f64, total_iters: u64) -> Result<Self> {
        if beta_final.is_nan() || beta_final < 1.0 {
            return Err(Error::Contract(format!(
                "final temperature must be at least 1, got {beta_final}"
            )));
        }
        if total_iters == 0 {
            return Err(Error::Contract("schedule needs at least one iteration".into()));
        }
        Ok(TemperatureSchedule {
            beta_final,
            total_iters,
            current_iter: 0,
        })
    }

    pub fn beta_at(&self, t: u64) -> Result<f64> {
        if t > self.total_iters {
            return Err(Error::Contract(format!(
                "iteration {t} beyond schedule length {}",
                self.total_iters
            )));
        }
        if t == self.total_iters {
            return Ok(self.beta_final);
        }
        Ok(self.beta_final.powf(t as f64 / self.total_iters as f64))
    }

    pub fn current_beta(&self) -> f64 {
        self.beta_at(self.current_iter.min(self.total_iters))
            .unwrap_or(self.beta_final)
    }

    /// Moves one iteration forward, saturating at the end of the schedule.
    pub fn advance(&mut self) {
        if self.current_iter < self.total_iters {
            self.current_iter += 1;
        }
    }

    /// Back to `β = 1`.
    pub fn reset(&mut self) {
        self.current_iter = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePenalty {
    pub lambda: f64,
}

impl GatePenalty {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::Contract(format!("penalty must be non-negative, got {lambda}")));
        }
        Ok(GatePenalty { lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `σ(βs) ⊙ w`.
    SoftDeterministic,
    /// `m ⊙ w` for a fixed binary `m`.
    Hard,
    /// `m ⊙ w` with `m ~ Bernoulli(σ(s))` resampled every forward pass.
    StochasticBernoulli,
    /// Plain dense parameter.
    None,
}

/// Backward rule through a sampled Bernoulli mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StraightThrough {
    /// d/ds := d/dm.
    #[default]
    Identity,
    /// d/ds := σ'(s) · d/dm.
    SigmoidScaled,
}

/// A maskable weight tensor and everything that gates it.
#[derive(Debug, Clone)]
pub struct MaskedGroup {
    pub name: String,
    /// Index of the owning layer in the model spec.
    pub layer: usize,
    pub weight: ParamId,
    pub scores: Option<ParamId>,
    pub s_init: f64,
    pub mode: GateMode,
    /// `false` marks a component as permanently removed (the hard mask in
    /// [`GateMode::Hard`], the frozen set of stochastic and sequential runs).
    pub alive: Vec<bool>,
    /// Set once the mask has been fixed for fine-tuning.
    pub frozen_mask: Option<Vec<bool>>,
    pub straight_through: StraightThrough,
}

impl MaskedGroup {
    pub fn numel(&self) -> usize {
        self.alive.len()
    }

    pub fn all_alive(&self) -> bool {
        self.alive.iter().all(|&a| a)
    }

    pub fn alive_factor(&self) -> Vec<f64> {
        bools_to_f64(&self.alive)
    }
}

pub fn bools_to_f64(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Records `σ(β s)` on the tape and returns `(σ(βs) ⊙ w, σ(βs))`.
///
/// `alive`, when given, multiplies the gate so removed components stay at 0.
pub fn soft_gate(
    tape: &mut Tape,
    w: Var,
    s: Var,
    beta: f64,
    alive: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let scaled = tape.scale(s, beta)?;
    let mut gate = tape.sigmoid(scaled)?;
    if let Some(alive) = alive {
        gate = tape.const_mul(gate, bools_to_f64(alive))?;
    }
    let gated = tape.mul(w, gate)?;
    Ok((gated, gate))
}

/// Heaviside step: 1 where `s > 0`, else 0 (so `H(0) = 0`).
pub fn hard_mask(s: &[f64]) -> Vec<bool> {
    s.iter().map(|&x| x > 0.0).collect()
}

/// `λ · Σ gate` on the tape. Gates are positive, so this is `λ‖gate‖₁`.
pub fn gate_penalty_term(tape: &mut Tape, gate: Var, penalty: GatePenalty) -> Result<Var> {
    let total = tape.sum(gate)?;
    tape.scale(total, penalty.lambda)
}

/// Samples `m ~ Bernoulli(σ(s))` (0 where `alive` is false) and records
/// `m ⊙ w` with a straight-through backward rule for `s`.
pub fn stochastic_gate<R: Rng + ?Sized>(
    tape: &mut Tape,
    w: Var,
    s: Var,
    alive: &[bool],
    variant: StraightThrough,
    rng: Option<&mut R>,
) -> Result<Var> {
    let Some(rng) = rng else {
        return Err(Error::Contract(
            "stochastic gate needs a random number generator".into(),
        ));
    };
    let scores = tape.value(s).data();
    if scores.len() != alive.len() {
        return Err(Error::Dimension(format!(
            "{} alive flags for {} mask parameters",
            alive.len(),
            scores.len()
        )));
    }
    let mut mask = Vec::with_capacity(scores.len());
    let mut factor = Vec::with_capacity(scores.len());
    for (&sv, &a) in scores.iter().zip(alive) {
        let p = sigmoid(sv);
        // Drawn for every component so the stream position does not depend on `alive`.
        let u: f64 = rng.random();
        if a {
            mask.push(if u < p { 1.0 } else { 0.0 });
            factor.push(match variant {
                StraightThrough::Identity => 1.0,
                StraightThrough::SigmoidScaled => p * (1.0 - p),
            });
        } else {
            mask.push(0.0);
            factor.push(0.0);
        }
    }
    tape.straight_through(w, s, mask, factor)
}

/// Draws one binary mask from `Bernoulli(σ(s))`, forcing removed components to 0.
pub fn sample_bernoulli_mask<R: Rng + ?Sized>(s: &[f64], alive: &[bool], rng: &mut R) -> Vec<bool> {
    s.iter()
        .zip(alive)
        .map(|(&sv, &a)| {
            let u: f64 = rng.random();
            a && u < sigmoid(sv)
        })
        .collect()
}

/// Between-rounds reset `s ← min(β_final · s_T, s_init)`.
pub fn reset_scores(s_final: &[f64], beta_final: f64, s_init: f64) -> Vec<f64> {
    s_final.iter().map(|&x| (beta_final * x).min(s_init)).collect()
}

/// Fraction of nonzero entries of a binary mask.
pub fn remaining_fraction(mask: &[bool]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Contract("sparsity of an empty mask".into()));
    }
    Ok(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64)
}

/// Fraction of soft gate values at or above [`PRUNED_GATE_THRESHOLD`].
pub fn remaining_fraction_soft(gates: &[f64]) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::Contract("sparsity of an empty gate tensor".into()));
    }
    Ok(gates.iter().filter(|&&g| g >= PRUNED_GATE_THRESHOLD).count() as f64 / gates.len() as f64)
}

/// Binary masks for every maskable group of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub groups: Vec<GroupMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMask {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn kept(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.bits.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.bits.len()).sum()
    }

    pub fn remaining_fraction(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("sparsity of an empty mask".into()));
        }
        Ok(self.kept() as f64 / total as f64)
    }

    /// Every bit of every group, in group order.
    pub fn flat(&self) -> Vec<bool> {
        self.groups.iter().flat_map(|g| g.bits.iter().copied()).collect()
    }

    /// Element-wise `self ≤ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.bits.len() == b.bits.len() && a.bits.iter().zip(&b.bits).all(|(&x, &y)| !x || y))
    }
}
