//! Experiment plans: everything needed to expand and execute a set of runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{gen_sparse_teacher, load_idx, two_moons_split, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ConvPreset, ModelSpec};
use crate::optim::{GroupConfig, OptimConfig};
use crate::search::{Algorithm, PruneScope, RoundConfig, SupermaskVariant};
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    TwoMoons {
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
    Teacher {
        d_in: usize,
        hidden: usize,
        density: f64,
        n_train: usize,
        n_test: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::TwoMoons {
            n_train: 512,
            n_test: 256,
            noise: 0.1,
        }
    }
}

impl DataSpec {
    /// Train and test splits; synthetic data is keyed by `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::TwoMoons { n_train, n_test, noise } => two_moons_split(*n_train, *n_test, *noise, seed),
            DataSpec::Teacher {
                d_in,
                hidden,
                density,
                n_train,
                n_test,
            } => {
                let (all, _) = gen_sparse_teacher(*d_in, *hidden, *density, n_train + n_test, seed)?;
                let (x, y) = all.batch(&(0..*n_train).collect::<Vec<_>>());
                let train = Dataset::new(x, y, all.num_classes, Split::Train, format!("{} train", all.provenance))?;
                let (x, y) = all.batch(&(*n_train..n_train + n_test).collect::<Vec<_>>());
                let test = Dataset::new(x, y, all.num_classes, Split::Test, format!("{} test", all.provenance))?;
                Ok((train, test))
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => Ok((
                load_idx(train_images, train_labels, *limit, Split::Train)?,
                load_idx(test_images, test_labels, *limit, Split::Test)?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        widths: Vec<usize>,
        /// One flag per dense layer; all maskable when omitted.
        #[serde(default)]
        maskable: Option<Vec<bool>>,
    },
    Conv {
        preset: ConvPreset,
        input: [usize; 3],
        classes: usize,
        #[serde(default)]
        mask_head: bool,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            widths: vec![2, 64, 64, 2],
            maskable: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        match self {
            ModelConfig::Mlp { widths, maskable } => {
                let flags = match maskable {
                    Some(f) => f.clone(),
                    None => vec![true; widths.len().saturating_sub(1)],
                };
                ModelSpec::mlp(widths, &flags)
            }
            ModelConfig::Conv {
                preset,
                input,
                classes,
                mask_head,
            } => ModelSpec::conv(*preset, *input, *classes, *mask_head),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Hard mask on `w^(k)`, fresh optimizer, dense training budget.
    #[default]
    RetrainFromRewind,
    /// Hard mask on the searched weights `w^(T)`, trained for the fine-tune budget.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseConfig {
    pub iters: u64,
    pub optim: GroupConfig,
    pub lr_milestones: Vec<u64>,
    pub lr_gamma: f64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            iters: 2000,
            optim: GroupConfig::adam(1e-2),
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
        }
    }
}

impl DenseConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig::uniform(self.optim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iters: u64,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { iters: 500, lr: 1e-3 }
    }
}

/// One swept hyperparameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub batch_size: usize,
    pub record_every: u64,
    pub eval_mode: EvalMode,
    /// Re-train each ticket and log its test accuracy.
    pub evaluate_tickets: bool,
    pub scope: PruneScope,
    pub supermask: SupermaskVariant,
    pub max_parallel: usize,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub dense: DenseConfig,
    pub search: RoundConfig,
    pub finetune: FinetuneConfig,
    pub grid: Vec<GridAxis>,
    /// Layers reported together in per-block sparsity, e.g. `[[0, 1], [2]]`.
    pub blocks: Vec<Vec<usize>>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            algorithm: Algorithm::Cs,
            seeds: vec![1],
            precision: Precision::F64,
            batch_size: 64,
            record_every: 0,
            eval_mode: EvalMode::RetrainFromRewind,
            evaluate_tickets: true,
            scope: PruneScope::Global,
            supermask: SupermaskVariant::Cs,
            max_parallel: 1,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            dense: DenseConfig::default(),
            search: RoundConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: Vec::new(),
            blocks: Vec::new(),
        }
    }
}

/// A fully specified run: one grid point and one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub seed: u64,
    pub point: Vec<(String, f64)>,
    pub search: RoundConfig,
}

pub fn set_param(cfg: &mut RoundConfig, name: &str, value: f64) -> Result<()> {
    match name {
        "s0" | "s_init" => cfg.s_init = value,
        "lambda" => cfg.lambda = value,
        "beta_final" | "beta" => cfg.beta_final = value,
        "prune_rate" | "tau" => cfg.prune_rate = Some(value),
        "rounds" => cfg.rounds = integral(name, value)? as usize,
        "iters" | "iters_per_round" => cfg.iters_per_round = integral(name, value)?,
        "scores_lr" => cfg.optim.scores.lr = value,
        "weights_lr" => cfg.optim.weights.lr = value,
        other => return Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
    }
    Ok(())
}

fn integral(name: &str, value: f64) -> Result<u64> {
    if value < 0.0 || value.fract() != 0.0 {
        return Err(Error::Config(format!("{name} must be a non-negative integer, got {value}")));
    }
    Ok(value as u64)
}

fn fmt_point(point: &[(String, f64)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Contract("seed list is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        for axis in &self.grid {
            if axis.values.is_empty() {
                return Err(Error::Contract(format!("grid axis {} has no values", axis.param)));
            }
            set_param(&mut self.search.clone(), &axis.param, axis.values[0])?;
        }
        self.model.spec()?;
        Ok(())
    }

    /// Grid points (cartesian product, first axis slowest), or one empty point.
    pub fn grid_points(&self) -> Vec<Vec<(String, f64)>> {
        let mut points = vec![Vec::new()];
        for axis in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((axis.param.clone(), v));
                        q
                    })
                })
                .collect();
        }
        points
    }

    /// Every (grid point, seed) pair as an independent run.
    pub fn expand(&self) -> Result<Vec<RunSpec>> {
        self.validate()?;
        let mut runs = Vec::new();
        for point in self.grid_points() {
            let mut search = self.search.clone();
            for (k, v) in &point {
                set_param(&mut search, k, *v)?;
            }
            for &seed in &self.seeds {
                let tag = fmt_point(&point);
                let run_id = if tag.is_empty() {
                    format!("{}-seed{seed}", self.algorithm)
                } else {
                    format!("{}-{tag}-seed{seed}", self.algorithm)
                };
                runs.push(RunSpec {
                    run_id,
                    seed,
                    point: point.clone(),
                    search: search.clone(),
                });
            }
        }
        Ok(runs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_times_seeds() {
        let plan = ExperimentPlan {
            seeds: vec![1, 2, 3],
            grid: vec![GridAxis {
                param: "s0".into(),
                values: (0..11).map(|i| -0.3 + 0.06 * i as f64).collect(),
            }],
            ..Default::default()
        };
        let runs = plan.expand().unwrap();
        assert_eq!(runs.len(), 33);
        let ids: std::collections::HashSet<_> = runs.iter().map(|r| &r.run_id).collect();
        assert_eq!(ids.len(), 33);
    }

    #[test]
    fn empty_axis_and_seedless_plans_are_rejected() {
        let plan = ExperimentPlan {
            grid: vec![GridAxis {
                param: "s0".into(),
                values: vec![],
            }],
            ..Default::default()
        };
        assert!(matches!(plan.expand(), Err(Error::Contract(_))));
        let plan = ExperimentPlan {
            seeds: vec![],
            ..Default::default()
        };
        assert!(matches!(plan.expand(), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_parameter() {
        let mut cfg = RoundConfig::default();
        assert!(set_param(&mut cfg, "gamma", 1.0).is_err());
        set_param(&mut cfg, "rounds", 5.0).unwrap();
        assert_eq!(cfg.rounds, 5);
    }
}
