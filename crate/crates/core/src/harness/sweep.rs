//! Plan execution, sweeps and the aggregated report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::model::Model;
use crate::persist::records::{round9, RunRecord};
use crate::search::{
    run_cs, run_iss, run_imp, run_sequential_cs, run_supermask, Algorithm, RunEnv, TicketResult,
};

use super::eval::{
    cost_accounting, finetune_ticket, per_layer_sparsity, retrain_ticket, run_dense, select_best_performing,
    select_sparsest_matching, ticket_record, CostRow, CostTotals, DenseResult, Selection, SparsityReport, TicketRow,
};
use super::plan::{EvalMode, ExperimentPlan, RunSpec};

#[derive(Debug, Clone)]
pub struct EvaluatedTicket {
    pub round: usize,
    pub mask: Mask,
    pub remaining: f64,
    pub accuracy: Option<f64>,
    pub sparsity: SparsityReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: RunSpec,
    pub algorithm: Algorithm,
    pub records: Vec<RunRecord>,
    pub tickets: Vec<EvaluatedTicket>,
    pub search: Option<TicketResult>,
    pub dense: Option<DenseResult>,
    pub cost: CostRow,
}

fn env_for<'a>(plan: &ExperimentPlan, run: &RunSpec, train: &'a crate::data::Dataset, test: &'a crate::data::Dataset) -> RunEnv<'a> {
    RunEnv {
        train,
        test,
        precision: plan.precision,
        batch_size: plan.batch_size,
        seed: run.seed,
        run_id: run.run_id.clone(),
        record_every: plan.record_every,
    }
}

/// Executes one run: the search (or dense training) and, when enabled, the
/// re-training of every produced ticket.
pub fn execute_run(plan: &ExperimentPlan, run: &RunSpec) -> Result<RunOutcome> {
    let (train, test) = plan.data.load(run.seed)?;
    let env = env_for(plan, run, &train, &test);
    let spec = plan.model.spec()?;
    let ipe = env.iters_per_epoch();

    if plan.algorithm == Algorithm::Dense {
        let dense = run_dense(&spec, &env, &plan.dense)?;
        return Ok(RunOutcome {
            run: run.clone(),
            algorithm: Algorithm::Dense,
            records: dense.records.clone(),
            tickets: Vec::new(),
            search: None,
            cost: CostRow {
                algorithm: Algorithm::Dense.as_str().into(),
                run_id: run.run_id.clone(),
                iterations: dense.iterations,
                iters_per_epoch: ipe,
            },
            dense: Some(dense),
        });
    }

    let model = Model::build(spec.clone(), run.seed)?;
    let cfg = &run.search;
    let result = match plan.algorithm {
        Algorithm::Cs => run_cs(model, &env, cfg)?,
        Algorithm::Imp | Algorithm::ImpC => {
            let cfg = crate::search::RoundConfig {
                rewind_between_rounds: plan.algorithm == Algorithm::Imp,
                ..cfg.clone()
            };
            run_imp(model, &env, &cfg, plan.scope)?
        }
        Algorithm::Iss => run_iss(model, &env, cfg)?,
        Algorithm::Seqcs => run_sequential_cs(model, &env, cfg)?,
        Algorithm::SupermaskCs | Algorithm::SupermaskSs => run_supermask(model, &env, cfg, plan.supermask)?,
        Algorithm::Dense => unreachable!(),
    };

    let mut records = result.records.clone();
    let meta = env.meta(result.algorithm, cfg.lambda, cfg.s_init);
    let supermask = matches!(result.algorithm, Algorithm::SupermaskCs | Algorithm::SupermaskSs);
    let mut tickets = Vec::new();
    for t in &result.tickets {
        let sparsity = per_layer_sparsity(&t.mask, &plan.blocks)?;
        let accuracy = if plan.evaluate_tickets {
            let (loss, acc) = if supermask {
                // the ticket is the network itself: frozen weights under the mask
                crate::harness::train::evaluate_masked(&result.state.model, &t.mask, &test, plan.precision)?
            } else {
                let r = match plan.eval_mode {
                    EvalMode::RetrainFromRewind => retrain_ticket(&spec, &t.mask, &result.rewind, &env, &plan.dense)?,
                    EvalMode::FineTune => {
                        finetune_ticket(&result.state.model, &t.mask, &env, &plan.dense, plan.finetune.iters, plan.finetune.lr)?
                    }
                };
                (r.test_loss, r.test_accuracy)
            };
            records.push(ticket_record(&meta, t.round, t.iter, ipe, loss, acc, t.remaining));
            Some(acc)
        } else {
            None
        };
        tickets.push(EvaluatedTicket {
            round: t.round,
            mask: t.mask.clone(),
            remaining: t.remaining,
            accuracy,
            sparsity,
        });
    }
    Ok(RunOutcome {
        run: run.clone(),
        algorithm: result.algorithm,
        records,
        tickets,
        cost: CostRow {
            algorithm: result.algorithm.as_str().into(),
            run_id: run.run_id.clone(),
            iterations: result.iterations,
            iters_per_epoch: ipe,
        },
        search: Some(result),
        dense: None,
    })
}

/// A child run that failed; the sweep continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run_id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub outcomes: Vec<RunOutcome>,
    pub failures: Vec<Failure>,
    /// Every record of every run (baselines first), at stored precision.
    pub records: Vec<RunRecord>,
    pub costs: Vec<CostRow>,
    pub report: Report,
}

/// Runs the dense baseline for every seed (unless the plan itself is dense)
/// and every expanded run, at most `max_parallel` at a time.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanOutcome> {
    let runs = plan.expand()?;
    let mut jobs: Vec<(ExperimentPlan, RunSpec)> = Vec::new();
    if plan.algorithm != Algorithm::Dense && plan.evaluate_tickets {
        let dense_plan = ExperimentPlan {
            algorithm: Algorithm::Dense,
            grid: Vec::new(),
            ..plan.clone()
        };
        for run in dense_plan.expand()? {
            jobs.push((dense_plan.clone(), run));
        }
    }
    for run in runs {
        jobs.push((plan.clone(), run));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.max_parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunOutcome>> = pool.install(|| jobs.par_iter().map(|(p, r)| execute_run(p, r)).collect());

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for ((_, run), res) in jobs.iter().zip(results) {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(Failure {
                run_id: run.run_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let records: Vec<RunRecord> = outcomes.iter().flat_map(|o| o.records.iter().map(rounded)).collect();
    let costs: Vec<CostRow> = outcomes.iter().map(|o| o.cost.clone()).collect();
    let report = build_report(&records, &costs, failures.clone())?;
    Ok(PlanOutcome {
        outcomes,
        failures,
        records,
        costs,
        report,
    })
}

/// A sweep is a plan with at least one grid axis.
pub fn sweep(plan: &ExperimentPlan) -> Result<PlanOutcome> {
    if plan.grid.is_empty() {
        return Err(Error::Contract("sweep grid is empty".into()));
    }
    run_plan(plan)
}

fn rounded(r: &RunRecord) -> RunRecord {
    RunRecord {
        loss: round9(r.loss),
        accuracy: round9(r.accuracy),
        remaining_frac: round9(r.remaining_frac),
        beta: round9(r.beta),
        lambda: round9(r.lambda),
        s0: round9(r.s0),
        ..r.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSelection {
    pub sparsest_matching: Option<Selection>,
    pub best_performing: Option<TicketRow>,
}

/// Per `(s0, λ)` aggregate over seeds of each run's final ticket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub algorithm: String,
    pub s0: f64,
    pub lambda: f64,
    pub runs: usize,
    pub median_remaining: f64,
    pub median_accuracy: Option<f64>,
    /// `(x − x_first) / x_first` against the first grid point of the same algorithm.
    pub rel_change_remaining: f64,
    pub rel_change_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Mean dense test accuracy over seeds.
    pub dense_accuracy: Option<f64>,
    pub selections: BTreeMap<String, AlgorithmSelection>,
    pub cost: BTreeMap<String, CostTotals>,
    pub grid: Vec<GridRow>,
    /// Spearman correlation between `s0` and median remaining fraction (CS runs).
    pub spearman_s0_remaining: Option<f64>,
    pub failures: Vec<Failure>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Aggregates stored records into selections, costs and grid summaries.
///
/// Only the stored (9-digit) record values are used, so applying this to a
/// records file reproduces the report of the original invocation.
pub fn build_report(records: &[RunRecord], costs: &[CostRow], failures: Vec<Failure>) -> Result<Report> {
    let mut dense: Vec<(u64, &str, f64)> = records
        .iter()
        .filter(|r| r.split == "dense")
        .map(|r| (r.seed, r.run_id.as_str(), r.accuracy))
        .collect();
    dense.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let dense_accuracy = (!dense.is_empty()).then(|| dense.iter().map(|d| d.2).sum::<f64>() / dense.len() as f64);

    let mut by_algo: BTreeMap<String, Vec<TicketRow>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == "ticket") {
        by_algo.entry(r.algorithm.clone()).or_default().push(TicketRow::from_record(r));
    }
    let mut selections = BTreeMap::new();
    for (algo, rows) in &by_algo {
        selections.insert(
            algo.clone(),
            AlgorithmSelection {
                sparsest_matching: dense_accuracy.map(|d| select_sparsest_matching(rows, d)).transpose()?,
                best_performing: Some(select_best_performing(rows)?),
            },
        );
    }

    // final ticket of every search run, in first-appearance order
    let mut order: Vec<&str> = Vec::new();
    let mut last_round: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    let mut last_ticket: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records {
        let slot = match r.split.as_str() {
            "round" => &mut last_round,
            "ticket" => &mut last_ticket,
            _ => continue,
        };
        if !order.contains(&r.run_id.as_str()) {
            order.push(&r.run_id);
        }
        let e = slot.entry(&r.run_id).or_insert(r);
        if r.round >= e.round {
            *e = r;
        }
    }
    // (algorithm, s0 bits, lambda bits) -> (remaining, accuracy) per run
    type Group = ((String, u64, u64), Vec<(f64, Option<f64>)>);
    let mut groups: Vec<Group> = Vec::new();
    for id in order {
        let Some(round) = last_round.get(id) else { continue };
        let key = (round.algorithm.clone(), round.s0.to_bits(), round.lambda.to_bits());
        let acc = last_ticket.get(id).map(|t| t.accuracy);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((round.remaining_frac, acc)),
            None => groups.push((key, vec![(round.remaining_frac, acc)])),
        }
    }
    let mut grid: Vec<GridRow> = Vec::new();
    for ((algo, s0, lambda), vals) in &groups {
        let rem: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let accs: Vec<f64> = vals.iter().filter_map(|v| v.1).collect();
        let median_remaining = median(&rem);
        let median_accuracy = (accs.len() == vals.len()).then(|| median(&accs));
        let first = grid.iter().find(|g| &g.algorithm == algo);
        let rel = |x: f64, x0: f64| if x0 == 0.0 { 0.0 } else { (x - x0) / x0 };
        let (rel_change_remaining, rel_change_accuracy) = match first {
            Some(f) => (
                rel(median_remaining, f.median_remaining),
                median_accuracy.zip(f.median_accuracy).map(|(a, b)| rel(a, b)),
            ),
            None => (0.0, median_accuracy.map(|_| 0.0)),
        };
        grid.push(GridRow {
            algorithm: algo.clone(),
            s0: f64::from_bits(*s0),
            lambda: f64::from_bits(*lambda),
            runs: vals.len(),
            median_remaining,
            median_accuracy,
            rel_change_remaining,
            rel_change_accuracy,
        });
    }
    let cs_rows: Vec<&GridRow> = grid.iter().filter(|g| g.algorithm == "cs").collect();
    let distinct_lambda = cs_rows.iter().all(|g| g.lambda.to_bits() == cs_rows[0].lambda.to_bits());
    let spearman_s0_remaining = if distinct_lambda {
        let s0: Vec<f64> = cs_rows.iter().map(|g| g.s0).collect();
        let rem: Vec<f64> = cs_rows.iter().map(|g| g.median_remaining).collect();
        spearman(&s0, &rem)
    } else {
        None
    };

    Ok(Report {
        dense_accuracy,
        selections,
        cost: cost_accounting(costs),
        grid,
        spearman_s0_remaining,
        failures,
    })
}
