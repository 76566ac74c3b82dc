//! Desk-scale acceptance run. Prints one line per criterion and exits
//! non-zero if any hard criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use contsparse::data::{gen_two_moons, two_moons_split, Dataset, Split};
use contsparse::harness::eval::run_dense;
use contsparse::harness::plan::{DenseConfig, ExperimentPlan, GridAxis};
use contsparse::harness::sweep::{median, run_plan, sweep};
use contsparse::harness::train::{evaluate_masked, train, AnnealBeta, Callback, RunState, StepInfo};
use contsparse::masking::{hard_mask, sample_bernoulli_mask, GateMode, GatePenalty, Mask, TemperatureSchedule};
use contsparse::model::{GateCtx, Model, ModelSpec};
use contsparse::optim::{GroupConfig, OptimConfig};
use contsparse::param::Role;
use contsparse::persist::checkpoint::Checkpoint;
use contsparse::persist::run_dir::{read_report, report_from_dir, write_outputs};
use contsparse::search::{
    run_cs, run_imp_observed, run_supermask, run_supermask_observed, Algorithm, PruneScope, RoundConfig, RunEnv,
    SupermaskVariant,
};
use contsparse::tape::{Tape, Var};
use contsparse::{Precision, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Review,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Review => "REVIEW",
        }
    }
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn env<'a>(train: &'a Dataset, test: &'a Dataset, seed: u64, run_id: &str) -> RunEnv<'a> {
    RunEnv {
        train,
        test,
        precision: Precision::F64,
        batch_size: 64,
        seed,
        run_id: run_id.to_string(),
        record_every: 0,
    }
}

fn mlp(widths: &[usize]) -> ModelSpec {
    ModelSpec::mlp(widths, &vec![true; widths.len() - 1]).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- 1

const FD_EPS: f64 = 1e-5;

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Max relative error between autodiff and central differences for a
/// scalar function of `inputs`.
fn op_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, weights_seed: u64) -> Result<f64> {
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        if tape.value(out).is_scalar() {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let r: Vec<f64> = (0..tape.value(out).numel()).map(|_| normal(&mut rng)).collect();
        let weighted = tape.const_mul(out, r)?;
        tape.sum(weighted)
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let vars = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect::<Result<Vec<_>>>()?;
        let out = scalar(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(Precision::F64);
    let vars = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = scalar(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0_f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

/// Entries bounded away from zero, so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape).map(|x| x.signum() * (0.2 + x.abs()))
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| vec![random_tensor(r, &[3, 4]), random_tensor(r, &[4, 5])], |t, v| t.matmul(v[0], v[1])),
        ("add", |r| vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])], |t, v| t.add(v[0], v[1])),
        ("mul", |r| vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])], |t, v| t.mul(v[0], v[1])),
        ("scale", |r| vec![random_tensor(r, &[3, 4])], |t, v| t.scale(v[0], -1.7)),
        ("add_bias", |r| vec![random_tensor(r, &[3, 4]), random_tensor(r, &[4])], |t, v| t.add_bias(v[0], v[1])),
        (
            "add_bias_channels",
            |r| vec![random_tensor(r, &[2, 3, 4, 4]), random_tensor(r, &[3])],
            |t, v| t.add_bias(v[0], v[1]),
        ),
        ("relu", |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.relu(v[0])),
        ("sigmoid", |r| vec![random_tensor(r, &[3, 4])], |t, v| t.sigmoid(v[0])),
        (
            "conv2d",
            |r| vec![random_tensor(r, &[2, 2, 5, 5]), random_tensor(r, &[3, 2, 3, 3])],
            |t, v| t.conv2d(v[0], v[1], 1, 1),
        ),
        (
            "conv2d_strided",
            |r| vec![random_tensor(r, &[2, 2, 6, 6]), random_tensor(r, &[3, 2, 2, 2])],
            |t, v| t.conv2d(v[0], v[1], 2, 0),
        ),
        ("max_pool2", |r| vec![random_tensor(r, &[2, 3, 4, 4])], |t, v| t.max_pool2(v[0])),
        ("reshape", |r| vec![random_tensor(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6])),
        ("sum", |r| vec![random_tensor(r, &[3, 4])], |t, v| t.sum(v[0])),
        ("sum_abs", |r| vec![away_from_zero(r, &[3, 4])], |t, v| t.sum_abs(v[0])),
        ("sum_squares", |r| vec![random_tensor(r, &[3, 4])], |t, v| t.sum_squares(v[0])),
        (
            "const_mul",
            |r| vec![random_tensor(r, &[3, 4])],
            |t, v| t.const_mul(v[0], (0..12).map(|i| (i % 3) as f64 - 0.5).collect()),
        ),
        (
            // forward is linear in w, so its w-gradient is checkable
            "straight_through_w",
            |r| vec![random_tensor(r, &[3, 4])],
            |t, v| {
                let s = t.constant(Tensor::zeros(&[3, 4]))?;
                let mask = (0..12).map(|i| (i % 2) as f64).collect();
                t.straight_through(v[0], s, mask, vec![0.25; 12])
            },
        ),
        (
            "softmax_cross_entropy",
            |r| vec![random_tensor(r, &[4, 3])],
            |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]),
        ),
    ]
}

/// Two-moons samples whose first-layer pre-activations all clear `margin`.
fn smooth_batch(model: &Model, beta: f64, seed: u64, n: usize, margin: f64) -> Result<Dataset> {
    let pool = gen_two_moons(8 * n, 0.1, seed, Split::Train)?;
    let g = &model.groups[0];
    let w = model.param(g.weight).value.clone();
    let s = model.param(g.scores.expect("soft gates")).value.clone();
    let bias = model.params.iter().find(|p| p.role == Role::Bias).expect("bias").value.clone();
    let hidden = bias.numel();
    let inputs = pool.inputs.data();
    let d = inputs.len() / pool.len();
    let mut keep = Vec::new();
    for i in 0..pool.len() {
        let x = &inputs[i * d..(i + 1) * d];
        let clear = (0..hidden).all(|h| {
            let z: f64 = (0..d)
                .map(|k| {
                    let idx = k * hidden + h;
                    x[k] * w.data()[idx] / (1.0 + (-beta * s.data()[idx]).exp())
                })
                .sum::<f64>()
                + bias.data()[h];
            z.abs() > margin
        });
        if clear {
            keep.push(i);
        }
        if keep.len() == n {
            break;
        }
    }
    let (x, y) = pool.batch(&keep);
    Dataset::new(x, y, 2, Split::Train, "smooth".into())
}

fn objective_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(mlp(&[2, 16, 2]), seed)?;
    model.configure_masks(GateMode::SoftDeterministic, 0.0);
    for p in &mut model.params {
        match p.role {
            Role::Score => p.value.data_mut().iter_mut().for_each(|v| *v = normal(&mut rng)),
            Role::Bias => p.value.data_mut().iter_mut().for_each(|v| *v = 0.1 * normal(&mut rng)),
            _ => {}
        }
    }
    let beta = 1.0 + 4.0 * rng.random::<f64>();
    let penalty = GatePenalty::new(1e-2)?;
    let batch = smooth_batch(&model, beta, seed, 32, 1e-3)?;

    let loss_of = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let fwd = m.forward(&mut tape, &batch.inputs, &mut GateCtx::inference(beta))?;
        let loss = m.objective(&mut tape, &fwd, &batch.labels, penalty)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new(Precision::F64);
    let mut ctx = GateCtx {
        beta,
        rng: None,
        track_grad: true,
    };
    let fwd = model.forward(&mut tape, &batch.inputs, &mut ctx)?;
    let loss = model.objective(&mut tape, &fwd, &batch.labels, penalty)?;
    tape.backward(loss)?;

    let mut worst = 0.0_f64;
    for (pi, leaf) in fwd.leaves.iter().enumerate() {
        let analytic = tape.grad(*leaf).expect("trainable").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params[pi].value.data_mut()[j] += FD_EPS;
            let mut minus = model.clone();
            minus.params[pi].value.data_mut()[j] -= FD_EPS;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}

fn criterion_1() -> Result<Verdict> {
    let mut worst_op = ("", 0.0_f64);
    for (name, make, build) in op_cases() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let e = op_error(&inputs, &build, seed + 1000)?;
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let mut worst_obj = 0.0_f64;
    for seed in 0..100 {
        worst_obj = worst_obj.max(objective_error(seed)?);
    }
    Ok(verdict(
        worst_op.1 < 1e-4 && worst_obj < 1e-4,
        format!(
            "gradient check over 100 seeds: max rel err {:.2e} for ops (worst {}), {:.2e} for the gated objective",
            worst_op.1, worst_op.0, worst_obj
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Verdict> {
    let seed = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(mlp(&[2, 64, 64, 2]), seed)?;
    model.configure_masks(GateMode::SoftDeterministic, 0.0);
    for p in model.params.iter_mut().filter(|p| p.role == Role::Score) {
        p.value.data_mut().iter_mut().for_each(|v| {
            let z = normal(&mut rng);
            *v = z.signum() * (0.05 + z.abs());
        });
    }
    let lambda = 1e-4;
    let batch = gen_two_moons(32, 0.1, seed, Split::Train)?;

    let mut limit_mask = model.current_mask();
    for (gi, gm) in limit_mask.groups.iter_mut().enumerate() {
        gm.bits = hard_mask(model.scores(gi).expect("scores").data());
    }
    let mut hard = model.clone();
    hard.apply_hard_mask(&limit_mask)?;
    let mut tape = Tape::new(Precision::F64);
    let fwd = hard.forward(&mut tape, &batch.inputs, &mut GateCtx::inference(1.0))?;
    let ce = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    let limit = tape.value(ce).item() + lambda * limit_mask.kept() as f64;

    let mut gaps = Vec::new();
    for beta in [1.0, 10.0, 100.0, 1000.0] {
        let mut tape = Tape::new(Precision::F64);
        let fwd = model.forward(&mut tape, &batch.inputs, &mut GateCtx::inference(beta))?;
        let loss = model.objective(&mut tape, &fwd, &batch.labels, GatePenalty::new(lambda)?)?;
        gaps.push((tape.value(loss).item() - limit).abs());
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = gaps[3];
    Ok(verdict(
        monotone && last < 1e-6,
        format!(
            "continuation limit gap at beta 1/10/100/1000: {}",
            gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

// ---------------------------------------------------------------- 3 and 4

fn s0_sweep_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan {
        algorithm: Algorithm::Cs,
        seeds: vec![1, 2, 3],
        evaluate_tickets: false,
        ..ExperimentPlan::default()
    };
    plan.search.rounds = 5;
    plan.search.iters_per_round = 500;
    plan.grid = vec![GridAxis {
        param: "s0".into(),
        values: (0..11).map(|i| -0.3 + 0.06 * i as f64).collect(),
    }];
    plan
}

fn criteria_3_4() -> Result<(Verdict, Verdict)> {
    let outcome = sweep(&s0_sweep_plan())?;
    let cs: Vec<_> = outcome.outcomes.iter().filter(|o| o.algorithm == Algorithm::Cs).collect();
    let iters: Vec<u64> = cs.iter().map(|o| o.cost.iterations).collect();
    let exact = cs.len() == 33 && outcome.failures.is_empty() && iters.iter().all(|&i| i == 2500);
    let c3 = verdict(
        exact,
        format!(
            "{} cs runs over 11 s0 values x 3 seeds, iterations min {} max {}",
            cs.len(),
            iters.iter().min().copied().unwrap_or(0),
            iters.iter().max().copied().unwrap_or(0)
        ),
    );
    let rho = outcome.report.spearman_s0_remaining;
    let medians: Vec<String> = outcome
        .report
        .grid
        .iter()
        .filter(|g| g.algorithm == "cs")
        .map(|g| format!("{:.3}", g.median_remaining))
        .collect();
    let c4 = verdict(
        rho.is_some_and(|r| r >= 0.9),
        format!("spearman(s0, median remaining) = {:?}; medians {}", rho, medians.join(" ")),
    );
    Ok((c3, c4))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Verdict> {
    let mut plan = ExperimentPlan {
        algorithm: Algorithm::Cs,
        seeds: vec![1, 2, 3, 4, 5],
        ..ExperimentPlan::default()
    };
    plan.search.rounds = 5;
    plan.search.iters_per_round = 500;
    plan.search.s_init = 0.0;
    plan.search.lambda = 1e-8;
    plan.search.beta_final = 200.0;
    let outcome = run_plan(&plan)?;
    if !outcome.failures.is_empty() {
        return Ok(verdict(false, format!("{} runs failed", outcome.failures.len())));
    }
    let mut gaps = Vec::new();
    let mut rows = Vec::new();
    for seed in &plan.seeds {
        let dense = outcome
            .outcomes
            .iter()
            .find(|o| o.algorithm == Algorithm::Dense && o.run.seed == *seed)
            .and_then(|o| o.dense.as_ref())
            .map(|d| d.test_accuracy)
            .expect("dense baseline per seed");
        let ticket = outcome
            .outcomes
            .iter()
            .find(|o| o.algorithm == Algorithm::Cs && o.run.seed == *seed)
            .and_then(|o| o.tickets.iter().find(|t| t.remaining <= 0.5))
            .and_then(|t| t.accuracy.map(|a| (t.round, t.remaining, a)));
        match ticket {
            Some((round, remaining, acc)) => {
                gaps.push(dense - acc);
                rows.push(format!("seed {seed}: round {round} {remaining:.3} remaining, {acc:.4} vs dense {dense:.4}"));
            }
            None => {
                gaps.push(f64::INFINITY);
                rows.push(format!("seed {seed}: no ticket at or below 50%"));
            }
        }
    }
    let gap = median(&gaps);
    Ok(verdict(gap <= 0.01, format!("median accuracy gap to dense {gap:.4}; {}", rows.join("; "))))
}

// ---------------------------------------------------------------- 6

/// Copies weights and biases at the start of every round.
struct RoundStarts {
    weights: Vec<Vec<(usize, Vec<f64>)>>,
}

impl Callback for RoundStarts {
    fn on_start(&mut self, state: &mut RunState) -> Result<()> {
        self.weights.push(
            state
                .model
                .params
                .iter()
                .enumerate()
                .filter(|(_, p)| p.role != Role::Score)
                .map(|(i, p)| (i, p.value.data().to_vec()))
                .collect(),
        );
        Ok(())
    }

    fn on_step(&mut self, _state: &mut RunState, _info: &StepInfo) -> Result<()> {
        Ok(())
    }
}

fn criterion_6() -> Result<Verdict> {
    let seed = 1;
    let (train_set, test_set) = two_moons_split(512, 256, 0.1, seed)?;
    let env = env(&train_set, &test_set, seed, "imp-acceptance");
    let cfg = RoundConfig {
        rounds: 10,
        iters_per_round: 200,
        rewind_iter: 8,
        prune_rate: Some(0.2),
        rewind_between_rounds: true,
        ..RoundConfig::default()
    };
    let model = Model::build(mlp(&[2, 64, 64, 2]), seed)?;
    let total = model.maskable_count();
    let mut starts = RoundStarts { weights: Vec::new() };
    let result = run_imp_observed(model, &env, &cfg, PruneScope::Global, Some(&mut starts))?;

    let mut problems = Vec::new();
    if result.tickets.len() != 10 || result.halted.is_some() {
        problems.push(format!("{} tickets, halted {:?}", result.tickets.len(), result.halted));
    }
    let mut previous = total;
    for (r, t) in result.tickets.iter().enumerate() {
        let kept = t.mask.kept();
        let expected_step = previous - (0.2 * previous as f64).floor() as usize;
        let closed_form = (total as f64 * 0.8_f64.powi(r as i32 + 1)).floor() as usize;
        if kept != expected_step || kept.abs_diff(closed_form) > r + 1 {
            problems.push(format!("round {}: {kept} kept, step rule {expected_step}, 0.8^r {closed_form}", r + 1));
        }
        previous = kept;
    }
    let nested = result.tickets.windows(2).all(|w| w[1].mask.is_subset_of(&w[0].mask));
    if !nested {
        problems.push("masks not nested".into());
    }
    let store = &result.rewind;
    let faithful = starts.weights.len() == 10
        && starts.weights[1..].iter().all(|round| {
            round.len() == store.tensors.len()
                && round.iter().zip(&store.tensors).all(|((i, w), (j, t))| i == j && bitwise_eq(w, t.data()))
        });
    if !faithful {
        problems.push("weights at round start differ from the rewind store".into());
    }
    let counts: Vec<String> = result.tickets.iter().map(|t| t.mask.kept().to_string()).collect();
    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("kept {} of {total}: {}; nested; rewinds bitwise exact", counts.last().unwrap(), counts.join(" "))
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Result<Verdict> {
    let seed = 1;
    let (train_set, test_set) = two_moons_split(512, 256, 0.1, seed)?;
    let env = env(&train_set, &test_set, seed, "saturated");
    let spec = mlp(&[2, 64, 64, 2]);
    let cfg = RoundConfig {
        rounds: 1,
        iters_per_round: 1000,
        lambda: 0.0,
        s_init: 10.0,
        ..RoundConfig::default()
    };
    let dense_cfg = DenseConfig {
        iters: 1000,
        optim: cfg.optim.weights,
        ..DenseConfig::default()
    };
    let cs = run_cs(Model::build(spec.clone(), seed)?, &env, &cfg)?;
    let dense = run_dense(&spec, &env, &dense_cfg)?;
    let ticket = cs.final_ticket().expect("one round");
    let mut gated = cs.state.model.clone();
    gated.apply_hard_mask(&ticket.mask)?;
    let cs_pred = gated.predict(&test_set.inputs, 1.0)?;
    let dense_pred = dense.model.predict(&test_set.inputs, 1.0)?;
    let agree = cs_pred.iter().zip(&dense_pred).filter(|(a, b)| a == b).count();
    Ok(verdict(
        agree == test_set.len() && ticket.remaining == 1.0,
        format!("argmax agreement {agree}/{} with ticket remaining {:.3}", test_set.len(), ticket.remaining),
    ))
}

// ---------------------------------------------------------------- 8

fn size_matched_random(mask: &Mask, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = mask.clone();
    for g in &mut random.groups {
        g.bits.shuffle(&mut rng);
    }
    random
}

fn supermask_cfg(variant: SupermaskVariant, epochs: u64) -> RoundConfig {
    let scores = match variant {
        SupermaskVariant::Cs => GroupConfig::adam(1e-2),
        SupermaskVariant::Ss => GroupConfig::sgd(100.0, 0.9, 0.0),
    };
    RoundConfig {
        rounds: 1,
        iters_per_round: epochs * 8,
        lambda: 1e-8,
        s_init: match variant {
            SupermaskVariant::Cs => 0.1,
            SupermaskVariant::Ss => 0.0,
        },
        optim: OptimConfig {
            weights: GroupConfig::adam(1e-2),
            scores,
        },
        ..RoundConfig::default()
    }
}

fn criterion_8() -> Result<Verdict> {
    let spec = mlp(&[2, 64, 64, 2]);
    let mut margins = Vec::new();
    let mut frozen = true;
    for seed in 1..=5 {
        let (train_set, test_set) = two_moons_split(512, 256, 0.1, seed)?;
        let env = env(&train_set, &test_set, seed, "supermask");
        let init = Model::build(spec.clone(), seed)?;
        let result = run_supermask(init.clone(), &env, &supermask_cfg(SupermaskVariant::Cs, 40), SupermaskVariant::Cs)?;
        frozen &= init
            .params
            .iter()
            .zip(&result.state.model.params)
            .filter(|(p, _)| p.role != Role::Score)
            .all(|(a, b)| bitwise_eq(a.value.data(), b.value.data()));
        let mask = &result.final_ticket().expect("ticket").mask;
        let (_, learned) = evaluate_masked(&result.state.model, mask, &test_set, Precision::F64)?;
        let (_, random) = evaluate_masked(&init, &size_matched_random(mask, seed + 100), &test_set, Precision::F64)?;
        margins.push(learned - random);
    }
    let m = median(&margins);
    Ok(verdict(
        frozen && m >= 0.05,
        format!(
            "median margin over size-matched random masks {m:.4} (per seed {}); frozen weights bitwise unchanged: {frozen}",
            margins.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

// ---------------------------------------------------------------- 9

/// Full training-set accuracy of the mask the run would output, per epoch.
struct EpochAccuracy<'a> {
    data: &'a Dataset,
    rng: ChaCha8Rng,
    curve: Vec<f64>,
}

impl Callback for EpochAccuracy<'_> {
    fn on_step(&mut self, state: &mut RunState, info: &StepInfo) -> Result<()> {
        if !info.epoch_end {
            return Ok(());
        }
        let mut mask = state.model.current_mask();
        for (gi, gm) in mask.groups.iter_mut().enumerate() {
            let g = &state.model.groups[gi];
            if g.mode == GateMode::StochasticBernoulli {
                gm.bits = sample_bernoulli_mask(state.model.scores(gi).expect("scores").data(), &g.alive, &mut self.rng);
            }
        }
        let (_, acc) = evaluate_masked(&state.model, &mask, self.data, Precision::F64)?;
        self.curve.push(acc);
        Ok(())
    }
}

fn first_epoch_reaching(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&a| a >= target).map(|i| i + 1)
}

fn criterion_9() -> Result<Verdict> {
    let epochs = 40;
    let spec = mlp(&[2, 64, 64, 2]);
    let mut ratios = Vec::new();
    let mut table = vec![format!(
        "    {:<5} {:>9} {:>9} {:>10} {:>9} {:>9} {:>6}",
        "seed", "cs_rem", "ss_rem", "ss_final", "cs_epoch", "ss_epoch", "ratio"
    )];
    for seed in 1..=5 {
        let (train_set, test_set) = two_moons_split(512, 256, 0.1, seed)?;
        let env = env(&train_set, &test_set, seed, "speed");
        let mut curves = Vec::new();
        let mut remaining = Vec::new();
        for variant in [SupermaskVariant::Cs, SupermaskVariant::Ss] {
            let mut obs = EpochAccuracy {
                data: &train_set,
                rng: ChaCha8Rng::seed_from_u64(seed),
                curve: Vec::new(),
            };
            let result = run_supermask_observed(
                Model::build(spec.clone(), seed)?,
                &env,
                &supermask_cfg(variant, epochs),
                variant,
                Some(&mut obs),
            )?;
            remaining.push(result.final_ticket().expect("ticket").remaining);
            curves.push(obs.curve);
        }
        let target = *curves[1].last().expect("epochs");
        let cs_epoch = first_epoch_reaching(&curves[0], target);
        let ss_epoch = first_epoch_reaching(&curves[1], target).expect("final epoch reaches itself");
        let ratio = cs_epoch.map_or(f64::INFINITY, |e| e as f64 / ss_epoch as f64);
        ratios.push(ratio);
        table.push(format!(
            "    {seed:<5} {:>9.3} {:>9.3} {target:>10.4} {:>9} {ss_epoch:>9} {ratio:>6.2}",
            remaining[0],
            remaining[1],
            cs_epoch.map_or("never".to_string(), |e| e.to_string()),
        ));
    }
    let r = median(&ratios);
    let status = if r <= 0.5 {
        Status::Pass
    } else if r <= 0.55 {
        Status::Review
    } else {
        Status::Fail
    };
    Ok(Verdict {
        status,
        detail: format!(
            "median epoch ratio cs/ss to reach the ss final training accuracy {r:.2} (needs <= 0.5)\n{}",
            table.join("\n")
        ),
    })
}

// ---------------------------------------------------------------- 10

fn cs_state(seed: u64) -> Result<RunState> {
    let mut model = Model::build(mlp(&[2, 16, 16, 2]), seed)?;
    model.configure_masks(GateMode::SoftDeterministic, 0.0);
    let mut state = RunState::new(
        model,
        OptimConfig::uniform(GroupConfig::adam(1e-2)),
        Precision::F64,
        32,
        seed,
        "resume",
    );
    state.schedule = Some(TemperatureSchedule::new(200.0, 15)?);
    state.penalty = GatePenalty::new(1e-4)?;
    Ok(state)
}

fn criterion_10() -> Result<Verdict> {
    let (train_set, _) = two_moons_split(256, 64, 0.1, 3)?;
    let mut straight = cs_state(3)?;
    train(&mut straight, &train_set, 15, &mut [&mut AnnealBeta])?;

    let dir = tempfile::tempdir().map_err(|e| contsparse::Error::Config(e.to_string()))?;
    let path = dir.path().join("state.ckpt");
    let mut first = cs_state(3)?;
    train(&mut first, &train_set, 10, &mut [&mut AnnealBeta])?;
    Checkpoint {
        state: first,
        rewind: None,
    }
    .save(&path)?;
    let mut resumed = Checkpoint::load(&path)?.state;
    train(&mut resumed, &train_set, 5, &mut [&mut AnnealBeta])?;
    let resume_exact = Checkpoint {
        state: straight,
        rewind: None,
    }
    .to_bytes()?
        == Checkpoint {
            state: resumed,
            rewind: None,
        }
        .to_bytes()?;

    let mut plan = ExperimentPlan {
        algorithm: Algorithm::Cs,
        seeds: vec![1, 2],
        ..ExperimentPlan::default()
    };
    plan.search.rounds = 2;
    plan.search.iters_per_round = 100;
    plan.dense.iters = 200;
    let outcome = run_plan(&plan)?;
    let out = dir.path().join("run");
    write_outputs(&out, &plan, &outcome)?;
    let recomputed = report_from_dir(&out)?;
    let report_exact = recomputed == outcome.report && recomputed == read_report(&out)?;
    Ok(verdict(
        resume_exact && report_exact,
        format!("resume 10+5 equals 15 steps bitwise: {resume_exact}; report recomputed exactly: {report_exact}"),
    ))
}

fn main() -> ExitCode {
    type Criterion = fn() -> Result<Verdict>;
    let mut results: Vec<(usize, Result<Verdict>, f64)> = Vec::new();
    let timed = |f: &dyn Fn() -> Result<Verdict>| {
        let t = Instant::now();
        let v = f();
        (v, t.elapsed().as_secs_f64())
    };
    let singles: [(usize, Criterion); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let t = Instant::now();
    match criteria_3_4() {
        Ok((c3, c4)) => {
            let secs = t.elapsed().as_secs_f64();
            results.push((3, Ok(c3), secs));
            results.push((4, Ok(c4), secs));
        }
        Err(e) => {
            let secs = t.elapsed().as_secs_f64();
            results.push((3, Err(e), secs));
            results.push((4, Err(contsparse::Error::Config("sweep failed".into())), secs));
        }
    }
    for (n, f) in singles {
        let (v, secs) = timed(&f);
        results.push((n, v, secs));
    }
    results.sort_by_key(|r| r.0);

    let mut hard_failures = 0;
    for (n, v, secs) in &results {
        let v = match v {
            Ok(v) => Verdict {
                status: v.status,
                detail: v.detail.clone(),
            },
            Err(e) => verdict(false, format!("error: {e}")),
        };
        // criterion 9 is a comparison report rather than a contract
        if v.status == Status::Fail && *n != 9 {
            hard_failures += 1;
        }
        println!("criterion {n:>2} {:<6} ({secs:.1}s) {}", v.status.label(), v.detail);
    }
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{hard_failures} hard criteria failed");
        ExitCode::FAILURE
    }
}
