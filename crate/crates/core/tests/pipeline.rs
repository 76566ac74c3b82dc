use contsparse::data::{two_moons_split, Dataset};
use contsparse::harness::plan::{ExperimentPlan, GridAxis};
use contsparse::harness::sweep::{run_plan, sweep};
use contsparse::harness::train::{train, AnnealBeta, RunState};
use contsparse::masking::{hard_mask, GateMode};
use contsparse::model::{Model, ModelSpec};
use contsparse::optim::{GroupConfig, OptimConfig};
use contsparse::persist::mask_io::load_mask;
use contsparse::persist::records::read_records;
use contsparse::persist::run_dir::{read_report, report_from_dir, run_path, write_outputs};
use contsparse::search::{
    freeze_mask_and_finetune, run_cs, run_imp, run_iss, run_sequential_cs, Algorithm, PruneScope, RoundConfig, RunEnv,
};
use contsparse::{Error, Precision};

fn data(seed: u64) -> (Dataset, Dataset) {
    two_moons_split(256, 128, 0.1, seed).unwrap()
}

fn env<'a>(train: &'a Dataset, test: &'a Dataset, seed: u64) -> RunEnv<'a> {
    RunEnv {
        train,
        test,
        precision: Precision::F64,
        batch_size: 32,
        seed,
        run_id: format!("pipeline-{seed}"),
        record_every: 0,
    }
}

fn model(seed: u64) -> Model {
    Model::build(ModelSpec::mlp(&[2, 32, 32, 2], &[true; 3]).unwrap(), seed).unwrap()
}

fn small_plan(algorithm: Algorithm) -> ExperimentPlan {
    let mut plan = ExperimentPlan {
        algorithm,
        seeds: vec![1, 2],
        ..ExperimentPlan::default()
    };
    plan.data = contsparse::harness::plan::DataSpec::TwoMoons {
        n_train: 256,
        n_test: 128,
        noise: 0.1,
    };
    plan.batch_size = 32;
    plan.dense.iters = 120;
    plan.search.rounds = 2;
    plan.search.iters_per_round = 80;
    plan
}

#[test]
fn serial_and_parallel_sweeps_agree() {
    let mut plan = small_plan(Algorithm::Cs);
    plan.grid = vec![GridAxis {
        param: "s0".into(),
        values: vec![-0.1, 0.0, 0.1],
    }];
    let serial = sweep(&plan).unwrap();
    plan.max_parallel = 3;
    let parallel = sweep(&plan).unwrap();
    assert_eq!(serial.report, parallel.report);
    assert_eq!(serial.records, parallel.records);
    assert_eq!(serial.costs, parallel.costs);
}

#[test]
fn rerun_reproduces_records_bitwise() {
    let mut plan = small_plan(Algorithm::Imp);
    plan.search.prune_rate = Some(0.2);
    let a = run_plan(&plan).unwrap();
    let b = run_plan(&plan).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.report, b.report);
}

#[test]
fn run_directory_is_self_describing() {
    let plan = small_plan(Algorithm::Cs);
    let outcome = run_plan(&plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &plan, &outcome).unwrap();
    for f in ["resolved.toml", "records.csv", "costs.json", "failures.json", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let cs = outcome.outcomes.iter().find(|o| o.algorithm == Algorithm::Cs).unwrap();
    let run = run_path(dir.path(), &cs.run.run_id);
    let stored = load_mask(&run.join("mask.bin")).unwrap();
    assert_eq!(&stored, &cs.search.as_ref().unwrap().final_ticket().unwrap().mask);
    assert!(run.join("mask_summary.txt").exists());
    assert!(run.join("rewind.bin").exists());
    assert_eq!(read_records(&dir.path().join("records.csv")).unwrap(), outcome.records);
    assert_eq!(report_from_dir(dir.path()).unwrap(), read_report(dir.path()).unwrap());
    let resolved = contsparse::persist::config::load_config(&dir.path().join("resolved.toml")).unwrap();
    assert_eq!(resolved, plan);
}

#[test]
fn cs_mask_is_heaviside_of_final_scores() {
    let (train_set, test_set) = data(3);
    let env = env(&train_set, &test_set, 3);
    let cfg = RoundConfig {
        rounds: 1,
        iters_per_round: 100,
        ..RoundConfig::default()
    };
    let result = run_cs(model(3), &env, &cfg).unwrap();
    let ticket = result.final_ticket().unwrap();
    for (gi, g) in ticket.mask.groups.iter().enumerate() {
        assert_eq!(g.bits, hard_mask(result.state.model.scores(gi).unwrap().data()));
    }
}

#[test]
fn cs_iterations_are_rounds_times_length() {
    let (train_set, test_set) = data(4);
    let env = env(&train_set, &test_set, 4);
    for s_init in [-0.2, 0.0, 0.2] {
        let cfg = RoundConfig {
            rounds: 3,
            iters_per_round: 40,
            s_init,
            ..RoundConfig::default()
        };
        let result = run_cs(model(4), &env, &cfg).unwrap();
        assert_eq!(result.iterations, 120);
        assert_eq!(result.tickets.len(), 3);
    }
}

#[test]
fn imp_nests_in_both_scopes() {
    let (train_set, test_set) = data(5);
    let env = env(&train_set, &test_set, 5);
    for scope in [PruneScope::Global, PruneScope::PerLayer] {
        let cfg = RoundConfig {
            rounds: 4,
            iters_per_round: 40,
            rewind_iter: 8,
            prune_rate: Some(0.3),
            ..RoundConfig::default()
        };
        let result = run_imp(model(5), &env, &cfg, scope).unwrap();
        assert_eq!(result.tickets.len(), 4);
        assert!(result.tickets.windows(2).all(|w| w[1].mask.is_subset_of(&w[0].mask)));
        assert!(result.tickets.windows(2).all(|w| w[1].remaining < w[0].remaining));
    }
}

#[test]
fn imp_halts_when_nothing_is_left_to_prune() {
    let (train_set, test_set) = data(6);
    let env = env(&train_set, &test_set, 6);
    let tiny = Model::build(ModelSpec::mlp(&[2, 2, 2], &[true, true]).unwrap(), 6).unwrap();
    let cfg = RoundConfig {
        rounds: 20,
        iters_per_round: 16,
        prune_rate: Some(0.2),
        ..RoundConfig::default()
    };
    let result = run_imp(tiny, &env, &cfg, PruneScope::Global).unwrap();
    assert!(result.halted.is_some());
    assert!(result.tickets.len() < 20);
}

#[test]
fn sequential_cs_removes_a_fixed_fraction() {
    let (train_set, test_set) = data(7);
    let env = env(&train_set, &test_set, 7);
    let cfg = RoundConfig {
        rounds: 3,
        iters_per_round: 40,
        prune_rate: Some(0.25),
        ..RoundConfig::default()
    };
    let m = model(7);
    let total = m.maskable_count();
    let result = run_sequential_cs(m, &env, &cfg).unwrap();
    let mut remaining = total;
    for t in &result.tickets {
        remaining -= (0.25 * remaining as f64).floor() as usize;
        assert_eq!(t.mask.kept(), remaining);
    }
    assert!(result.tickets.windows(2).all(|w| w[1].mask.is_subset_of(&w[0].mask)));
}

#[test]
fn iss_tickets_respect_removed_components() {
    let (train_set, test_set) = data(8);
    let env = env(&train_set, &test_set, 8);
    let cfg = RoundConfig {
        rounds: 3,
        iters_per_round: 40,
        s_init: 0.5,
        lambda: 1e-3,
        ..RoundConfig::default()
    };
    let result = run_iss(model(8), &env, &cfg).unwrap();
    let final_ticket = result.final_ticket().unwrap();
    for (g, t) in result.state.model.groups.iter().zip(&final_ticket.mask.groups) {
        assert!(t.bits.iter().zip(&g.alive).all(|(&m, &a)| a || !m));
    }
}

#[test]
fn freezing_twice_is_rejected() {
    let (train_set, _) = data(9);
    let mut m = model(9);
    m.configure_masks(GateMode::SoftDeterministic, 0.1);
    let mut state = RunState::new(m, OptimConfig::uniform(GroupConfig::adam(1e-2)), Precision::F64, 32, 9, "freeze");
    train(&mut state, &train_set, 10, &mut [&mut AnnealBeta]).unwrap();
    let mask = freeze_mask_and_finetune(&mut state, &train_set, 10, 1e-3, &mut []).unwrap();
    let scores_before: Vec<f64> = state.model.scores(0).unwrap().data().to_vec();
    train(&mut state, &train_set, 5, &mut []).unwrap();
    assert_eq!(state.model.scores(0).unwrap().data(), &scores_before[..]);
    assert_eq!(mask, state.model.current_mask());
    assert!(matches!(
        freeze_mask_and_finetune(&mut state, &train_set, 10, 1e-3, &mut []),
        Err(Error::Contract(_))
    ));
}

#[test]
fn empty_grid_is_a_contract_error() {
    let plan = small_plan(Algorithm::Cs);
    assert!(matches!(sweep(&plan), Err(Error::Contract(_))));
}
