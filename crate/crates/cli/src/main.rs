use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contsparse::harness::plan::{ExperimentPlan, GridAxis};
use contsparse::harness::sweep::{run_plan, sweep, PlanOutcome, Report};
use contsparse::persist::config::{load_config, parse_grid};
use contsparse::persist::run_dir::{read_report, report_from_dir, write_outputs};
use contsparse::search::{Algorithm, PruneScope, SupermaskVariant};
use contsparse::Result;

#[derive(Parser)]
#[command(name = "contsparse", version, about = "Sparse subnetwork search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense baseline.
    Dense(RunArgs),
    /// Continuous sparsification.
    Cs(RunArgs),
    /// Iterative magnitude pruning.
    Imp(ImpArgs),
    /// Iterative stochastic sparsification.
    Iss(RunArgs),
    /// Sequential continuous sparsification.
    Seqcs(RunArgs),
    /// Mask learning over frozen random weights.
    Supermask(SupermaskArgs),
    /// Run a hyperparameter grid.
    Sweep(SweepArgs),
    /// Recompute selections and costs from a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the seed list with a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long = "s0", allow_hyphen_values = true)]
    s0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta_final: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Iterations per round.
    #[arg(long)]
    iters: Option<u64>,
    /// Rewind point in epochs (converted to iterations).
    #[arg(long, conflicts_with = "rewind_iters")]
    rewind_epochs: Option<u64>,
    /// Rewind point in iterations.
    #[arg(long)]
    rewind_iters: Option<u64>,
    #[arg(long)]
    prune_rate: Option<f64>,
    #[arg(long)]
    rewind_between_rounds: Option<bool>,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Skip ticket re-training.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args, Clone)]
struct ImpArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_scope)]
    scope: Option<PruneScope>,
    /// Continue from trained weights instead of rewinding (IMP-C).
    #[arg(long)]
    continue_weights: bool,
}

#[derive(Args, Clone)]
struct SupermaskArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<SupermaskVariant>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Algorithm to sweep (defaults to the config value).
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// `name=lo:hi:count` or `name=v1,v2`; repeat for more axes.
    #[arg(long, allow_hyphen_values = true)]
    grid: Vec<String>,
}

fn parse_scope(s: &str) -> std::result::Result<PruneScope, String> {
    match s {
        "global" => Ok(PruneScope::Global),
        "per-layer" => Ok(PruneScope::PerLayer),
        _ => Err(format!("unknown scope {s:?} (global, per-layer)")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<SupermaskVariant, String> {
    match s {
        "cs" => Ok(SupermaskVariant::Cs),
        "ss" => Ok(SupermaskVariant::Ss),
        _ => Err(format!("unknown supermask variant {s:?} (cs, ss)")),
    }
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    Algorithm::parse(s).map_err(|e| e.to_string())
}

fn base_plan(args: &RunArgs, algorithm: Algorithm) -> Result<ExperimentPlan> {
    let mut plan = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentPlan::default(),
    };
    plan.algorithm = algorithm;
    if let Some(seed) = args.seed {
        plan.seeds = vec![seed];
    }
    if let Some(seeds) = &args.seeds {
        plan.seeds = seeds.clone();
    }
    let s = &mut plan.search;
    if let Some(v) = args.s0 {
        s.s_init = v;
    }
    if let Some(v) = args.lambda {
        s.lambda = v;
    }
    if let Some(v) = args.beta_final {
        s.beta_final = v;
    }
    if let Some(v) = args.rounds {
        s.rounds = v;
    }
    if let Some(v) = args.iters {
        s.iters_per_round = v;
    }
    if let Some(v) = args.rewind_iters {
        s.rewind_iter = v;
    }
    if let Some(v) = args.prune_rate {
        s.prune_rate = Some(v);
    }
    if let Some(v) = args.rewind_between_rounds {
        s.rewind_between_rounds = v;
    }
    if let Some(v) = args.max_parallel {
        plan.max_parallel = v;
    }
    if args.no_eval {
        plan.evaluate_tickets = false;
    }
    if let Some(epochs) = args.rewind_epochs {
        let seed = plan.seeds.first().copied().unwrap_or(0);
        let (train, _) = plan.data.load(seed)?;
        let per_epoch = (train.len() / plan.batch_size.max(1)).max(1) as u64;
        plan.search.rewind_iter = epochs * per_epoch;
    }
    Ok(plan)
}

fn default_out(algorithm: Algorithm) -> PathBuf {
    Path::new("runs").join(algorithm.as_str())
}

fn print_report(report: &Report) {
    if let Some(d) = report.dense_accuracy {
        println!("dense accuracy      {d:.4}");
    }
    for (algo, sel) in &report.selections {
        match &sel.sparsest_matching {
            Some(contsparse::harness::eval::Selection::Found { ticket }) => println!(
                "{algo:<8} sparsest matching  {} round {}: {:.4} remaining, accuracy {:.4}",
                ticket.run_id, ticket.round, ticket.remaining, ticket.accuracy
            ),
            Some(contsparse::harness::eval::Selection::NoneFound) => {
                println!("{algo:<8} sparsest matching  none found")
            }
            None => {}
        }
        if let Some(t) = &sel.best_performing {
            println!(
                "{algo:<8} best performing    {} round {}: {:.4} remaining, accuracy {:.4}",
                t.run_id, t.round, t.remaining, t.accuracy
            );
        }
    }
    for (algo, c) in &report.cost {
        println!(
            "{algo:<8} cost  {} runs, parallel {} iters ({:.1} epochs), sequential {} iters ({:.1} epochs)",
            c.runs, c.parallel_iters, c.parallel_epochs, c.sequential_iters, c.sequential_epochs
        );
    }
    if report.grid.len() > 1 {
        println!("algorithm  s0          lambda      runs  median_remaining  median_accuracy");
        for g in &report.grid {
            let acc = g.median_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            println!(
                "{:<10} {:<11} {:<11} {:<5} {:<17.4} {acc}",
                g.algorithm, g.s0, g.lambda, g.runs, g.median_remaining
            );
        }
    }
    if let Some(r) = report.spearman_s0_remaining {
        println!("spearman(s0, remaining) {r:.4}");
    }
    for f in &report.failures {
        eprintln!("run {} failed: {}", f.run_id, f.error);
    }
}

fn finish(plan: &ExperimentPlan, outcome: PlanOutcome, out: &Path) -> Result<ExitCode> {
    write_outputs(out, plan, &outcome)?;
    print_report(&outcome.report);
    println!("wrote {}", out.display());
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let (plan, out, is_sweep) = match &cli.command {
        Command::Dense(a) => (base_plan(a, Algorithm::Dense)?, a.out.clone(), false),
        Command::Cs(a) => (base_plan(a, Algorithm::Cs)?, a.out.clone(), false),
        Command::Iss(a) => (base_plan(a, Algorithm::Iss)?, a.out.clone(), false),
        Command::Seqcs(a) => {
            let mut plan = base_plan(a, Algorithm::Seqcs)?;
            plan.search.prune_rate.get_or_insert(0.2);
            (plan, a.out.clone(), false)
        }
        Command::Imp(a) => {
            let algorithm = if a.continue_weights {
                Algorithm::ImpC
            } else {
                Algorithm::Imp
            };
            let mut plan = base_plan(&a.run, algorithm)?;
            plan.search.prune_rate.get_or_insert(0.2);
            if let Some(scope) = a.scope {
                plan.scope = scope;
            }
            (plan, a.run.out.clone(), false)
        }
        Command::Supermask(a) => {
            let mut plan = base_plan(&a.run, Algorithm::SupermaskCs)?;
            if let Some(v) = a.variant {
                plan.supermask = v;
            }
            plan.algorithm = match plan.supermask {
                SupermaskVariant::Cs => Algorithm::SupermaskCs,
                SupermaskVariant::Ss => Algorithm::SupermaskSs,
            };
            (plan, a.run.out.clone(), false)
        }
        Command::Sweep(a) => {
            let mut plan = base_plan(&a.run, Algorithm::Cs)?;
            let from_file = a.run.config.as_ref().map(|p| load_config(p)).transpose()?;
            plan.algorithm = a
                .algorithm
                .or(from_file.map(|p| p.algorithm))
                .unwrap_or(Algorithm::Cs);
            if !a.grid.is_empty() {
                plan.grid = a.grid.iter().map(|g| parse_grid(g)).collect::<Result<Vec<GridAxis>>>()?;
            }
            (plan, a.run.out.clone(), true)
        }
        Command::Report { dir } => {
            let report = report_from_dir(dir)?;
            print_report(&report);
            let stored = dir.join("report.json");
            if stored.exists() && read_report(dir)? != report {
                eprintln!("recomputed report differs from {}", stored.display());
                return Ok(ExitCode::FAILURE);
            }
            return Ok(ExitCode::SUCCESS);
        }
    };
    let out = out.unwrap_or_else(|| default_out(plan.algorithm));
    let outcome = if is_sweep { sweep(&plan)? } else { run_plan(&plan)? };
    finish(&plan, outcome, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
