use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedpg::harness::{
    emit_plot_data, expand_sweep, random_params, run_experiment, suggest_schedule, ExperimentSpec,
    MetricsRecord, ScheduleMode, SweepAxes, TheoryConstants,
};
use fedpg::io::{env_to_json, load_env_file, save_env, LoadedEnv};
use fedpg::oracle::verify_average_mdp_identity;
use fedpg::{Algorithm, EnvGenerator, Error, GradientSource};

/// Federated policy-gradient laboratory on tabular MDPs.
#[derive(Debug, Parser)]
#[command(name = "fedpg", version, about)]
struct Cli {
    /// Suppress warnings and progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random federated environment file.
    GenEnv(GenEnvArgs),
    /// Validate an environment file.
    Validate { env: PathBuf },
    /// Check that the average MDP reproduces the agent-averaged value, Q and gradient.
    CheckProp1(CheckArgs),
    /// Run the spec's template configuration (sweep axes ignored).
    Run(RunArgs),
    /// Run every point of the spec's sweep.
    Sweep(RunArgs),
    /// Turn a metrics file into plot-data CSV.
    Analyze(AnalyzeArgs),
    /// Suggest a local step size and truncation horizon.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
struct GenEnvArgs {
    #[arg(long)]
    states: usize,
    #[arg(long)]
    actions: usize,
    #[arg(long)]
    agents: usize,
    #[arg(long, default_value_t = 0.5)]
    heterogeneity: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    env: PathBuf,
    /// Seed for the random policy parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Number of random parameters to check.
    #[arg(long, default_value_t = 5)]
    samples: u64,
    /// Logits are drawn uniformly from [-scale, scale].
    #[arg(long, default_value_t = 3.0)]
    scale: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    spec: PathBuf,
    /// Seed override; replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics file; defaults to the spec's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gradient source override: exact or sampled.
    #[arg(long)]
    mode: Option<GradientSource>,
    /// Algorithm override: fast-fedpg, fedavg-pg or centralized.
    #[arg(long)]
    algo: Option<Algorithm>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    metrics: PathBuf,
    /// convergence, speedup or stationarity.
    #[arg(long, default_value = "convergence")]
    kind: String,
    /// Output file; defaults to `<metrics stem>.<kind>.csv` beside the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Number of agents N.
    n: usize,
    /// Local steps per round H.
    h: usize,
    /// Rounds T.
    t: usize,
    /// Discount factor.
    gamma: f64,
    /// fast-rate or stationary.
    mode: ScheduleMode,
    /// Gradient-domination constant, required by fast-rate.
    #[arg(long)]
    mu: Option<f64>,
    /// Smoothness estimate used to check the step-size conditions.
    #[arg(long)]
    smoothness: Option<f64>,
}

/// Exit status classes.
#[derive(Debug)]
enum Failure {
    /// Invalid input data; exit code 1.
    Validation(String),
    /// Bad configuration or I/O; exit code 2.
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Schema { .. } | Error::InvalidEnv(_) | Error::ShapeMismatch { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenEnv(args) => gen_env(args),
        Command::Validate { env } => validate(&env),
        Command::CheckProp1(args) => check_prop1(args),
        Command::Run(args) => run(args, false, cli.quiet),
        Command::Sweep(args) => run(args, true, cli.quiet),
        Command::Analyze(args) => analyze(args),
        Command::Schedule(args) => schedule(args, cli.quiet),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn gen_env(args: GenEnvArgs) -> CliResult {
    let env = EnvGenerator::new(
        args.seed,
        args.states,
        args.actions,
        args.agents,
        args.heterogeneity,
    )
    .with_gamma(args.gamma)
    .generate()?;
    match args.out {
        Some(path) => save_env(&env, &path)?,
        None => println!("{}", env_to_json(&env)),
    }
    Ok(())
}

fn validate(path: &Path) -> CliResult {
    let loaded = load_env_file(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e.to_string()),
        other => Failure::Validation(other.to_string()),
    })?;
    match loaded {
        LoadedEnv::Shared(env) => println!(
            "valid: {} states, {} actions, {} agents, shared kernel, gamma {}",
            env.n_states(),
            env.n_actions(),
            env.n_agents(),
            env.discount()
        ),
        LoadedEnv::PerAgent(mdps) => println!(
            "valid: {} states, {} actions, {} agents, per-agent kernels, gamma {}",
            mdps[0].n_states(),
            mdps[0].n_actions(),
            mdps.len(),
            mdps[0].discount()
        ),
    }
    Ok(())
}

fn check_prop1(args: CheckArgs) -> CliResult {
    let env = match load_env_file(&args.env)? {
        LoadedEnv::Shared(env) => env,
        LoadedEnv::PerAgent(_) => {
            return Err(Failure::Config(
                "per-agent kernels have no average MDP to check".into(),
            ))
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..args.samples {
        let theta = random_params(env.n_states(), env.n_actions(), args.scale, args.seed, i);
        let report = verify_average_mdp_identity(&env, &theta, args.tol)?;
        println!(
            "theta {i}: value_gap {:e} q_gap {:e} grad_gap {:e}",
            report.value_gap, report.q_gap, report.grad_gap
        );
        worst = worst.max(report.max_gap());
    }
    if worst <= args.tol {
        println!("PASS: max gap {worst:e} <= {:e}", args.tol);
        Ok(())
    } else {
        println!("FAIL: max gap {worst:e} > {:e}", args.tol);
        Err(Failure::Validation(format!(
            "average-MDP identity violated by {worst:e}"
        )))
    }
}

fn run(args: RunArgs, sweep: bool, quiet: bool) -> CliResult {
    let mut spec = ExperimentSpec::load(&args.spec)?;
    if !sweep && spec.sweep != SweepAxes::default() {
        if !quiet {
            eprintln!("note: `run` ignores sweep axes; use `sweep` to expand them");
        }
        spec.sweep = SweepAxes::default();
    }
    if let Some(seed) = args.seed {
        spec.config.master_seed = seed;
        spec.sweep.seeds.clear();
    }
    if let Some(mode) = args.mode {
        spec.config.gradient_source = mode;
    }
    if let Some(algo) = args.algo {
        spec.config.algorithm = algo;
    }
    let out = args.out.or_else(|| spec.output.clone()).ok_or_else(|| {
        Failure::Config("no output path: pass --out or set `output` in the spec".into())
    })?;
    if !quiet {
        for point in expand_sweep(&spec)? {
            for w in &point.warnings {
                eprintln!("warning (point {}): {w}", point.index);
            }
        }
    }
    let record = run_experiment(&spec)?;
    record.save(&out)?;
    if !quiet {
        eprintln!(
            "wrote {} rows ({} runs) to {}",
            record.rows.len(),
            record.runs().len(),
            out.display()
        );
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> CliResult {
    let record = MetricsRecord::load(&args.metrics)?;
    let out = args.out.unwrap_or_else(|| {
        let stem = args
            .metrics
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metrics".into());
        args.metrics
            .with_file_name(format!("{stem}.{}.csv", args.kind))
    });
    for path in emit_plot_data(&record, &args.kind, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn schedule(args: ScheduleArgs, quiet: bool) -> CliResult {
    let constants = TheoryConstants {
        smoothness: args.smoothness,
        mu: args.mu,
        ..Default::default()
    };
    let s = suggest_schedule(args.n, args.h, args.t, args.gamma, args.mode, &constants)?;
    if !quiet {
        for w in &s.warnings {
            eprintln!("warning: {w}");
        }
    }
    let text = serde_json::to_string_pretty(&s)
        .map_err(|e| Failure::Config(format!("cannot serialize schedule: {e}")))?;
    println!("{text}");
    Ok(())
}
