use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmelab_cli::config::{ExperimentConfig, Mode};
use pmelab_cli::manifest::RunManifest;
use pmelab_cli::run::run;
use pmelab_cli::selftest::{builtin, selftest};

#[derive(Parser)]
#[command(name = "pmelab", version, about = "Forward, transform, sweep, recovery and partial-data experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PMELAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Regularized forward solve over the k-schedule.
    Forward(RunArgs),
    /// Forward solve plus the time-integral transform checks.
    Transform(RunArgs),
    /// Large-amplitude sweep and the two-term expansion fit.
    Sweep(RunArgs),
    /// Linearized recovery of eps and lambda.
    Recover(RunArgs),
    /// Recovery for q = 1 from two final times.
    RecoverQ1(RunArgs),
    /// Partial-data geometry, CGO solutions and the vanishing-slab detector.
    Partial(RunArgs),
    /// Runs every built-in configuration.
    Selftest {
        #[arg(long, default_value = "selftest-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; the built-in one for the mode when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn report(label: &str, m: &RunManifest) {
    for c in &m.checks {
        println!("{label:>10} {:<28} {} {}", c.name, if c.passed { "ok  " } else { "FAIL" }, c.detail);
    }
}

fn run_mode(mode: Mode, args: RunArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => builtin(mode),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(format!("{mode}-out")));
    let m = run(&cfg, mode, &out)?;
    report(&mode.to_string(), &m);
    println!("artifacts in {}", out.display());
    Ok(m.all_pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Forward(a) => run_mode(Mode::Forward, a),
        Command::Transform(a) => run_mode(Mode::Transform, a),
        Command::Sweep(a) => run_mode(Mode::Sweep, a),
        Command::Recover(a) => run_mode(Mode::Recover, a),
        Command::RecoverQ1(a) => run_mode(Mode::RecoverQ1, a),
        Command::Partial(a) => run_mode(Mode::Partial, a),
        Command::Selftest { out, seed } => selftest(&out, seed)
            .map(|r| {
                for (label, m) in &r.runs {
                    report(label, m);
                }
                r.all_pass()
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
