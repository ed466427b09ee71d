//! `dmfg` command line: exact solving and verification of finite instances,
//! plus training / execution / estimator-probe workflows.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! non-convergence (or a failed verification), 3 internal error. All file
//! outputs land under `--out` (default `$DMFG_OUT`, falling back to `./out`).

use clap::{Args, Parser, Subcommand};
use dmfg::harness::{self, config as runconfig, RunConfig};
use dmfg::tabular::{self, instances};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dmfg",
    about = "Decentralized mean field games: solve, verify, train, execute, probe",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory (default: $DMFG_OUT or ./out)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os("DMFG_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"))
        })
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (see `dmfg info --dump-defaults`)
    config: PathBuf,
    /// Override config keys, e.g. --set train.episodes=50 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace the config's seed list with a single master seed
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an instance file to its fixed point and verify the equilibrium
    Solve {
        /// Instance file (plain text, `dmfg-instance v1`)
        instance: PathBuf,
        /// Joint convergence tolerance
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Solve, verify, and report contraction + Lipschitz diagnostics
    Verify {
        instance: PathBuf,
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        /// Mean-field sample pairs for the Lipschitz estimates
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Self-play training over the config's seeds
    Train(ConfigArgs),
    /// Frozen-policy tournament over trained checkpoints
    Execute {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory (repeat once per team, or several for the
        /// single-pool environments)
        #[arg(long = "ckpt", required = true)]
        ckpt: Vec<PathBuf>,
    },
    /// Estimator-learning probe: emits the per-episode MSE series
    Probe(ConfigArgs),
    /// Inspect defaults and bundled content
    Info {
        /// Print the full default config for an environment
        #[arg(long, value_name = "ENV")]
        dump_defaults: Option<String>,
        /// List bundled instance names
        #[arg(long)]
        list_instances: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(AppError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            EXIT_INTERNAL
        }
    };
    ExitCode::from(code)
}

enum AppError {
    Usage(String),
    Internal(String),
}

fn run(cli: Cli) -> Result<u8, AppError> {
    match cli.command {
        Command::Solve {
            instance,
            tol,
            max_iters,
            out,
        } => solve(&instance, tol, max_iters, &out.resolve(), false, 0, 0),
        Command::Verify {
            instance,
            tol,
            max_iters,
            samples,
            seed,
            out,
        } => solve(&instance, tol, max_iters, &out.resolve(), true, samples, seed),
        Command::Train(args) => {
            let (config, out) = load_config(&args)?;
            let artifact = harness::train_selfplay(&config, &out)
                .map_err(|e| AppError::Internal(e.to_string()))?;
            for seed in &artifact.seeds {
                let last = seed.return_series.last().copied().unwrap_or(0.0);
                eprintln!(
                    "seed {}: {} episodes, final mean return {last:.3}, metrics at {}",
                    seed.seed,
                    seed.return_series.len(),
                    seed.metrics_path.display()
                );
            }
            Ok(EXIT_OK)
        }
        Command::Execute { config, ckpt } => {
            let (run_config, out) = load_config(&config)?;
            let result = harness::tournament(&run_config, &ckpt, &out).map_err(|e| match e {
                harness::HarnessError::Config(v) => AppError::Usage(v.join("\n")),
                harness::HarnessError::CheckpointMismatch(m) => AppError::Usage(m),
                other => AppError::Internal(other.to_string()),
            })?;
            for s in &result.summary {
                eprintln!(
                    "{}: {} games, {} wins / {} draws / {} losses, mean return {:.3}",
                    s.algorithm, s.games, s.wins, s.draws, s.losses, s.mean_return
                );
            }
            Ok(EXIT_OK)
        }
        Command::Probe(args) => {
            let (config, out) = load_config(&args)?;
            let series = harness::run_estimator_probe(&config, &out).map_err(|e| match e {
                harness::HarnessError::Config(v) => AppError::Usage(v.join("\n")),
                other => AppError::Internal(other.to_string()),
            })?;
            let head = series.first().copied().unwrap_or(0.0);
            let tail = series.last().copied().unwrap_or(0.0);
            eprintln!(
                "probe: {} episodes, first MSE {head:.4}, last MSE {tail:.4}",
                series.len()
            );
            Ok(EXIT_OK)
        }
        Command::Info {
            dump_defaults,
            list_instances,
        } => {
            if let Some(env_name) = dump_defaults {
                let env = dmfg::envs::EnvName::parse(&env_name).ok_or_else(|| {
                    AppError::Usage(format!(
                        "unknown environment `{env_name}` (battle, gather, tiger_deer, combined_arms)"
                    ))
                })?;
                print!("{}", runconfig::dump_defaults(env));
            }
            if list_instances {
                for (name, params) in instances::bundled() {
                    println!(
                        "{name}: {} states, {} actions, discount {}",
                        params.state_count, params.action_count, params.discount
                    );
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<(RunConfig, PathBuf), AppError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| AppError::Usage(format!("{}: {e}", args.config.display())))?;
    let mut overrides = Vec::new();
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("--set needs KEY=VALUE, got `{pair}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("train.seeds".into(), seed.to_string()));
    }
    let config = runconfig::parse_config(&text, &overrides)
        .map_err(|violations| AppError::Usage(violations.join("\n")))?;
    Ok((config, args.out.resolve()))
}

#[allow(clippy::too_many_arguments)]
fn solve(
    instance_path: &Path,
    tol: f64,
    max_iters: usize,
    out: &Path,
    diagnostics: bool,
    samples: usize,
    seed: u64,
) -> Result<u8, AppError> {
    let text = std::fs::read_to_string(instance_path)
        .map_err(|e| AppError::Usage(format!("{}: {e}", instance_path.display())))?;
    let params = instances::parse_instance(&text)
        .map_err(|e| AppError::Usage(format!("{}: {e}", instance_path.display())))?;
    let inst = params.build();
    let result = tabular::solve_fixed_point(&inst, tol, max_iters)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Internal(format!("{}: {e}", out.display())))?;
    let mut report = result.report();
    let mut ok = result.converged;
    if result.converged {
        let dmfe = tabular::verify_dmfe(&inst, &result.policy_star, &result.mu_star, 1e-8)
            .map_err(|e| AppError::Internal(e.to_string()))?;
        report.push_str(&dmfe.report());
        ok = ok && dmfe.passes();
    }
    if diagnostics {
        let diag = tabular::estimate_lipschitz(&inst, samples.max(2), seed)
            .map_err(|e| AppError::Internal(e.to_string()))?
            .with_contraction(&result.residual_history);
        report.push_str(&diag.report());
        ok = ok && diag.residuals_non_increasing && diag.geometric_mean_ratio < 1.0;
    }
    let report_path = out.join("solve_report.txt");
    std::fs::write(&report_path, &report)
        .map_err(|e| AppError::Internal(format!("{}: {e}", report_path.display())))?;
    eprint!("{report}");
    eprintln!("report written to {}", report_path.display());
    Ok(if ok { EXIT_OK } else { EXIT_NOT_CONVERGED })
}
