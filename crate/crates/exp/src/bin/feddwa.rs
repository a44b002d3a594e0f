use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feddwa_core::fed::Algorithm;
use feddwa_exp::config::{self, ExperimentConfig};
use feddwa_exp::runner::{self, Variant};
use feddwa_exp::{output, ExpError, Result};

/// Federated segmentation simulator with divergence-weighted aggregation.
#[derive(Parser)]
#[command(version = env!("FEDDWA_GIT_DESCRIBE"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config and FEDDWA_OUTPUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several algorithms on the same setup.
    Compare {
        config: PathBuf,
        /// Comma-separated algorithms, e.g. fedavg,scaffold,feddwa.
        #[arg(long, value_delimiter = ',', conflicts_with = "preset")]
        algos: Vec<String>,
        /// Named variant set; `table3` runs scaffold and feddwa with and
        /// without DALoss.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-client global IoU series from a run's metrics.csv.
    Plotdata {
        /// Run directory or metrics.csv path.
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let cfg = config::parse_config(path)?.apply_env();
    Ok(match out {
        Some(dir) => cfg.with_output_dir(dir),
        None => cfg,
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let cfg = load(&config, out)?;
            let outcome = runner::run(&cfg)?;
            println!(
                "{}: final mean global IoU {:.4} -> {}",
                outcome.summary.algorithm,
                outcome.summary.final_mean_global_iou,
                outcome.dir.display()
            );
        }
        Command::Compare {
            config,
            algos,
            preset,
            out,
        } => {
            let cfg = load(&config, out)?;
            let variants = match preset.as_deref() {
                Some("table3") => runner::table3_variants(),
                Some(other) => {
                    return Err(ExpError::config(
                        "--preset",
                        format!("unknown preset {other:?}"),
                    ))
                }
                None if algos.is_empty() => {
                    return Err(ExpError::config("--algos", "give --algos or --preset"))
                }
                None => algos
                    .iter()
                    .map(|a| {
                        a.parse::<Algorithm>()
                            .map(Variant::plain)
                            .map_err(|e| ExpError::config("--algos", e.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let rows = runner::compare(&cfg, &variants, &cfg.output.dir)?;
            for r in rows {
                println!("{:<30} {:.4}", r.label, r.final_mean_global_iou);
            }
        }
        Command::Plotdata { run, out } => {
            let metrics = if run.is_dir() {
                run.join(output::METRICS_FILE)
            } else {
                run.clone()
            };
            let out = out.unwrap_or_else(|| {
                metrics
                    .parent()
                    .map(|p| p.join("plot"))
                    .unwrap_or_else(|| PathBuf::from("plot"))
            });
            for path in output::write_plot_series(&metrics, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Validate { config } => {
            let cfg = config::parse_config(&config)?;
            println!(
                "ok: {} with {} clients, {} rounds, {} parameters",
                cfg.sim.algorithm,
                cfg.sim.clients.len(),
                cfg.sim.rounds,
                feddwa_core::nn::param_count(&cfg.sim.layer_sizes())
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
