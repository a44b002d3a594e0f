//! Single runs and multi-run comparisons.

use std::path::{Path, PathBuf};
use std::time::Instant;

use feddwa_core::fed::{self, Algorithm};
use feddwa_core::metrics::RoundReport;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{self, MetricsWriter, RunSummary};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    rounds: usize,
}

/// Runs one experiment and writes its artifacts into `cfg.output.dir`.
///
/// `metrics.csv` and `summary.json` depend only on the configuration; wall
/// time goes to `timing.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = cfg.output.dir.clone();
    output::create_dir(&dir)?;
    let started = Instant::now();
    let mut writer =
        MetricsWriter::create(&dir.join(output::METRICS_FILE), cfg.sim.geometry.classes)?;
    let period = cfg.output.checkpoint_period;
    let reports = fed::run_experiment_with(&cfg.sim, |federation, reports| {
        writer.write_round(reports).map_err(to_core)?;
        let round = federation.server.round;
        if period > 0 && round % period == 0 {
            output::write_checkpoint(
                &output::checkpoint_path(&dir, round),
                federation.server.model.params(),
            )
            .map_err(to_core)?;
        }
        if let Some(r) = reports.first() {
            info!(
                "{} round {round}: client {} global mIoU {:.4}",
                cfg.sim.algorithm, r.client_id, r.mean_iou
            );
        }
        Ok(())
    })?;
    let summary = output::summarize(cfg, &reports)?;
    output::write_json(&dir.join(output::SUMMARY_FILE), &summary)?;
    output::write_json(
        &dir.join(output::TIMING_FILE),
        &Timing {
            wall_seconds: started.elapsed().as_secs_f64(),
            rounds: cfg.sim.rounds,
        },
    )?;
    Ok(RunOutcome {
        dir,
        reports,
        summary,
    })
}

// Artifact failures inside the round loop travel through the simulator's
// error type and surface as a failed run.
fn to_core(e: crate::error::ExpError) -> feddwa_core::Error {
    feddwa_core::Error::Io(e.to_string())
}

/// One member of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub algorithm: Algorithm,
    pub daloss: bool,
}

impl Variant {
    pub fn new(label: impl Into<String>, algorithm: Algorithm, daloss: bool) -> Self {
        Self {
            label: label.into(),
            algorithm,
            daloss,
        }
    }

    /// Plain variant: DALoss only where the algorithm uses it by default.
    pub fn plain(algorithm: Algorithm) -> Self {
        Self::new(
            algorithm.as_str(),
            algorithm,
            algorithm == Algorithm::FedDwa,
        )
    }

    pub fn dir_name(&self) -> String {
        let mut name = self.algorithm.as_str().to_string();
        if self.daloss != (self.algorithm == Algorithm::FedDwa) {
            name.push_str(if self.daloss { "_daloss" } else { "_nodaloss" });
        }
        name
    }
}

/// The ablation grid: both aggregation rules with and without DALoss.
pub fn table3_variants() -> Vec<Variant> {
    vec![
        Variant::new("scaffold (FedBEVT stand-in)", Algorithm::Scaffold, false),
        Variant::new("scaffold + DALoss", Algorithm::Scaffold, true),
        Variant::new("feddwa", Algorithm::FedDwa, false),
        Variant::new("feddwa + DALoss", Algorithm::FedDwa, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub algorithm: String,
    pub daloss: bool,
    pub dir: String,
    pub final_mean_global_iou: f64,
    /// Per-client peak global IoU and the round it was first reached.
    pub peaks: Vec<(usize, f64, usize)>,
}

pub const COMPARISON_FILE: &str = "comparison.json";

/// Runs every variant under `base` into `out_dir/<variant>` and writes
/// `comparison.json`.
pub fn compare(
    base: &ExperimentConfig,
    variants: &[Variant],
    out_dir: &Path,
) -> Result<Vec<ComparisonRow>> {
    output::create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let name = v.dir_name();
        let cfg = base
            .with_algorithm(v.algorithm)
            .with_daloss(v.daloss)
            .with_output_dir(out_dir.join(&name));
        info!("running {}", v.label);
        let outcome = run(&cfg)?;
        rows.push(ComparisonRow {
            label: v.label.clone(),
            algorithm: v.algorithm.as_str().to_string(),
            daloss: v.daloss,
            dir: name,
            final_mean_global_iou: outcome.summary.final_mean_global_iou,
            peaks: outcome
                .summary
                .clients
                .iter()
                .map(|c| (c.client_id, c.peak_global_iou, c.peak_global_round))
                .collect(),
        });
    }
    output::write_json(&out_dir.join(COMPARISON_FILE), &rows)?;
    Ok(rows)
}
