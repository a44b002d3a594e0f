//! Run artifacts: per-round metrics, summaries, checkpoints and plot series.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use feddwa_core::metrics::{self, RoundReport, Scope};
use feddwa_core::ParamVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const CKPT_MAGIC: &[u8; 8] = b"FDWACKPT";
const CKPT_VERSION: u32 = 1;

pub fn git_describe() -> &'static str {
    env!("FEDDWA_GIT_DESCRIBE")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ExpError::io(path, e))
}

/// Streams [`RoundReport`]s to `metrics.csv`, flushing after every round so
/// an interrupted run keeps what it finished.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
    classes: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, classes: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| ExpError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        let mut header: Vec<String> = ["round", "client_id", "scope", "loss", "mean_iou"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..classes).map(|k| format!("iou_class_{k}")));
        inner.write_record(&header)?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
            classes,
        })
    }

    pub fn write_round(&mut self, reports: &[RoundReport]) -> Result<()> {
        for r in reports {
            if r.iou_per_class.len() != self.classes {
                return Err(ExpError::Input {
                    path: self.path.clone(),
                    message: format!(
                        "report has {} classes, file has {}",
                        r.iou_per_class.len(),
                        self.classes
                    ),
                });
            }
            let mut row = vec![
                r.round.to_string(),
                r.client_id.to_string(),
                r.scope.as_str().to_string(),
                r.loss.to_string(),
                r.mean_iou.to_string(),
            ];
            // absent classes stay empty
            row.extend(
                r.iou_per_class
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            self.inner.write_record(&row)?;
        }
        self.inner.flush().map_err(|e| ExpError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundReport>> {
    let bad = |message: String| ExpError::Input {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| ExpError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let fixed = ["round", "client_id", "scope", "loss", "mean_iou"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(bad(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let classes = header.len() - fixed.len();
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let at = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            at(i)
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: bad {} {:?}", line + 2, &header[i], at(i))))
        };
        let int = |i: usize| -> Result<usize> {
            at(i)
                .parse::<usize>()
                .map_err(|_| bad(format!("row {}: bad {} {:?}", line + 2, &header[i], at(i))))
        };
        let scope: Scope = at(2)
            .parse()
            .map_err(|_| bad(format!("row {}: bad scope {:?}", line + 2, at(2))))?;
        let iou_per_class = (0..classes)
            .map(|k| {
                let i = fixed.len() + k;
                if at(i).is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(RoundReport {
            round: int(0)?,
            client_id: int(1)?,
            scope,
            loss: num(3)?,
            mean_iou: num(4)?,
            iou_per_class,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub name: Option<String>,
    pub peak_global_iou: f64,
    pub peak_global_round: usize,
    pub peak_local_iou: f64,
    pub peak_local_round: usize,
    pub final_global_iou: f64,
    pub final_local_iou: f64,
    pub final_global_loss: f64,
    pub final_local_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub daloss: bool,
    pub rounds: usize,
    /// Mean over clients of the final-round global-model mean IoU.
    pub final_mean_global_iou: f64,
    pub clients: Vec<ClientSummary>,
    pub git_describe: String,
    pub config: ExperimentConfig,
}

pub fn summarize(cfg: &ExperimentConfig, reports: &[RoundReport]) -> Result<RunSummary> {
    let last_round = reports.iter().map(|r| r.round).max().unwrap_or(0);
    let final_of = |id: usize, scope: Scope| {
        reports
            .iter()
            .find(|r| r.round == last_round && r.client_id == id && r.scope == scope)
    };
    let mut ordered: Vec<_> = cfg.sim.clients.iter().zip(&cfg.client_names).collect();
    ordered.sort_by_key(|(p, _)| p.client_id);
    let mut clients = Vec::with_capacity(ordered.len());
    for (profile, name) in ordered {
        let id = profile.client_id;
        let (peak_global_iou, peak_global_round) =
            metrics::client_peak(reports, id, Scope::Global)?;
        let (peak_local_iou, peak_local_round) = metrics::client_peak(reports, id, Scope::Local)?;
        let (g, l) = match (final_of(id, Scope::Global), final_of(id, Scope::Local)) {
            (Some(g), Some(l)) => (g, l),
            _ => {
                return Err(ExpError::Input {
                    path: PathBuf::from(METRICS_FILE),
                    message: format!("no final-round reports for client {id}"),
                })
            }
        };
        clients.push(ClientSummary {
            client_id: id,
            name: name.clone(),
            peak_global_iou,
            peak_global_round,
            peak_local_iou,
            peak_local_round,
            final_global_iou: g.mean_iou,
            final_local_iou: l.mean_iou,
            final_global_loss: g.loss,
            final_local_loss: l.loss,
        });
    }
    let final_mean_global_iou =
        clients.iter().map(|c| c.final_global_iou).sum::<f64>() / clients.len().max(1) as f64;
    Ok(RunSummary {
        algorithm: cfg.sim.algorithm.as_str().to_string(),
        daloss: cfg.sim.effective_local().loss.enabled,
        rounds: last_round,
        final_mean_global_iou,
        clients,
        git_describe: git_describe().to_string(),
        config: cfg.clone(),
    })
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("global_round_{round:04}.bin"))
}

/// Flat parameter dump: magic, `u32` version, `u64` length, then `f64`
/// values, all little-endian.
pub fn write_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let io = |e| ExpError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u64).to_le_bytes())
        .map_err(io)?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    let bad = |message: &str| ExpError::Input {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ExpError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != n.checked_mul(8).ok_or_else(|| bad("length overflow"))? {
        return Err(bad("truncated or oversized checkpoint"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParamVector::from_vec(values))
}

/// Writes one `round mean_iou` file per client from the global-scope rows
/// of a metrics file. Returns the files written.
pub fn write_plot_series(metrics_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = read_metrics(metrics_path)?;
    create_dir(out_dir)?;
    let mut ids: Vec<usize> = reports.iter().map(|r| r.client_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut written = Vec::new();
    for id in ids {
        let path = out_dir.join(format!("client_{id}_global_iou.dat"));
        let mut text = String::from("# round mean_iou\n");
        for r in reports
            .iter()
            .filter(|r| r.client_id == id && r.scope == Scope::Global)
        {
            text.push_str(&format!("{} {}\n", r.round, r.mean_iou));
        }
        fs::write(&path, text).map_err(|e| ExpError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: usize, iou: Vec<Option<f64>>) -> RoundReport {
        RoundReport {
            round,
            client_id: 3,
            scope: Scope::Global,
            loss: 0.25,
            mean_iou: 0.5,
            iou_per_class: iou,
        }
    }

    #[test]
    fn absent_class_is_empty_field_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let rows = vec![
            report(1, vec![Some(0.5), None]),
            report(2, vec![Some(1.0), Some(0.0)]),
        ];
        let mut w = MetricsWriter::create(&path, 2).unwrap();
        w.write_round(&rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "1,3,global,0.25,0.5,0.5,");
        assert_eq!(read_metrics(&path).unwrap(), rows);
        assert!(w.write_round(&[report(3, vec![None])]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 7);
        let p = ParamVector::from_vec(vec![1.5, -0.0, f64::MIN_POSITIVE]);
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(ExpError::Input { .. })
        ));
        fs::write(&path, b"FDWADSET\x01\0\0\0").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
