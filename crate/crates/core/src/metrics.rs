//! Pixel-wise intersection-over-union and round bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Per-class true-positive / false-positive / false-negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one prediction/truth mask pair.
    pub fn add(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::ShapeMismatch {
                expected: (truth.height(), truth.width(), 1),
                actual: (pred.height(), pred.width(), 1),
            });
        }
        let k = self.classes();
        pred.validate(k)?;
        truth.validate(k)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::LengthMismatch {
                expected: self.classes(),
                actual: other.classes(),
            });
        }
        for k in 0..self.classes() {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        Ok(())
    }
}

pub fn confusion(pred: &Mask, truth: &Mask, classes: usize) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(classes);
    counts.add(pred, truth)?;
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    /// `None` where the class never occurs in prediction or truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU; 0 if none is defined.
    pub mean: f64,
}

/// `TP / (TP + FP + FN)` per class. Classes with an empty denominator are
/// left out of the mean.
pub fn iou(counts: &ConfusionCounts) -> IouSummary {
    let per_class: Vec<Option<f64>> = (0..counts.classes())
        .map(|k| {
            let denom = counts.tp[k] + counts.fp[k] + counts.fn_[k];
            (denom > 0).then(|| counts.tp[k] as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IouSummary { per_class, mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Global model evaluated on the client's held-out split.
    Global,
    /// The client's own post-round model on its held-out split.
    Local,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Local => "local",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "local" => Ok(Scope::Local),
            other => Err(Error::InvalidArgument(format!("unknown scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based communication round.
    pub round: usize,
    pub client_id: usize,
    pub scope: Scope,
    pub loss: f64,
    pub iou_per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// Best mean IoU and the first (1-based) round reaching it.
pub fn rounds_to_peak(mean_ious: &[f64]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in mean_ious.iter().enumerate() {
        match best {
            Some((b, _)) if v <= b => {}
            _ => best = Some((v, i + 1)),
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no rounds to scan".into()))
}

/// [`rounds_to_peak`] over one client's reports of one scope, using the
/// reports' own round numbers.
pub fn client_peak(
    reports: &[RoundReport],
    client_id: usize,
    scope: Scope,
) -> Result<(f64, usize)> {
    let series: Vec<&RoundReport> = reports
        .iter()
        .filter(|r| r.client_id == client_id && r.scope == scope)
        .collect();
    let values: Vec<f64> = series.iter().map(|r| r.mean_iou).collect();
    let (peak, idx) = rounds_to_peak(&values)?;
    Ok((peak, series[idx - 1].round))
}
