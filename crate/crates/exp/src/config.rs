//! Experiment configuration files.
//!
//! Configurations are TOML. Every table rejects unknown keys, and every
//! validation failure names the offending field by its dotted path. A
//! minimal file needs `algorithm`, `rounds`, `[geometry]` and at least one
//! `[[clients]]` entry; everything else has a default.
//!
//! ```toml
//! algorithm = "feddwa"          # fedavg | scaffold | feddwa
//! rounds = 50
//!
//! [geometry]
//! height = 16
//! width = 16
//! features = 6
//! classes = 4
//!
//! [model]
//! hidden = [16]                 # hidden layer widths
//!
//! [daloss]
//! enabled = true                # default: on for feddwa, off otherwise
//! c = 0.1
//! kld_detached = true
//!
//! [training]
//! eta_local = 0.5
//! eta_global = 1.0
//! lr_decay = 0.5
//! lr_decay_period = 20          # 0 disables decay
//! local_epochs = 1
//! batch_size = 1
//!
//! [seeds]
//! data = 0                      # derives per-client data seeds
//! init = 1
//! shuffle = 2
//!
//! [flags]
//! literal_eq9 = false           # step the global model away from clients
//! strict_u_at_round_start = false
//! kld_reduction = "mean"        # mean | sum
//! kld_weighting = "divergence"  # divergence | unit
//!
//! [partition]                   # fills class_prior where a client omits it
//! dirichlet_alpha = 0.1
//! seed = 1000
//!
//! [output]
//! dir = "runs/feddwa"
//! checkpoint_period = 0         # rounds between global checkpoints, 0 = off
//!
//! [[clients]]
//! id = 0
//! name = "bus"
//! n_samples = 35
//! rotation = 0.0                # radians
//! translation = [0.0, 0.0]
//! noise_sigma = 0.3
//! # class_prior = [0.7, 0.1, 0.1, 0.1]
//! # seed = 17
//! ```

use std::path::{Path, PathBuf};

use feddwa_core::divergence::KldReduction;
use feddwa_core::fed::{Algorithm, GlobalStep, KldWeighting, LocalConfig, LrSchedule};
use feddwa_core::synth::{self, ClientProfile, Geometry, Pose};
use feddwa_core::DaLossConfig;
use feddwa_core::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};

pub const OUTPUT_DIR_ENV: &str = "FEDDWA_OUTPUT_DIR";

pub const DEFAULT_ETA_LOCAL: f64 = 0.5;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: Option<String>,
    rounds: Option<i64>,
    geometry: Option<RawGeometry>,
    model: Option<RawModel>,
    daloss: Option<RawDaLoss>,
    training: Option<RawTraining>,
    seeds: Option<RawSeeds>,
    flags: Option<RawFlags>,
    partition: Option<RawPartition>,
    output: Option<RawOutput>,
    clients: Option<Vec<RawClient>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    height: i64,
    width: i64,
    features: i64,
    classes: i64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Vec<i64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDaLoss {
    enabled: Option<bool>,
    c: Option<f64>,
    kld_detached: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    eta_local: Option<f64>,
    eta_global: Option<f64>,
    lr_decay: Option<f64>,
    lr_decay_period: Option<i64>,
    local_epochs: Option<i64>,
    batch_size: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeeds {
    data: Option<u64>,
    init: Option<u64>,
    shuffle: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlags {
    literal_eq9: Option<bool>,
    strict_u_at_round_start: Option<bool>,
    kld_reduction: Option<String>,
    kld_weighting: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    dirichlet_alpha: f64,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    checkpoint_period: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClient {
    id: Option<i64>,
    name: Option<String>,
    n_samples: i64,
    class_prior: Option<Vec<f64>>,
    rotation: Option<f64>,
    translation: Option<[f64; 2]>,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint_period: usize,
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    /// Display names by position in `sim.clients`.
    pub client_names: Vec<Option<String>>,
    pub data_seed: u64,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn algorithm(&self) -> Algorithm {
        self.sim.algorithm
    }

    /// Switches the algorithm, keeping every other setting.
    pub fn with_algorithm(&self, algorithm: Algorithm) -> Self {
        let mut out = self.clone();
        out.sim.algorithm = algorithm;
        out
    }

    pub fn with_daloss(&self, enabled: bool) -> Self {
        let mut out = self.clone();
        out.sim.local.loss.enabled = enabled;
        out
    }

    pub fn with_output_dir(&self, dir: impl Into<PathBuf>) -> Self {
        let mut out = self.clone();
        out.output.dir = dir.into();
        out
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output.dir = PathBuf::from(dir);
        }
        self
    }
}

fn positive(field: &str, v: i64) -> Result<usize> {
    if v < 1 {
        return Err(ExpError::config(
            field,
            format!("must be at least 1, got {v}"),
        ));
    }
    Ok(v as usize)
}

fn non_negative(field: &str, v: i64) -> Result<usize> {
    if v < 0 {
        return Err(ExpError::config(
            field,
            format!("must not be negative, got {v}"),
        ));
    }
    Ok(v as usize)
}

fn positive_real(field: &str, v: f64) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(ExpError::config(
            field,
            format!("must be a positive number, got {v}"),
        ));
    }
    Ok(v)
}

/// Seed for client `id` derived from the run's data seed.
pub fn derive_client_seed(data_seed: u64, id: usize) -> u64 {
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((id as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let value: toml::Value =
        toml::from_str(text).map_err(|e| ExpError::config("<document>", e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ExpError::config(
            if path == "." {
                "<document>".into()
            } else {
                path
            },
            e.into_inner().to_string(),
        )
    })?;
    validate(raw)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExpError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig> {
    let algorithm = match raw.algorithm.as_deref() {
        None => return Err(ExpError::config("algorithm", "missing")),
        Some("") => return Err(ExpError::config("algorithm", "must not be empty")),
        Some(s) => s
            .parse::<Algorithm>()
            .map_err(|e| ExpError::config("algorithm", e.to_string()))?,
    };
    let rounds = positive(
        "rounds",
        raw.rounds
            .ok_or_else(|| ExpError::config("rounds", "missing"))?,
    )?;

    let g = raw
        .geometry
        .ok_or_else(|| ExpError::config("geometry", "missing"))?;
    let geometry = Geometry {
        height: positive("geometry.height", g.height)?,
        width: positive("geometry.width", g.width)?,
        features: positive("geometry.features", g.features)?,
        classes: positive("geometry.classes", g.classes)?,
    };

    let model = raw.model.unwrap_or_default();
    let hidden = match model.hidden {
        None => vec![DEFAULT_HIDDEN],
        Some(h) => h
            .iter()
            .enumerate()
            .map(|(i, &v)| positive(&format!("model.hidden[{i}]"), v))
            .collect::<Result<Vec<_>>>()?,
    };

    let d = raw.daloss.unwrap_or_default();
    let defaults = DaLossConfig::default();
    let loss = DaLossConfig {
        c: d.c.unwrap_or(defaults.c),
        kld_detached: d.kld_detached.unwrap_or(defaults.kld_detached),
        enabled: d.enabled.unwrap_or(algorithm == Algorithm::FedDwa),
    };
    if !(loss.c >= 0.0) || !loss.c.is_finite() {
        return Err(ExpError::config(
            "daloss.c",
            format!("must be finite and non-negative, got {}", loss.c),
        ));
    }

    let t = raw.training.unwrap_or_default();
    let eta_local = positive_real(
        "training.eta_local",
        t.eta_local.unwrap_or(DEFAULT_ETA_LOCAL),
    )?;
    let eta_global = positive_real("training.eta_global", t.eta_global.unwrap_or(1.0))?;
    let decay = t.lr_decay.unwrap_or(0.5);
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(ExpError::config(
            "training.lr_decay",
            format!("must lie in (0, 1], got {decay}"),
        ));
    }
    let period = non_negative("training.lr_decay_period", t.lr_decay_period.unwrap_or(20))?;
    let epochs = positive("training.local_epochs", t.local_epochs.unwrap_or(1))?;
    let batch_size = positive("training.batch_size", t.batch_size.unwrap_or(1))?;

    let s = raw.seeds.unwrap_or_default();
    let data_seed = s.data.unwrap_or(0);

    let f = raw.flags.unwrap_or_default();
    let reduction = match f.kld_reduction.as_deref().unwrap_or("mean") {
        "mean" => KldReduction::Mean,
        "sum" => KldReduction::Sum,
        other => {
            return Err(ExpError::config(
                "flags.kld_reduction",
                format!("expected \"mean\" or \"sum\", got {other:?}"),
            ))
        }
    };
    let weighting = match f.kld_weighting.as_deref().unwrap_or("divergence") {
        "divergence" => KldWeighting::Divergence,
        "unit" => KldWeighting::Unit,
        other => {
            return Err(ExpError::config(
                "flags.kld_weighting",
                format!("expected \"divergence\" or \"unit\", got {other:?}"),
            ))
        }
    };

    let raw_clients = raw
        .clients
        .filter(|c| !c.is_empty())
        .ok_or_else(|| ExpError::config("clients", "at least one client is required"))?;
    let partition = match &raw.partition {
        Some(p) => {
            if !(p.dirichlet_alpha > 0.0) || !p.dirichlet_alpha.is_finite() {
                return Err(ExpError::config(
                    "partition.dirichlet_alpha",
                    format!("must be positive, got {}", p.dirichlet_alpha),
                ));
            }
            Some(
                synth::dirichlet_priors(
                    p.dirichlet_alpha,
                    geometry.classes,
                    raw_clients.len(),
                    p.seed.unwrap_or(data_seed),
                )
                .map_err(|e| ExpError::config("partition", e.to_string()))?,
            )
        }
        None => None,
    };

    let mut clients = Vec::with_capacity(raw_clients.len());
    let mut names = Vec::with_capacity(raw_clients.len());
    for (i, c) in raw_clients.into_iter().enumerate() {
        let at = |field: &str| format!("clients[{i}].{field}");
        let id = non_negative(&at("id"), c.id.unwrap_or(i as i64))?;
        if clients.iter().any(|p: &ClientProfile| p.client_id == id) {
            return Err(ExpError::config(
                at("id"),
                format!("duplicate client id {id}"),
            ));
        }
        let n_samples = c.n_samples;
        if n_samples < 5 {
            return Err(ExpError::config(
                at("n_samples"),
                format!("must be at least 5 so the held-out split is non-empty, got {n_samples}"),
            ));
        }
        let class_prior = match (c.class_prior, &partition) {
            (Some(p), _) => p,
            (None, Some(priors)) => priors[i].clone(),
            (None, None) => {
                return Err(ExpError::config(
                    at("class_prior"),
                    "missing and no [partition] table to draw it from",
                ))
            }
        };
        let profile = ClientProfile {
            client_id: id,
            n_samples: n_samples as usize,
            class_prior,
            pose: Pose {
                rotation: c.rotation.unwrap_or(0.0),
                translation: c.translation.unwrap_or([0.0, 0.0]),
            },
            noise_sigma: c.noise_sigma.unwrap_or(0.3),
            seed: c.seed.unwrap_or_else(|| derive_client_seed(data_seed, id)),
        };
        if !profile.pose.rotation.is_finite()
            || profile.pose.translation.iter().any(|t| !t.is_finite())
        {
            return Err(ExpError::config(at("rotation"), "pose must be finite"));
        }
        profile.validate(geometry.classes).map_err(|e| {
            let field = match e {
                feddwa_core::Error::LengthMismatch { .. } => at("class_prior"),
                _ if e.to_string().contains("noise_sigma") => at("noise_sigma"),
                _ => at("class_prior"),
            };
            ExpError::config(field, e.to_string())
        })?;
        clients.push(profile);
        names.push(c.name);
    }

    let o = raw.output.unwrap_or_default();
    let output = OutputConfig {
        dir: o
            .dir
            .unwrap_or_else(|| PathBuf::from("runs").join(algorithm.as_str())),
        checkpoint_period: non_negative(
            "output.checkpoint_period",
            o.checkpoint_period.unwrap_or(0),
        )?,
    };

    let sim = SimConfig {
        algorithm,
        local: LocalConfig {
            loss,
            weighting,
            reduction,
            epochs,
            batch_size,
            strict_u_at_round_start: f.strict_u_at_round_start.unwrap_or(false),
        },
        geometry,
        hidden,
        clients,
        eta_local,
        eta_global,
        schedule: LrSchedule { decay, period },
        global_step: if f.literal_eq9.unwrap_or(false) {
            GlobalStep::Literal
        } else {
            GlobalStep::Convergent
        },
        rounds,
        init_seed: s.init.unwrap_or(1),
        shuffle_seed: s.shuffle.unwrap_or(2),
    };
    sim.validate()
        .map_err(|e| ExpError::config("<config>", e.to_string()))?;
    Ok(ExperimentConfig {
        sim,
        client_names: names,
        data_seed,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "feddwa"
rounds = 3

[geometry]
height = 8
width = 8
features = 4
classes = 3

[[clients]]
n_samples = 10
class_prior = [0.5, 0.25, 0.25]
"#;

    fn field_of(err: ExpError) -> String {
        match err {
            ExpError::Config { field, .. } => field,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn minimal_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.sim.local.loss.c, 0.1);
        assert!(cfg.sim.local.loss.enabled);
        assert!(cfg.sim.local.loss.kld_detached);
        assert_eq!(cfg.sim.eta_global, 1.0);
        assert_eq!(
            cfg.sim.schedule,
            LrSchedule {
                decay: 0.5,
                period: 20
            }
        );
        assert_eq!(cfg.sim.hidden, vec![DEFAULT_HIDDEN]);
        assert_eq!(cfg.sim.global_step, GlobalStep::Convergent);
        assert_eq!(cfg.sim.clients[0].client_id, 0);
    }

    #[test]
    fn empty_algorithm_names_field() {
        let text = MINIMAL.replace("\"feddwa\"", "\"\"");
        assert_eq!(field_of(parse_config_str(&text).unwrap_err()), "algorithm");
    }

    #[test]
    fn negative_rounds_rejected() {
        let text = MINIMAL.replace("rounds = 3", "rounds = -1");
        assert_eq!(field_of(parse_config_str(&text).unwrap_err()), "rounds");
        let text = MINIMAL.replace("rounds = 3", "rounds = 0");
        assert_eq!(field_of(parse_config_str(&text).unwrap_err()), "rounds");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = format!("{MINIMAL}\n[training]\nlearning_rate = 0.1\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(field_of(err), "training.learning_rate");
    }

    #[test]
    fn bad_prior_names_client() {
        let text = MINIMAL.replace("[0.5, 0.25, 0.25]", "[0.5, 0.25]");
        assert_eq!(
            field_of(parse_config_str(&text).unwrap_err()),
            "clients[0].class_prior"
        );
    }

    #[test]
    fn type_errors_carry_path() {
        let text = MINIMAL.replace("height = 8", "height = \"tall\"");
        assert_eq!(
            field_of(parse_config_str(&text).unwrap_err()),
            "geometry.height"
        );
    }

    #[test]
    fn partition_fills_priors() {
        let text = r#"
algorithm = "fedavg"
rounds = 1
[geometry]
height = 4
width = 4
features = 2
classes = 4
[partition]
dirichlet_alpha = 0.1
seed = 5
[[clients]]
n_samples = 5
[[clients]]
n_samples = 6
"#;
        let cfg = parse_config_str(text).unwrap();
        assert!(!cfg.sim.local.loss.enabled);
        let priors = synth::dirichlet_priors(0.1, 4, 2, 5).unwrap();
        assert_eq!(cfg.sim.clients[1].class_prior, priors[1]);
        assert_ne!(cfg.sim.clients[0].seed, cfg.sim.clients[1].seed);
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = parse_config(Path::new("/nonexistent/feddwa.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
