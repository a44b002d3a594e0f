//! Regression snapshot of a short SCAFFOLD-baseline trajectory.
//!
//! Regenerate with `FEDDWA_BLESS=1 cargo test -p feddwa-core --test golden`
//! and review the diff before committing.

use std::path::PathBuf;

use feddwa_core::fed::{Algorithm, Federation, GlobalStep, LocalConfig, LrSchedule, SimConfig};
use feddwa_core::losses::DaLossConfig;
use feddwa_core::synth::{ClientProfile, Geometry, Pose};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Snapshot {
    rounds: Vec<RoundSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct RoundSnapshot {
    global: Vec<f64>,
    c_global: Vec<f64>,
}

fn config() -> SimConfig<f64> {
    SimConfig {
        algorithm: Algorithm::Scaffold,
        local: LocalConfig {
            loss: DaLossConfig::disabled(),
            ..LocalConfig::default()
        },
        geometry: Geometry {
            height: 5,
            width: 5,
            features: 3,
            classes: 3,
        },
        hidden: vec![4],
        clients: (0..2)
            .map(|i| ClientProfile {
                client_id: i,
                n_samples: 6,
                class_prior: if i == 0 {
                    vec![0.5, 0.5, 0.0]
                } else {
                    vec![0.2, 0.1, 0.7]
                },
                pose: Pose {
                    rotation: 0.5 * i as f64,
                    translation: [0.0, 0.1],
                },
                noise_sigma: 0.15,
                seed: 7 + i as u64,
            })
            .collect(),
        eta_local: 0.2,
        eta_global: 1.0,
        schedule: LrSchedule::default(),
        global_step: GlobalStep::Convergent,
        rounds: 3,
        init_seed: 42,
        shuffle_seed: 43,
    }
}

#[test]
fn scaffold_three_round_trajectory() {
    let mut fed = Federation::new(&config()).unwrap();
    let rounds: Vec<RoundSnapshot> = (0..3)
        .map(|_| {
            fed.round().unwrap();
            RoundSnapshot {
                global: fed.server.model.params().as_slice().to_vec(),
                c_global: fed.server.c_global.as_slice().to_vec(),
            }
        })
        .collect();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/scaffold_3round.json");
    if std::env::var_os("FEDDWA_BLESS").is_some() {
        let json = serde_json::to_string_pretty(&Snapshot { rounds }).unwrap();
        std::fs::write(&path, json).unwrap();
        return;
    }
    let golden: Snapshot = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(golden.rounds.len(), rounds.len());
    for (r, (want, got)) in golden.rounds.iter().zip(&rounds).enumerate() {
        for (a, b) in want
            .global
            .iter()
            .zip(&got.global)
            .chain(want.c_global.iter().zip(&got.c_global))
        {
            assert!(
                (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                "round {}: {a} vs {b}",
                r + 1
            );
        }
    }
}
