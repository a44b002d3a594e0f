use feddwa_core::divergence::KldReduction;
use feddwa_core::fed::{
    self, Algorithm, ClientState, ClientUpload, Federation, GlobalStep, KldWeighting, LocalConfig,
    LrSchedule, ServerState, SimConfig,
};
use feddwa_core::losses::DaLossConfig;
use feddwa_core::nn::{LossSpec, Mlp};
use feddwa_core::params::Params;
use feddwa_core::synth::{self, ClientProfile, Geometry, Pose, Sample};

fn geometry(classes: usize) -> Geometry {
    Geometry {
        height: 6,
        width: 6,
        features: 4,
        classes,
    }
}

fn samples(classes: usize, n: usize, seed: u64) -> Vec<Sample<f64>> {
    let p = ClientProfile {
        client_id: 0,
        n_samples: n,
        class_prior: vec![1.0 / classes as f64; classes],
        pose: Pose::default(),
        noise_sigma: 0.2,
        seed,
    };
    (0..n)
        .map(|i| synth::generate_sample(&p, &geometry(classes), i))
        .collect()
}

fn client(id: usize, data: Vec<Sample<f64>>, model: &Mlp<f64>, eta: f64) -> ClientState<f64> {
    ClientState::new(id, data, Vec::new(), model.clone(), eta, 99)
}

fn sim_config(algorithm: Algorithm) -> SimConfig<f64> {
    let priors = synth::dirichlet_priors(0.5, 3, 3, 8).unwrap();
    SimConfig {
        algorithm,
        local: LocalConfig::default(),
        geometry: geometry(3),
        hidden: vec![5],
        clients: priors
            .into_iter()
            .enumerate()
            .map(|(i, prior)| ClientProfile {
                client_id: i,
                n_samples: 10,
                class_prior: prior,
                pose: Pose {
                    rotation: 0.4 * i as f64,
                    translation: [0.1 * i as f64, 0.0],
                },
                noise_sigma: 0.1,
                seed: 100 + i as u64,
            })
            .collect(),
        eta_local: 0.3,
        eta_global: 1.0,
        schedule: LrSchedule::default(),
        global_step: GlobalStep::Convergent,
        rounds: 3,
        init_seed: 1,
        shuffle_seed: 2,
    }
}

fn bits(p: &Params<f64>) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_gradients_leave_model_unchanged() {
    // a single class makes every cross-entropy gradient exactly zero
    let model = Mlp::init(&[4, 3, 1], 5).unwrap();
    let mut c = client(0, samples(1, 4, 1), &model, 0.5);
    let cg = Params::zeros(model.params().len());
    let (up, stats) = fed::local_round_feddwa(&mut c, 1, &model, &cg, &LocalConfig::default())
        .unwrap()
        .unwrap();
    assert_eq!(up.model, *model.params());
    assert_eq!(stats.kld_sum, 0.0);
}

#[test]
fn single_sample_is_one_sgd_step() {
    let model = Mlp::init(&[4, 5, 3], 6).unwrap();
    let data = samples(3, 1, 2);
    let g = model
        .backward(&data[0].input, &data[0].mask, &LossSpec::CrossEntropy)
        .unwrap()
        .grad;
    let eta = 0.37;
    let mut c = client(0, data, &model, eta);
    let cg = Params::zeros(model.params().len());
    let cfg = LocalConfig {
        loss: DaLossConfig::disabled(),
        ..LocalConfig::default()
    };
    let (up, _) = fed::local_round_feddwa(&mut c, 1, &model, &cg, &cfg)
        .unwrap()
        .unwrap();
    let expected = Params::axpy(-eta, &g, model.params()).unwrap();
    for i in 0..expected.len() {
        assert!((up.model[i] - expected[i]).abs() < 1e-15);
    }
}

#[test]
fn zero_divergence_gives_zero_contribution() {
    let model = Mlp::init(&[4, 3, 1], 7).unwrap();
    let n = model.params().len();
    let mut c = client(0, samples(1, 3, 3), &model, 0.2);
    c.c_local = Params::from_vec((0..n).map(|i| i as f64 * 0.1 - 0.3).collect());
    let cg = Params::from_vec(vec![0.05; n]);
    let (up, _) = fed::local_round_feddwa(&mut c, 1, &model, &cg, &LocalConfig::default())
        .unwrap()
        .unwrap();
    assert!(up.control.unwrap().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn empty_client_is_skipped() {
    let model = Mlp::init(&[4, 3, 2], 7).unwrap();
    let mut c = client(0, Vec::new(), &model, 0.2);
    let cg = Params::zeros(model.params().len());
    assert!(
        fed::local_round_feddwa(&mut c, 1, &model, &cg, &LocalConfig::default())
            .unwrap()
            .is_none()
    );
}

/// Replays a FedDWA local round step by step from public pieces and checks
/// the client's bookkeeping against it.
#[test]
fn local_round_matches_independent_replay() {
    let model = Mlp::init(&[4, 6, 3], 21).unwrap();
    let data = samples(3, 7, 4);
    let n = model.params().len();
    let cg = Params::from_vec((0..n).map(|i| ((i % 5) as f64 - 2.0) * 1e-3).collect());
    let c_prev = Params::from_vec((0..n).map(|i| ((i % 3) as f64 - 1.0) * 2e-3).collect());
    let cfg = LocalConfig {
        loss: DaLossConfig {
            c: 0.1,
            kld_detached: true,
            enabled: true,
        },
        batch_size: 2,
        ..LocalConfig::default()
    };
    let eta = 0.4;
    let mut c = client(3, data.clone(), &model, eta);
    c.c_local = c_prev.clone();
    let order = c.visit_order(5, 0);
    let (up, stats) = fed::local_round_feddwa(&mut c, 5, &model, &cg, &cfg)
        .unwrap()
        .unwrap();

    let correction = cg.sub(&c_prev).unwrap();
    let mut theta = model.clone();
    let mut w = Params::zeros(n);
    let mut o = 0.0;
    for batch in order.chunks(2) {
        let mut step = Params::zeros(n);
        for &i in batch {
            let glp = feddwa_core::divergence::log_softmax(&model.forward(&data[i].input).unwrap())
                .unwrap();
            let spec = LossSpec::DaLoss {
                config: &cfg.loss,
                global_params: model.params(),
                global_log_probs: &glp,
                reduction: KldReduction::Mean,
            };
            let b = theta
                .backward(&data[i].input, &data[i].mask, &spec)
                .unwrap();
            o += b.kld.unwrap();
            w.add_assign(&b.grad).unwrap();
            step.add_scaled(1.0 / batch.len() as f64, &b.grad).unwrap();
        }
        step.add_assign(&correction).unwrap();
        theta.params_mut().add_scaled(-eta, &step).unwrap();
    }
    let count = data.len() as f64;
    let c_m = w.scaled(1.0 / count);
    let mut u = w.clone();
    u.add_assign(&correction).unwrap();
    u.scale(eta);
    let g_m = Params::axpy(-1.0 / count, &u, model.params()).unwrap();
    let t_m = c_m.scaled(o / count);

    assert!((stats.kld_sum - o).abs() < 1e-15);
    assert!(o > 0.0);
    for i in 0..n {
        assert!((c.c_local[i] - c_m[i]).abs() < 1e-15);
        assert!((up.model[i] - g_m[i]).abs() < 1e-15);
        assert!((up.control.as_ref().unwrap()[i] - t_m[i]).abs() < 1e-15);
    }
}

#[test]
fn strict_u_uses_round_start_gradients() {
    let model = Mlp::init(&[4, 6, 3], 22).unwrap();
    let data = samples(3, 5, 5);
    let cfg = LocalConfig {
        strict_u_at_round_start: true,
        loss: DaLossConfig::disabled(),
        ..LocalConfig::default()
    };
    let eta = 0.25;
    let n = model.params().len();
    let mut c = client(0, data.clone(), &model, eta);
    let (up, _) = fed::local_round_feddwa(&mut c, 1, &model, &Params::zeros(n), &cfg)
        .unwrap()
        .unwrap();
    // with zero controls the strict update is one full-batch gradient step
    let mut full = Params::zeros(n);
    for s in &data {
        full.add_assign(
            &model
                .backward(&s.input, &s.mask, &LossSpec::CrossEntropy)
                .unwrap()
                .grad,
        )
        .unwrap();
    }
    let expected = Params::axpy(-eta / data.len() as f64, &full, model.params()).unwrap();
    for i in 0..n {
        assert!((up.model[i] - expected[i]).abs() < 1e-14);
    }
}

#[test]
fn scaffold_single_step_equals_fedavg_step() {
    let model = Mlp::init(&[4, 5, 3], 9).unwrap();
    let data = samples(3, 1, 6);
    let n = model.params().len();
    let cfg = LocalConfig {
        loss: DaLossConfig::disabled(),
        weighting: KldWeighting::Unit,
        ..LocalConfig::default()
    };
    let mut a = client(0, data.clone(), &model, 0.3);
    let mut b = client(0, data, &model, 0.3);
    let (ua, _) = fed::local_round_feddwa(&mut a, 1, &model, &Params::zeros(n), &cfg)
        .unwrap()
        .unwrap();
    let (ub, _) = fed::local_round_fedavg(&mut b, 1, &model, &cfg)
        .unwrap()
        .unwrap();
    assert_eq!(bits(&ua.model), bits(&ub.model));
}

#[test]
fn contribution_scales_with_divergence() {
    let model = Mlp::init(&[1, 1], 0).unwrap();
    let mk = |lambda: f64| {
        let mut s = ServerState::new(
            model.clone(),
            1.0,
            LrSchedule::default(),
            GlobalStep::Convergent,
        );
        let c1 = Params::from_vec(vec![0.2, -0.4]);
        let c2 = Params::from_vec(vec![1.0, 1.0]);
        // T_m = (O_m / n) c_m; scaling O_1 by lambda scales T_1 by lambda
        let o1 = 0.3 * lambda;
        let ups = [
            ClientUpload {
                client_id: 0,
                n_samples: 4,
                model: model.params().clone(),
                control: Some(c1.scaled(o1 / 4.0)),
            },
            ClientUpload {
                client_id: 1,
                n_samples: 2,
                model: model.params().clone(),
                control: Some(c2.scaled(0.1 / 2.0)),
            },
        ];
        fed::server_update_feddwa(&mut s, &ups).unwrap();
        s.c_global
    };
    let base = mk(1.0);
    let scaled = mk(3.0);
    let t1 = Params::from_vec(vec![0.2, -0.4]).scaled(0.3 / 4.0 / 2.0);
    for i in 0..2 {
        assert!(((scaled[i] - base[i]) - 2.0 * t1[i]).abs() < 1e-15);
    }
}

#[test]
fn zero_divergence_everywhere_keeps_global_control() {
    let mut cfg = sim_config(Algorithm::FedDwa);
    cfg.geometry.classes = 1;
    for c in &mut cfg.clients {
        c.class_prior = vec![1.0];
    }
    let mut fed = Federation::new(&cfg).unwrap();
    let before = fed.server.c_global.clone();
    fed.round().unwrap();
    fed.round().unwrap();
    assert_eq!(fed.server.c_global, before);
}

#[test]
fn unit_weighting_with_zero_c_is_scaffold() {
    let mut dwa = sim_config(Algorithm::FedDwa);
    dwa.local.weighting = KldWeighting::Unit;
    dwa.local.loss = DaLossConfig {
        c: 0.0,
        kld_detached: true,
        enabled: true,
    };
    let mut sc = sim_config(Algorithm::Scaffold);
    sc.local.loss = DaLossConfig::disabled();
    let mut a = Federation::new(&dwa).unwrap();
    let mut b = Federation::new(&sc).unwrap();
    for _ in 0..3 {
        a.round().unwrap();
        b.round().unwrap();
        assert_eq!(bits(a.server.model.params()), bits(b.server.model.params()));
        assert_eq!(bits(&a.server.c_global), bits(&b.server.c_global));
    }
}

#[test]
fn controls_at_zero_and_unit_rate_average_models() {
    let cfg = sim_config(Algorithm::FedDwa);
    let mut fed = Federation::new(&cfg).unwrap();
    let global = fed.server.model.clone();
    let zero = Params::zeros(global.params().len());
    let local = fed.local.clone();
    let uploads: Vec<_> = fed
        .clients
        .iter_mut()
        .map(|c| {
            c.c_local = zero.clone();
            fed::local_round_feddwa(c, 1, &global, &zero, &local)
                .unwrap()
                .unwrap()
                .0
        })
        .collect();
    fed::server_update_feddwa(&mut fed.server, &uploads).unwrap();
    let m = uploads.len() as f64;
    for i in 0..zero.len() {
        let mean: f64 = uploads.iter().map(|u| u.model[i]).sum::<f64>() / m;
        assert!((fed.server.model.params()[i] - mean).abs() < 1e-12);
    }
}

#[test]
fn learning_rate_decays_on_schedule() {
    let mut cfg = sim_config(Algorithm::FedAvg);
    cfg.schedule = LrSchedule {
        decay: 0.5,
        period: 2,
    };
    let mut fed = Federation::new(&cfg).unwrap();
    fed.round().unwrap();
    assert_eq!(fed.clients[0].eta_local, 0.3);
    fed.round().unwrap();
    assert_eq!(fed.clients[0].eta_local, 0.15);
}

#[test]
fn fedavg_single_client_single_round() {
    let mut cfg = sim_config(Algorithm::FedAvg);
    cfg.clients.truncate(1);
    cfg.rounds = 1;
    let mut fed = Federation::new(&cfg).unwrap();
    fed.round().unwrap();
    assert_eq!(fed.server.model, fed.clients[0].model);
}

#[test]
fn zero_rounds_rejected() {
    let mut cfg = sim_config(Algorithm::FedDwa);
    cfg.rounds = 0;
    assert!(fed::run_experiment(&cfg).is_err());
}

#[test]
fn experiment_is_deterministic() {
    for alg in [Algorithm::FedAvg, Algorithm::Scaffold, Algorithm::FedDwa] {
        let cfg = sim_config(alg);
        let a = fed::run_experiment(&cfg).unwrap();
        let b = fed::run_experiment(&cfg).unwrap();
        assert_eq!(a.len(), 3 * 3 * 2);
        let enc = |r: &[feddwa_core::metrics::RoundReport]| {
            r.iter()
                .map(|x| (x.round, x.client_id, x.loss.to_bits(), x.mean_iou.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(enc(&a), enc(&b));
    }
}

#[test]
fn runs_in_single_precision() {
    let cfg = sim_config(Algorithm::FedDwa);
    let cfg32 = SimConfig::<f32> {
        algorithm: cfg.algorithm,
        local: LocalConfig::default(),
        geometry: cfg.geometry,
        hidden: cfg.hidden.clone(),
        clients: cfg.clients.clone(),
        eta_local: 0.3,
        eta_global: 1.0,
        schedule: LrSchedule::default(),
        global_step: GlobalStep::Convergent,
        rounds: 2,
        init_seed: 1,
        shuffle_seed: 2,
    };
    let reports = fed::run_experiment(&cfg32).unwrap();
    assert!(reports.iter().all(|r| r.loss.is_finite()));
}
