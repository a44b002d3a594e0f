use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{local_round_fedavg, local_round_feddwa, ClientState, LocalStats};
use super::server::{fedavg_aggregate, server_update_feddwa, ServerState};
use super::{Algorithm, ClientUpload, GlobalStep, KldWeighting, LocalConfig, LrSchedule};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, ConfusionCounts, RoundReport, Scope};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::synth::{self, ClientProfile, Geometry, Sample};

/// Fully resolved simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<T> {
    pub algorithm: Algorithm,
    pub local: LocalConfig<T>,
    pub geometry: Geometry,
    pub hidden: Vec<usize>,
    pub clients: Vec<ClientProfile>,
    pub eta_local: T,
    pub eta_global: T,
    pub schedule: LrSchedule<T>,
    pub global_step: GlobalStep,
    pub rounds: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl<T: Scalar> SimConfig<T> {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.geometry.features];
        sizes.extend(&self.hidden);
        sizes.push(self.geometry.classes);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clients.is_empty() {
            return bad("at least one client is required".into());
        }
        self.geometry.validate()?;
        self.local.validate()?;
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.eta_local > T::zero()) || !self.eta_local.is_finite() {
            return bad(format!(
                "eta_local must be positive, got {}",
                self.eta_local
            ));
        }
        if !(self.eta_global > T::zero()) || !self.eta_global.is_finite() {
            return bad(format!(
                "eta_global must be positive, got {}",
                self.eta_global
            ));
        }
        if !(self.schedule.decay > T::zero()) || self.schedule.decay > T::one() {
            return bad(format!(
                "lr decay must lie in (0, 1], got {}",
                self.schedule.decay
            ));
        }
        let mut ids: Vec<usize> = self.clients.iter().map(|c| c.client_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("client ids must be unique".into());
        }
        for c in &self.clients {
            c.validate(self.geometry.classes)?;
            if synth::test_count(c.n_samples) == 0 {
                return bad(format!(
                    "client {}: n_samples must be at least 5 so the held-out split is non-empty",
                    c.client_id
                ));
            }
        }
        Ok(())
    }

    /// Local settings with the algorithm's own switches applied.
    pub fn effective_local(&self) -> LocalConfig<T> {
        let mut local = self.local.clone();
        if self.algorithm == Algorithm::Scaffold {
            local.weighting = KldWeighting::Unit;
        }
        local
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome<T> {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub stats: Vec<(usize, LocalStats<T>)>,
}

/// Server plus clients for one run.
#[derive(Debug, Clone)]
pub struct Federation<T> {
    pub algorithm: Algorithm,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
    pub local: LocalConfig<T>,
}

type LocalResult<T> = Result<Option<(ClientUpload<T>, LocalStats<T>)>>;
type Collected<T> = (Vec<ClientUpload<T>>, Vec<(usize, LocalStats<T>)>);

fn collect_round<T: Scalar>(
    round: usize,
    clients: &[ClientState<T>],
    results: Vec<LocalResult<T>>,
) -> Result<Collected<T>> {
    let mut uploads = Vec::new();
    let mut stats = Vec::new();
    for (client, r) in clients.iter().zip(results) {
        match r {
            Ok(Some((u, s))) => {
                uploads.push(u);
                stats.push((client.id, s));
            }
            Ok(None) => {}
            Err(e) => {
                return Err(Error::Diverged {
                    round,
                    client: client.id,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((uploads, stats))
}

fn finish<T: Scalar>(server: &mut ServerState<T>, clients: &mut [ClientState<T>]) {
    if let Some(decay) = server.finish_round() {
        for c in clients.iter_mut() {
            c.eta_local *= decay;
        }
    }
}

fn wrap_server<T>(round: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(_) => Error::Diverged {
            round,
            client: usize::MAX,
            reason: format!("server aggregation: {e}"),
        },
        other => other,
    })
}

/// One FedAvg round: local SGD everywhere, then weighted averaging.
pub fn run_fedavg_round<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &LocalConfig<T>,
) -> Result<RoundOutcome<T>> {
    let round = server.round + 1;
    let global = &server.model;
    let results: Vec<LocalResult<T>> = clients
        .par_iter_mut()
        .map(|c| local_round_fedavg(c, round, global, cfg))
        .collect();
    let (uploads, stats) = collect_round(round, clients, results)?;
    wrap_server(round, fedavg_aggregate(server, &uploads))?;
    finish(server, clients);
    Ok(RoundOutcome { round, stats })
}

/// One FedDWA round with the given local settings.
pub fn run_feddwa_round<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &LocalConfig<T>,
) -> Result<RoundOutcome<T>> {
    let round = server.round + 1;
    let global = &server.model;
    let c_global = &server.c_global;
    let results: Vec<LocalResult<T>> = clients
        .par_iter_mut()
        .map(|c| local_round_feddwa(c, round, global, c_global, cfg))
        .collect();
    let (uploads, stats) = collect_round(round, clients, results)?;
    wrap_server(round, server_update_feddwa(server, &uploads))?;
    finish(server, clients);
    Ok(RoundOutcome { round, stats })
}

/// SCAFFOLD-style round: FedDWA with unit divergence weights.
pub fn run_scaffold_round<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &LocalConfig<T>,
) -> Result<RoundOutcome<T>> {
    let cfg = LocalConfig {
        weighting: KldWeighting::Unit,
        ..cfg.clone()
    };
    run_feddwa_round(server, clients, &cfg)
}

impl<T: Scalar> Federation<T> {
    pub fn new(cfg: &SimConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let model = Mlp::init(&cfg.layer_sizes(), cfg.init_seed)?;
        let datasets: Vec<_> = cfg
            .clients
            .par_iter()
            .map(|p| synth::generate_client_dataset::<T>(p, &cfg.geometry))
            .collect::<Result<_>>()?;
        let mut clients: Vec<ClientState<T>> = cfg
            .clients
            .iter()
            .zip(datasets)
            .map(|(p, ds)| {
                ClientState::new(
                    p.client_id,
                    ds.train,
                    ds.test,
                    model.clone(),
                    cfg.eta_local,
                    cfg.shuffle_seed,
                )
            })
            .collect();
        clients.sort_by_key(|c| c.id);
        Ok(Self {
            algorithm: cfg.algorithm,
            server: ServerState::new(model, cfg.eta_global, cfg.schedule, cfg.global_step),
            clients,
            local: cfg.effective_local(),
        })
    }

    pub fn round(&mut self) -> Result<RoundOutcome<T>> {
        match self.algorithm {
            Algorithm::FedAvg => run_fedavg_round(&mut self.server, &mut self.clients, &self.local),
            Algorithm::Scaffold => {
                run_scaffold_round(&mut self.server, &mut self.clients, &self.local)
            }
            Algorithm::FedDwa => run_feddwa_round(&mut self.server, &mut self.clients, &self.local),
        }
    }

    /// Global and local evaluation of every client's held-out split, in
    /// ascending client id.
    pub fn reports(&self) -> Result<Vec<RoundReport>> {
        let round = self.server.round;
        let per_client: Vec<Result<[RoundReport; 2]>> = self
            .clients
            .par_iter()
            .map(|c| {
                let mk = |scope: Scope, model: &Mlp<T>| -> Result<RoundReport> {
                    let (loss, counts) = evaluate(model, c.test_samples())?;
                    let summary = metrics::iou(&counts);
                    Ok(RoundReport {
                        round,
                        client_id: c.id,
                        scope,
                        loss,
                        iou_per_class: summary.per_class,
                        mean_iou: summary.mean,
                    })
                };
                Ok([
                    mk(Scope::Global, &self.server.model)?,
                    mk(Scope::Local, &c.model)?,
                ])
            })
            .collect();
        let mut out = Vec::with_capacity(2 * self.clients.len());
        for r in per_client {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Mean cross-entropy and pooled confusion counts of `model` over `samples`.
pub fn evaluate<T: Scalar>(
    model: &Mlp<T>,
    samples: &[Sample<T>],
) -> Result<(f64, ConfusionCounts)> {
    let mut counts = ConfusionCounts::new(model.classes());
    let mut loss = 0.0;
    for s in samples {
        let logits = model.forward(&s.input)?;
        loss += losses::cross_entropy(&logits, &s.mask)?.0.as_f64();
        counts.add(&logits.argmax(), &s.mask)?;
    }
    if !samples.is_empty() {
        loss /= samples.len() as f64;
    }
    Ok((loss, counts))
}

/// Runs every round, handing each round's reports to `observer` before the
/// next round starts.
pub fn run_experiment_with<T, F>(cfg: &SimConfig<T>, mut observer: F) -> Result<Vec<RoundReport>>
where
    T: Scalar,
    F: FnMut(&Federation<T>, &[RoundReport]) -> Result<()>,
{
    let mut fed = Federation::new(cfg)?;
    let mut all = Vec::new();
    for _ in 0..cfg.rounds {
        fed.round()?;
        let reports = fed.reports()?;
        if let Some(bad) = reports.iter().find(|r| !r.loss.is_finite()) {
            return Err(Error::Diverged {
                round: bad.round,
                client: bad.client_id,
                reason: format!("non-finite {} test loss", bad.scope.as_str()),
            });
        }
        observer(&fed, &reports)?;
        all.extend(reports);
    }
    Ok(all)
}

pub fn run_experiment<T: Scalar>(cfg: &SimConfig<T>) -> Result<Vec<RoundReport>> {
    run_experiment_with(cfg, |_, _| Ok(()))
}
