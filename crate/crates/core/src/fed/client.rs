use log::warn;
use rand::seq::SliceRandom;

use super::{ClientUpload, KldWeighting, LocalConfig};
use crate::divergence::{self, LogProbGrid};
use crate::error::{Error, Result};
use crate::nn::{LossSpec, Mlp};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::synth::{keyed_rng, Sample};

const FIELD_SHUFFLE: u64 = 0x5348;

#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub id: usize,
    dataset: Vec<Sample<T>>,
    test: Vec<Sample<T>>,
    /// `G_m`
    pub model: Mlp<T>,
    /// `c_m`
    pub c_local: Params<T>,
    /// `η_m`
    pub eta_local: T,
    shuffle_seed: u64,
    /// `U_m`, `W_m`, `O_m`; reset at the start of every round.
    pub u: Params<T>,
    pub w: Params<T>,
    pub o: T,
}

/// Per-round diagnostics kept on the client side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats<T> {
    pub mean_loss: T,
    /// `O_m`
    pub kld_sum: T,
    pub visits: usize,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(
        id: usize,
        train: Vec<Sample<T>>,
        test: Vec<Sample<T>>,
        model: Mlp<T>,
        eta_local: T,
        shuffle_seed: u64,
    ) -> Self {
        let n = model.params().len();
        Self {
            id,
            dataset: train,
            test,
            model,
            c_local: Params::zeros(n),
            eta_local,
            shuffle_seed,
            u: Params::zeros(n),
            w: Params::zeros(n),
            o: T::zero(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.dataset.len()
    }

    pub fn test_samples(&self) -> &[Sample<T>] {
        &self.test
    }

    pub fn train_samples(&self) -> &[Sample<T>] {
        &self.dataset
    }

    fn begin_round(&mut self, global: &Mlp<T>) {
        self.model = global.clone();
        let n = global.params().len();
        self.u = Params::zeros(n);
        self.w = Params::zeros(n);
        self.o = T::zero();
    }

    /// Visit order for `(round, epoch)`, independent of any other client.
    pub fn visit_order(&self, round: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        let stream = ((round as u64) << 32) ^ (epoch as u64) ^ ((self.id as u64) << 48);
        let mut rng = keyed_rng(self.shuffle_seed, stream, FIELD_SHUFFLE);
        idx.shuffle(&mut rng);
        idx
    }
}

fn skip_empty<T>(client: &ClientState<T>) -> bool {
    if client.dataset.is_empty() {
        warn!(
            "client {} has no training samples; skipped this round",
            client.id
        );
        return true;
    }
    false
}

/// One FedDWA local round.
///
/// The working parameters take one corrected SGD step per minibatch,
/// `θ ← θ − η_m (∂_B + c_g⁻ − c_m⁻)`, and every per-sample gradient feeds
/// `U_m`/`W_m`. After the pass the local model is rebuilt from the round-start
/// model as `G_m = G_g⁻ − U_m / n` with `U_m = η_m (ΣU + c_g⁻ − c_m⁻)`, the local
/// control becomes `c_m = W_m / n` and the upload carries `T_m = (O_m / n)·c_m`,
/// where `n` counts sample visits (`|N_m|` for a single epoch).
pub fn local_round_feddwa<T: Scalar>(
    client: &mut ClientState<T>,
    round: usize,
    global: &Mlp<T>,
    c_global: &Params<T>,
    cfg: &LocalConfig<T>,
) -> Result<Option<(ClientUpload<T>, LocalStats<T>)>> {
    if skip_empty(client) {
        return Ok(None);
    }
    client.begin_round(global);
    let g_prev = global.params();
    let correction = c_global.sub(&client.c_local)?;
    let eta = client.eta_local;
    let uses_global_probs = cfg.loss.enabled || cfg.weighting == KldWeighting::Divergence;

    let n = client.dataset.len();
    let mut global_probs: Vec<Option<LogProbGrid<T>>> = vec![None; n];
    let mut round_start_grads: Vec<Option<Params<T>>> = vec![None; n];
    let mut loss_sum = T::zero();
    let mut visits = 0usize;

    for epoch in 0..cfg.epochs {
        let order = client.visit_order(round, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grad = Params::zeros(g_prev.len());
            for &i in batch {
                let sample = &client.dataset[i];
                if uses_global_probs && global_probs[i].is_none() {
                    global_probs[i] =
                        Some(divergence::log_softmax(&global.forward(&sample.input)?)?);
                }
                let spec = match (&global_probs[i], cfg.loss.enabled) {
                    (Some(glp), true) => LossSpec::DaLoss {
                        config: &cfg.loss,
                        global_params: g_prev,
                        global_log_probs: glp,
                        reduction: cfg.reduction,
                    },
                    _ => LossSpec::CrossEntropy,
                };
                let b = client.model.backward(&sample.input, &sample.mask, &spec)?;
                let kld = match (cfg.weighting, b.kld, &global_probs[i]) {
                    (KldWeighting::Unit, _, _) => T::one(),
                    (KldWeighting::Divergence, Some(k), _) => k,
                    (KldWeighting::Divergence, None, Some(glp)) => {
                        let local = divergence::log_softmax(&b.logits)?;
                        divergence::kld_with(glp, &local, cfg.reduction)?
                    }
                    (KldWeighting::Divergence, None, None) => unreachable!("global probs computed"),
                };
                client.o += kld;
                loss_sum += b.loss;
                client.w.add_assign(&b.grad)?;
                if cfg.strict_u_at_round_start {
                    if round_start_grads[i].is_none() {
                        let at_start = global.backward(&sample.input, &sample.mask, &spec)?;
                        round_start_grads[i] = Some(at_start.grad);
                    }
                    client
                        .u
                        .add_assign(round_start_grads[i].as_ref().expect("filled above"))?;
                } else {
                    client.u.add_assign(&b.grad)?;
                }
                batch_grad.add_assign(&b.grad)?;
                visits += 1;
            }
            batch_grad.scale(T::one() / T::of_usize(batch.len()));
            batch_grad.add_assign(&correction)?;
            client.model.params_mut().add_scaled(-eta, &batch_grad)?;
        }
    }

    let count = T::of_usize(visits);
    client.u.add_assign(&correction)?;
    client.u.scale(eta);
    let g_local = Params::axpy(-T::one() / count, &client.u, g_prev)?;
    if !g_local.is_finite() {
        return Err(Error::NonFinite("local model"));
    }
    client.model.set_params(g_local)?;
    client.c_local = client.w.scaled(T::one() / count);
    let t_m = client.c_local.scaled(client.o / count);

    Ok(Some((
        ClientUpload {
            client_id: client.id,
            n_samples: client.dataset.len(),
            model: client.model.params().clone(),
            control: Some(t_m),
        },
        LocalStats {
            mean_loss: loss_sum / count,
            kld_sum: client.o,
            visits,
        },
    )))
}

/// Plain local SGD with cross-entropy, starting from the global model.
pub fn local_round_fedavg<T: Scalar>(
    client: &mut ClientState<T>,
    round: usize,
    global: &Mlp<T>,
    cfg: &LocalConfig<T>,
) -> Result<Option<(ClientUpload<T>, LocalStats<T>)>> {
    if skip_empty(client) {
        return Ok(None);
    }
    client.begin_round(global);
    let eta = client.eta_local;
    let mut loss_sum = T::zero();
    let mut visits = 0usize;
    for epoch in 0..cfg.epochs {
        let order = client.visit_order(round, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grad = Params::zeros(global.params().len());
            for &i in batch {
                let sample = &client.dataset[i];
                let b =
                    client
                        .model
                        .backward(&sample.input, &sample.mask, &LossSpec::CrossEntropy)?;
                loss_sum += b.loss;
                batch_grad.add_assign(&b.grad)?;
                visits += 1;
            }
            let step = -eta / T::of_usize(batch.len());
            client.model.params_mut().add_scaled(step, &batch_grad)?;
        }
    }
    if !client.model.params().is_finite() {
        return Err(Error::NonFinite("local model"));
    }
    Ok(Some((
        ClientUpload {
            client_id: client.id,
            n_samples: client.dataset.len(),
            model: client.model.params().clone(),
            control: None,
        },
        LocalStats {
            mean_loss: loss_sum / T::of_usize(visits),
            kld_sum: T::zero(),
            visits,
        },
    )))
}
