//! Minibatch training of stochastic networks on bound objectives, plus the
//! deterministic contrastive and supervised baselines.

use std::time::Instant;

use log::{debug, info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::contrastive::evaluate_weights;
use crate::data::{ContrastiveDataset, LabeledDataset};
use crate::divergences::{chi2_gaussian, kl_gaussian};
use crate::error::{Error, Result};
use crate::evaluation::{mc_posterior_risk, RiskMeasure};
use crate::losses::{loss_range_bl, LossKind};
use crate::network::{
    backward, forward_cached, init_network, map_network, max_representation_norm, Architecture,
    InitSpec, Network, PosteriorParams, PriorParams,
};
use crate::objective::{Objective, ObjectiveKind};
use crate::optim::{scheduled_lr, OptimizerKind, OptimizerState};

/// Initial prior variance for the iid objective and the baselines.
pub const IID_PRIOR_VARIANCE: f64 = 3.354_626_279_025_118_4e-4; // e^-8
/// Initial prior variance for the dependent-data objective.
pub const NONIID_PRIOR_VARIANCE: f64 = 6.737_946_999_085_467e-3; // e^-5
/// Initialisation std of the supervised prediction head.
pub const HEAD_STD: f64 = 1.0 / 50.0;
/// Step-size halvings tried when a step makes the chi-square overflow.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainObjective {
    Iid,
    Noniid,
    ErmBaseline,
    SupervisedBaseline,
}

/// Validation metric driving early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopping {
    /// Posterior-averaged validation loss over `mc_samples` draws.
    SValid,
    /// Validation loss of the mean network.
    DetValid,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: TrainObjective,
    /// Fixed lambda for the iid objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Alternative to `lambda`: lambda = 10^a / m with m the training size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_exponent: Option<i32>,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Dependency length; defaults to the dataset's.
    #[serde(
        default,
        rename = "T",
        alias = "t",
        skip_serializing_if = "Option::is_none"
    )]
    pub t: Option<usize>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Expected number of negative blocks; checked against the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Expected block size; checked against the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    pub architecture: Architecture,
    /// Per-layer init std; `1/sqrt(fan_in)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_stds: Option<Vec<f64>>,
    /// Initial prior (and posterior) variance; e^-8 iid, e^-5 dependent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_variance: Option<f64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Divide the learning rate by 10 at 3/4 of the epochs.
    #[serde(default = "default_true")]
    pub lr_decay: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_early_stopping")]
    pub early_stopping: EarlyStopping,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_one")]
    pub loss_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_b() -> f64 {
    100.0
}
fn default_c() -> f64 {
    0.1
}
fn default_delta() -> f64 {
    0.05
}
fn default_loss() -> LossKind {
    LossKind::Logistic
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    500
}
fn default_batch() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_patience() -> usize {
    20
}
fn default_early_stopping() -> EarlyStopping {
    EarlyStopping::SValid
}
fn default_mc() -> usize {
    10
}
fn default_one() -> f64 {
    1.0
}

impl TrainConfig {
    /// A config with every optional field at its default.
    pub fn new(objective: TrainObjective, architecture: Architecture) -> Self {
        Self {
            objective,
            lambda: None,
            lambda_exponent: None,
            b: default_b(),
            c: default_c(),
            delta: default_delta(),
            t: None,
            loss: default_loss(),
            k: None,
            block_size: None,
            architecture,
            init_stds: None,
            prior_variance: None,
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_decay: true,
            patience: default_patience(),
            early_stopping: default_early_stopping(),
            mc_samples: default_mc(),
            loss_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective == TrainObjective::Iid {
            match (self.lambda, self.lambda_exponent) {
                (Some(l), None) if l > 0.0 && l.is_finite() => {}
                (Some(l), None) => {
                    return Err(Error::config(format!("lambda must be > 0, got {l}")))
                }
                (None, Some(_)) => {}
                (Some(_), Some(_)) => {
                    return Err(Error::config(
                        "give either lambda or lambda_exponent, not both",
                    ))
                }
                (None, None) => {
                    return Err(Error::config(
                        "the iid objective needs lambda or lambda_exponent",
                    ))
                }
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.b > 0.0) || !(self.c > 0.0) {
            return Err(Error::config("b and c must be > 0"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.loss_scale > 0.0) {
            return Err(Error::config("loss_scale must be > 0"));
        }
        let pv = self.initial_prior_variance();
        if !(pv > 0.0) || pv.ln() > self.c.ln() - 1.0 / self.b {
            return Err(Error::config(format!(
                "prior_variance {pv} must lie in (0, c e^(-1/b)) = (0, {})",
                self.c * (-1.0 / self.b).exp()
            )));
        }
        Ok(())
    }

    pub fn initial_prior_variance(&self) -> f64 {
        self.prior_variance.unwrap_or(match self.objective {
            TrainObjective::Noniid => NONIID_PRIOR_VARIANCE,
            _ => IID_PRIOR_VARIANCE,
        })
    }

    pub fn init_spec(&self) -> InitSpec {
        let pv = self.initial_prior_variance();
        match &self.init_stds {
            Some(stds) => InitSpec::new(stds.clone(), pv),
            None => InitSpec::fan_in(&self.architecture, pv),
        }
    }

    /// Lambda for a training set of size `m`.
    pub fn resolve_lambda(&self, m: usize) -> Option<f64> {
        self.lambda
            .or_else(|| self.lambda_exponent.map(|a| 10f64.powi(a) / m as f64))
    }

    fn check_data(&self, data: &ContrastiveDataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if let Some(k) = self.k.filter(|&k| k != data.k()) {
            return Err(Error::config(format!(
                "config k = {k} but data has k = {}",
                data.k()
            )));
        }
        if let Some(b) = self.block_size.filter(|&b| b != data.block_size()) {
            return Err(Error::config(format!(
                "config block_size = {b} but data has block size {}",
                data.block_size()
            )));
        }
        if data.input_dim() != self.architecture.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input vs data dimension",
                expected: self.architecture.input_dim(),
                actual: data.input_dim(),
            });
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean objective over the epoch's minibatches.
    pub objective: f64,
    /// Mean minibatch loss under the sampled weights.
    pub train_loss: f64,
    /// KL or chi-square at the end of the epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub divergence: Option<f64>,
    pub sigma2_p: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_valid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub det_valid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub criterion: Option<String>,
    pub config: TrainConfig,
    /// Number of training tuples (or labelled points for the supervised baseline).
    pub train_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (0 = initialisation).
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub early_stopped: bool,
    /// Steps where the prior log-variance hit its upper limit.
    pub clamp_count: usize,
    /// Steps rejected because the chi-square overflowed.
    pub rejected_steps: usize,
    pub status: RunStatus,
    /// Certificate of the kept parameters on the training data.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_secs: Option<f64>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Metrics of the kept epoch.
    pub fn best_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.iter().find(|m| m.epoch == self.best_epoch)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// `None` when the run aborted.
    pub checkpoint: Option<Checkpoint>,
}

/// Flat optimisation vector: `[mu_q, log_sigma2_q, ln sigma2_p]`.
struct Params {
    v: Vec<f64>,
    n: usize,
}

impl Params {
    fn new(post: &PosteriorParams, prior: &PriorParams) -> Self {
        let n = post.len();
        let mut v = Vec::with_capacity(2 * n + 1);
        v.extend_from_slice(&post.mu_q);
        v.extend_from_slice(&post.log_sigma2_q);
        v.push(prior.sigma2_p.ln());
        Self { v, n }
    }

    fn posterior(&self) -> PosteriorParams {
        PosteriorParams {
            mu_q: self.v[..self.n].to_vec(),
            log_sigma2_q: self.v[self.n..2 * self.n].to_vec(),
        }
    }

    fn prior(&self, mu_p: &[f64]) -> PriorParams {
        PriorParams {
            mu_p: mu_p.to_vec(),
            sigma2_p: self.v[2 * self.n].exp(),
        }
    }

    fn log_sigma2_p_mut(&mut self) -> &mut f64 {
        &mut self.v[2 * self.n]
    }
}

struct Stopper {
    best: f64,
    best_epoch: usize,
    since: usize,
    patience: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
            patience,
        }
    }

    /// Records `metric`; returns (improved, should_stop).
    fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn record_for(cfg: &TrainConfig, train_size: usize, lambda: Option<f64>) -> RunRecord {
    RunRecord {
        config_id: String::new(),
        criterion: None,
        config: cfg.clone(),
        train_size,
        lambda,
        metrics: Vec::new(),
        best_epoch: 0,
        stopping_epoch: 0,
        early_stopped: false,
        clamp_count: 0,
        rejected_steps: 0,
        status: RunStatus::Completed,
        bound: None,
        checkpoint: None,
        wall_time_secs: None,
    }
}

/// Trains one contrastive configuration. Invalid configurations are errors;
/// numeric failures end the run with an `Aborted` record and no checkpoint.
pub fn train(
    cfg: &TrainConfig,
    data: &ContrastiveDataset,
    valid: Option<&ContrastiveDataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_data(data)?;
    if let Some(v) = valid {
        cfg.check_data(v)?;
    }
    if cfg.early_stopping != EarlyStopping::Off && valid.is_none() {
        return Err(Error::config("early stopping needs a validation set"));
    }
    let kind = match cfg.objective {
        TrainObjective::Iid => ObjectiveKind::Iid {
            lambda: cfg.resolve_lambda(data.len()).expect("validated"),
        },
        TrainObjective::Noniid => ObjectiveKind::Noniid {
            t: cfg.t.unwrap_or_else(|| data.dependency_t()),
            b_l: 1.0,
        },
        TrainObjective::ErmBaseline => ObjectiveKind::Erm,
        TrainObjective::SupervisedBaseline => {
            return Err(Error::config(
                "the supervised baseline trains on labelled data",
            ))
        }
    };
    if let (ObjectiveKind::Noniid { t, .. }, false) = (kind, cfg.t.is_none()) {
        if t != data.dependency_t() {
            warn!(
                "config T = {t} differs from the dataset's dependency length {}",
                data.dependency_t()
            );
        }
    }
    let mut obj = Objective {
        kind,
        loss: cfg.loss,
        m: data.len(),
        b: cfg.b,
        c: cfg.c,
        delta: cfg.delta,
        loss_scale: cfg.loss_scale,
    };
    obj.validate()?;

    let started = Instant::now();
    let arch = &cfg.architecture;
    let (post0, prior0) = init_network(arch, &cfg.init_spec(), cfg.seed)?;
    let mu_p = prior0.mu_p.clone();
    let n = post0.len();
    let mut params = Params::new(&post0, &prior0);
    let mut opt = OptimizerState::new(cfg.optimizer, params.v.len());
    let mut train_rng = rng_stream(cfg.seed, 1);
    let mut valid_rng = rng_stream(cfg.seed, 2);
    let deterministic_noise = matches!(kind, ObjectiveKind::Erm);
    let is_noniid = matches!(kind, ObjectiveKind::Noniid { .. });
    let s_max = obj.max_log_sigma2_p();
    let lambda = match kind {
        ObjectiveKind::Iid { lambda } => Some(lambda),
        _ => None,
    };

    let mut record = record_for(cfg, data.len(), lambda);
    let mut best = (params.posterior(), params.prior(&mu_p));
    let mut stopper = Stopper::new(cfg.patience);
    let used_rows = if is_noniid {
        Some(data.used_rows())
    } else {
        None
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut eps = vec![0.0; n];

    for epoch in 1..=cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.epochs, cfg.lr_decay);
        let mut b_l = None;
        if let (ObjectiveKind::Noniid { t, .. }, Some(rows)) = (obj.kind, used_rows.as_ref()) {
            let w = map_network(&params.posterior());
            let big_b = max_representation_norm(&Network::new(arch, &w)?, rows.view());
            let value = loss_range_bl(cfg.loss, big_b, data.k());
            obj.kind = ObjectiveKind::Noniid { t, b_l: value };
            b_l = Some(value);
        }
        order.shuffle(&mut train_rng);
        let (mut sum_obj, mut sum_loss, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if !deterministic_noise {
                eps.iter_mut()
                    .for_each(|e| *e = train_rng.sample(StandardNormal));
            }
            let post = params.posterior();
            let prior = params.prior(&mu_p);
            let val = obj.value_and_grads(arch, &post, &prior, data, batch, &eps)?;
            let grads_finite = val
                .grads
                .mu_q
                .iter()
                .chain(&val.grads.log_sigma2_q)
                .all(|g| g.is_finite())
                && val.grads.log_sigma2_p.is_finite();
            if !val.value.is_finite() || !grads_finite {
                let reason = format!("non-finite objective or gradient at epoch {epoch}");
                return Ok(abort(record, reason, started));
            }
            let mut grads = val.grads.mu_q;
            grads.extend_from_slice(&val.grads.log_sigma2_q);
            grads.push(val.grads.log_sigma2_p);

            let mut step_lr = lr;
            let mut accepted = false;
            let snapshot = is_noniid.then(|| (params.v.clone(), opt.clone()));
            for _ in 0..=MAX_HALVINGS {
                opt.step(&mut params.v, &grads, step_lr)?;
                let s = params.log_sigma2_p_mut();
                if *s > s_max {
                    *s = s_max;
                    record.clamp_count += 1;
                }
                if is_noniid && chi2_gaussian(&params.posterior(), &params.prior(&mu_p))?.overflow {
                    let (v, o) = snapshot.clone().expect("noniid snapshot");
                    params.v = v;
                    opt = o;
                    step_lr *= 0.5;
                    record.rejected_steps += 1;
                    continue;
                }
                accepted = true;
                break;
            }
            if !accepted {
                let reason = format!("chi-square overflow persisted after {MAX_HALVINGS} step halvings at epoch {epoch}");
                return Ok(abort(record, reason, started));
            }
            sum_obj += val.value;
            sum_loss += val.empirical_loss;
            batches += 1;
        }

        let post = params.posterior();
        let prior = params.prior(&mu_p);
        let divergence = match obj.kind {
            ObjectiveKind::Iid { .. } => Some(kl_gaussian(&post, &prior)?),
            ObjectiveKind::Noniid { .. } => Some(chi2_gaussian(&post, &prior)?.value),
            ObjectiveKind::Erm => None,
        };
        let (mut s_valid, mut det_valid) = (None, None);
        if let Some(v) = valid {
            if !deterministic_noise {
                let est = mc_posterior_risk(
                    arch,
                    &post,
                    v,
                    cfg.mc_samples,
                    RiskMeasure::Loss(cfg.loss),
                    &mut valid_rng,
                )?;
                s_valid = Some(est.mean);
            }
            det_valid = Some(evaluate_weights(arch, &post.mu_q, v, cfg.loss).loss);
            if deterministic_noise {
                s_valid = det_valid;
            }
        }
        let metrics = EpochMetrics {
            epoch,
            learning_rate: lr,
            objective: sum_obj / batches as f64,
            train_loss: sum_loss / batches as f64,
            divergence,
            sigma2_p: prior.sigma2_p,
            b_l,
            s_valid,
            det_valid,
        };
        if metrics.objective.is_nan() || divergence.is_some_and(f64::is_nan) {
            return Ok(abort(
                record,
                format!("NaN metrics at epoch {epoch}"),
                started,
            ));
        }
        debug!(
            "epoch {epoch}: objective {:.6} loss {:.6} s-valid {:?} det-valid {:?}",
            metrics.objective, metrics.train_loss, s_valid, det_valid
        );
        record.metrics.push(metrics);
        record.stopping_epoch = epoch;

        let monitored = match cfg.early_stopping {
            EarlyStopping::SValid => s_valid,
            EarlyStopping::DetValid => det_valid,
            EarlyStopping::Off => None,
        };
        match monitored {
            Some(metric) => {
                let (improved, stop) = stopper.observe(epoch, metric);
                if improved {
                    best = (post, prior);
                    record.best_epoch = epoch;
                }
                if stop {
                    info!(
                        "early stop at epoch {epoch}; best epoch {}",
                        record.best_epoch
                    );
                    record.early_stopped = true;
                    break;
                }
            }
            None => {
                best = (post, prior);
                record.best_epoch = epoch;
            }
        }
    }

    record.wall_time_secs = Some(started.elapsed().as_secs_f64());
    let config_echo = serde_json::to_value(cfg).map_err(|e| Error::config(e.to_string()))?;
    let ckpt = Checkpoint::new(
        arch.clone(),
        &best.0,
        &best.1,
        cfg.seed,
        record.best_epoch,
        config_echo,
    );
    Ok(TrainOutcome {
        record,
        checkpoint: Some(ckpt),
    })
}

fn abort(mut record: RunRecord, reason: String, started: Instant) -> TrainOutcome {
    warn!("run aborted: {reason}");
    record.status = RunStatus::Aborted { reason };
    record.wall_time_secs = Some(started.elapsed().as_secs_f64());
    TrainOutcome {
        record,
        checkpoint: None,
    }
}

/// Multi-class logistic loss `log2(1 + sum_{i != y} e^{-(s_y - s_i)})`
/// of a representation network topped by a linear head, with gradients.
fn supervised_loss_and_grad(
    arch: &Architecture,
    w: &[f64],
    head: &Array2<f64>,
    head_bias: &[f64],
    x: Array2<f64>,
    labels: &[usize],
    grads: Option<(&mut [f64], &mut Array2<f64>, &mut [f64])>,
) -> f64 {
    let n = labels.len();
    let classes = head.nrows();
    let cache = forward_cached(arch, w, x);
    let mut scores = cache.output().dot(&head.t());
    for mut row in scores.rows_mut() {
        row += &ndarray::ArrayView1::from(head_bias);
    }
    let mut total = 0.0;
    let mut d_scores = Array2::<f64>::zeros((n, classes));
    let mut v = vec![0.0; classes.saturating_sub(1)];
    let mut dv = vec![0.0; v.len()];
    for (i, &y) in labels.iter().enumerate() {
        let others = (0..classes).filter(|&c| c != y);
        for (slot, c) in v.iter_mut().zip(others) {
            *slot = scores[[i, y]] - scores[[i, c]];
        }
        total += LossKind::Logistic.value_and_grad(&v, &mut dv);
        let others = (0..classes).filter(|&c| c != y);
        for (g, c) in dv.iter().zip(others) {
            d_scores[[i, y]] += g / n as f64;
            d_scores[[i, c]] -= g / n as f64;
        }
    }
    if let Some((g_w, g_head, g_bias)) = grads {
        *g_head += &d_scores.t().dot(cache.output());
        for (g, d) in g_bias
            .iter_mut()
            .zip(d_scores.sum_axis(ndarray::Axis(0)).iter())
        {
            *g += d;
        }
        let d_rep = d_scores.dot(head);
        backward(arch, w, &cache, d_rep, g_w);
    }
    total / n as f64
}

fn supervised_eval(
    arch: &Architecture,
    w: &[f64],
    head: &Array2<f64>,
    head_bias: &[f64],
    data: &LabeledDataset,
) -> f64 {
    let x = data.inputs().to_owned();
    supervised_loss_and_grad(arch, w, head, head_bias, x, data.labels(), None)
}

/// Supervised baseline: the representation network plus a linear head over
/// all classes, trained deterministically with the multi-class logistic
/// loss. The checkpoint holds the representation network only.
pub fn train_supervised(
    cfg: &TrainConfig,
    data: &LabeledDataset,
    valid: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.objective != TrainObjective::SupervisedBaseline {
        return Err(Error::config(
            "train_supervised needs objective supervised-baseline",
        ));
    }
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let arch = &cfg.architecture;
    for d in std::iter::once(data).chain(valid) {
        if d.input_dim() != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input vs data dimension",
                expected: arch.input_dim(),
                actual: d.input_dim(),
            });
        }
    }
    if cfg.early_stopping != EarlyStopping::Off && valid.is_none() {
        return Err(Error::config("early stopping needs a validation set"));
    }
    let started = Instant::now();
    let classes = data.num_classes();
    let (post0, prior) = init_network(arch, &cfg.init_spec(), cfg.seed)?;
    let n = post0.len();
    let out = arch.output_dim();
    let mut rng = rng_stream(cfg.seed, 1);
    let mut head_rng = rng_stream(cfg.seed, 3);
    // flat vector: [representation weights, head weights (classes x out), head bias]
    let mut params = post0.mu_q.clone();
    for _ in 0..classes * out {
        params.push(HEAD_STD * truncated_normal(&mut head_rng));
    }
    params.extend(std::iter::repeat_n(0.0, classes));
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let split = |p: &[f64]| -> (Vec<f64>, Array2<f64>, Vec<f64>) {
        let w = p[..n].to_vec();
        let head = Array2::from_shape_vec((classes, out), p[n..n + classes * out].to_vec())
            .expect("head shape");
        let bias = p[n + classes * out..].to_vec();
        (w, head, bias)
    };

    let mut record = record_for(cfg, data.len(), None);
    let mut best_w = params[..n].to_vec();
    let mut stopper = Stopper::new(cfg.patience);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.epochs, cfg.lr_decay);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (w, head, bias) = split(&params);
            let x = data.inputs().select(ndarray::Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let mut g_w = vec![0.0; n];
            let mut g_head = Array2::zeros((classes, out));
            let mut g_bias = vec![0.0; classes];
            let loss = supervised_loss_and_grad(
                arch,
                &w,
                &head,
                &bias,
                x,
                &labels,
                Some((&mut g_w, &mut g_head, &mut g_bias)),
            );
            if !loss.is_finite() {
                return Ok(abort(
                    record,
                    format!("non-finite loss at epoch {epoch}"),
                    started,
                ));
            }
            g_w.extend(g_head.iter());
            g_w.extend_from_slice(&g_bias);
            opt.step(&mut params, &g_w, lr)?;
            sum += loss;
            batches += 1;
        }
        let (w, head, bias) = split(&params);
        let det_valid = valid.map(|v| supervised_eval(arch, &w, &head, &bias, v));
        record.metrics.push(EpochMetrics {
            epoch,
            learning_rate: lr,
            objective: sum / batches as f64,
            train_loss: sum / batches as f64,
            divergence: None,
            sigma2_p: prior.sigma2_p,
            b_l: None,
            s_valid: det_valid,
            det_valid,
        });
        record.stopping_epoch = epoch;
        match det_valid.filter(|_| cfg.early_stopping != EarlyStopping::Off) {
            Some(metric) => {
                let (improved, stop) = stopper.observe(epoch, metric);
                if improved {
                    best_w = w;
                    record.best_epoch = epoch;
                }
                if stop {
                    record.early_stopped = true;
                    break;
                }
            }
            None => {
                best_w = w;
                record.best_epoch = epoch;
            }
        }
    }
    record.wall_time_secs = Some(started.elapsed().as_secs_f64());
    let post = PosteriorParams {
        mu_q: best_w,
        log_sigma2_q: post0.log_sigma2_q,
    };
    let config_echo = serde_json::to_value(cfg).map_err(|e| Error::config(e.to_string()))?;
    let ckpt = Checkpoint::new(
        arch.clone(),
        &post,
        &prior,
        cfg.seed,
        record.best_epoch,
        config_echo,
    );
    Ok(TrainOutcome {
        record,
        checkpoint: Some(ckpt),
    })
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::RhoDistribution;
    use crate::data::{sample_contrastive_iid, sample_labeled, LatentClassModel, Split};

    fn model() -> LatentClassModel {
        LatentClassModel::random_gaussian(RhoDistribution::uniform(4), 6, 3.0, 0.5, 11).unwrap()
    }

    fn data(m: usize, seed: u64) -> ContrastiveDataset {
        sample_contrastive_iid(&model(), m, 2, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn base(objective: TrainObjective) -> TrainConfig {
        let mut cfg = TrainConfig::new(objective, Architecture::new(vec![6, 8, 4]).unwrap());
        cfg.epochs = 6;
        cfg.batch_size = 20;
        cfg.learning_rate = 1e-2;
        cfg.early_stopping = EarlyStopping::Off;
        cfg.lambda_exponent = (objective == TrainObjective::Iid).then_some(2);
        cfg
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"objective":"iid","lambda":0.1,"architecture":[2,3]}"#)
                .unwrap();
        assert_eq!(cfg.epochs, 500);
        assert_eq!(cfg.batch_size, 100);
        assert_eq!(cfg.patience, 20);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.initial_prior_variance(), (-8f64).exp());
        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let bad = serde_json::from_str::<TrainConfig>(
            r#"{"objective":"iid","architecture":[2,3],"lamda":1}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn prior_variance_constants() {
        assert_eq!(IID_PRIOR_VARIANCE, (-8f64).exp());
        assert_eq!(NONIID_PRIOR_VARIANCE, (-5f64).exp());
        let cfg = base(TrainObjective::Noniid);
        assert_eq!(cfg.initial_prior_variance(), (-5f64).exp());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = base(TrainObjective::Iid);
        cfg.lambda_exponent = None;
        assert!(cfg.validate().is_err());
        let mut cfg = base(TrainObjective::Iid);
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base(TrainObjective::Iid);
        cfg.prior_variance = Some(0.1);
        assert!(cfg.validate().is_err());
        let mut cfg = base(TrainObjective::Iid);
        cfg.k = Some(3);
        assert!(train(&cfg, &data(20, 0), None).is_err());
    }

    #[test]
    fn lambda_exponent_uses_training_size() {
        let cfg = base(TrainObjective::Iid);
        assert_eq!(cfg.resolve_lambda(1000), Some(0.1));
    }

    #[test]
    fn same_seed_reproduces_the_run() {
        let d = data(100, 1);
        let cfg = base(TrainObjective::Iid);
        let a = train(&cfg, &d, None).unwrap();
        let b = train(&cfg, &d, None).unwrap();
        assert_eq!(a.record.metrics, b.record.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.record.metrics.len(), cfg.epochs);
        assert_eq!(a.record.best_epoch, cfg.epochs);
    }

    #[test]
    fn iid_training_reduces_the_objective() {
        let d = data(400, 2);
        let mut cfg = base(TrainObjective::Iid);
        cfg.epochs = 15;
        let out = train(&cfg, &d, None).unwrap();
        let m = &out.record.metrics;
        assert!(m.last().unwrap().objective < m[0].objective, "{m:?}");
        assert!(out.record.is_completed());
    }

    #[test]
    fn loss_scale_is_absorbed_by_lambda() {
        let d = data(60, 3);
        let mut a = base(TrainObjective::Iid);
        a.lambda_exponent = None;
        a.lambda = Some(0.5);
        let mut b = a.clone();
        b.lambda = Some(0.5 * 4.0);
        b.loss_scale = 4.0;
        let ra = train(&a, &d, None).unwrap();
        let rb = train(&b, &d, None).unwrap();
        let (ca, cb) = (ra.checkpoint.unwrap(), rb.checkpoint.unwrap());
        for (x, y) in ca.mu_q.iter().zip(&cb.mu_q) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ca.sigma2_p - cb.sigma2_p).abs() < 1e-12 * ca.sigma2_p);
    }

    #[test]
    fn prior_variance_stays_below_limit() {
        let d = data(60, 4);
        let mut cfg = base(TrainObjective::Iid);
        // start close to the limit with a large step so the clamp fires
        cfg.c = 1e-3;
        cfg.prior_variance = Some(cfg.c * (-2.0 / cfg.b).exp());
        cfg.learning_rate = 0.5;
        let out = train(&cfg, &d, None).unwrap();
        let limit = cfg.c.ln() - 1.0 / cfg.b;
        for m in &out.record.metrics {
            assert!(m.sigma2_p.ln() <= limit + 1e-12);
        }
    }

    #[test]
    fn noniid_training_runs_and_tracks_b_l() {
        let d = data(100, 5);
        let cfg = base(TrainObjective::Noniid);
        let out = train(&cfg, &d, None).unwrap();
        assert!(out.record.is_completed());
        for m in &out.record.metrics {
            assert!(m.b_l.unwrap() > 0.0);
            assert!(m.divergence.unwrap().is_finite());
        }
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let d = data(100, 6);
        let v = data(50, 7);
        let mut cfg = base(TrainObjective::Iid);
        cfg.epochs = 30;
        cfg.patience = 1;
        cfg.early_stopping = EarlyStopping::DetValid;
        let out = train(&cfg, &d, Some(&v)).unwrap();
        let r = &out.record;
        let best = r.best_metrics().unwrap().det_valid.unwrap();
        for m in &r.metrics {
            assert!(m.det_valid.unwrap() >= best);
        }
        if r.early_stopped {
            assert_eq!(r.stopping_epoch, r.best_epoch + 1);
        }
        assert_eq!(out.checkpoint.unwrap().epoch, r.best_epoch);
    }

    #[test]
    fn improving_metric_never_stops() {
        let mut s = Stopper::new(2);
        for e in 1..=10 {
            assert_eq!(s.observe(e, 1.0 / e as f64), (true, false));
        }
        assert_eq!(s.observe(11, 1.0), (false, false));
        assert_eq!(s.observe(12, 1.0), (false, true));
    }

    #[test]
    fn early_stopping_without_validation_is_an_error() {
        let mut cfg = base(TrainObjective::Iid);
        cfg.early_stopping = EarlyStopping::SValid;
        assert!(train(&cfg, &data(20, 0), None).is_err());
    }

    #[test]
    fn erm_baseline_keeps_variances() {
        let d = data(80, 8);
        let cfg = base(TrainObjective::ErmBaseline);
        let out = train(&cfg, &d, None).unwrap();
        let c = out.checkpoint.unwrap();
        assert!(c.log_sigma2_q.iter().all(|&l| l == IID_PRIOR_VARIANCE.ln()));
        assert_eq!(c.sigma2_p, IID_PRIOR_VARIANCE);
        assert_ne!(c.mu_q, c.mu_p);
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let (post, _) = init_network(&arch, &InitSpec::fan_in(&arch, 1e-3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = Array2::from_shape_fn((3, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let bias = vec![0.1, -0.2, 0.05];
        let x = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let labels = vec![0, 1, 2, 1, 0];
        let mut g_w = vec![0.0; post.len()];
        let mut g_h = Array2::zeros((3, 2));
        let mut g_b = vec![0.0; 3];
        supervised_loss_and_grad(
            &arch,
            &post.mu_q,
            &head,
            &bias,
            x.clone(),
            &labels,
            Some((&mut g_w, &mut g_h, &mut g_b)),
        );
        let f = |w: &[f64], h: &Array2<f64>, b: &[f64]| {
            supervised_loss_and_grad(&arch, w, h, b, x.clone(), &labels, None)
        };
        let step = 1e-6;
        for i in 0..post.len() {
            let (mut p, mut m) = (post.mu_q.clone(), post.mu_q.clone());
            p[i] += step;
            m[i] -= step;
            let fd = (f(&p, &head, &bias) - f(&m, &head, &bias)) / (2.0 * step);
            assert!((fd - g_w[i]).abs() < 1e-6, "w[{i}] {fd} vs {}", g_w[i]);
        }
        for r in 0..3 {
            for c in 0..2 {
                let (mut p, mut m) = (head.clone(), head.clone());
                p[[r, c]] += step;
                m[[r, c]] -= step;
                let fd = (f(&post.mu_q, &p, &bias) - f(&post.mu_q, &m, &bias)) / (2.0 * step);
                assert!((fd - g_h[[r, c]]).abs() < 1e-6);
            }
            let (mut p, mut m) = (bias.clone(), bias.clone());
            p[r] += step;
            m[r] -= step;
            let fd = (f(&post.mu_q, &head, &p) - f(&post.mu_q, &head, &m)) / (2.0 * step);
            assert!((fd - g_b[r]).abs() < 1e-6);
        }
    }

    #[test]
    fn supervised_baseline_learns_separable_classes() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let train_set = sample_labeled(&m, 400, Split::Train, &mut rng).unwrap();
        let valid_set = sample_labeled(&m, 100, Split::Valid, &mut rng).unwrap();
        let mut cfg = base(TrainObjective::SupervisedBaseline);
        cfg.epochs = 20;
        cfg.early_stopping = EarlyStopping::DetValid;
        let out = train_supervised(&cfg, &train_set, Some(&valid_set)).unwrap();
        let ms = &out.record.metrics;
        assert!(
            ms.iter()
                .map(|m| m.det_valid.unwrap())
                .fold(f64::INFINITY, f64::min)
                < ms[0].det_valid.unwrap()
        );
        let ckpt = out.checkpoint.unwrap();
        assert_eq!(ckpt.arch, cfg.architecture);
        let reps = crate::network::forward_batch(&ckpt.arch, &ckpt.mu_q, valid_set.inputs().view());
        assert_eq!(reps.ncols(), 4);
    }
}
