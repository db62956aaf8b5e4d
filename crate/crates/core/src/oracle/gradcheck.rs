//! Central finite differences of the training objectives against their
//! analytic gradients.
//!
//! The objective value is recomputed here with a naive forward pass and
//! direct loss and divergence formulas. Probes whose perturbation flips a
//! ReLU or the hinge's active margin are skipped and counted.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::discrete::oracle_loss;
use super::divergence::{oracle_chi2_log1p, oracle_kl};
use crate::bounds::RhoDistribution;
use crate::data::{sample_contrastive_iid, ContrastiveDataset, LatentClassModel};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{init_network, Architecture, InitSpec, PosteriorParams, PriorParams};
use crate::objective::{Objective, ObjectiveKind};

pub const FD_STEP: f64 = 1e-5;

/// Everything the check needs, with the weight noise frozen.
#[derive(Debug, Clone)]
pub struct FdSetup {
    pub arch: Architecture,
    pub post: PosteriorParams,
    pub prior: PriorParams,
    pub data: ContrastiveDataset,
    pub indices: Vec<usize>,
    pub eps: Vec<f64>,
    pub objective: Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdObjective {
    Iid,
    Noniid,
}

impl FdSetup {
    /// A small random network (fewer than 200 parameters) on a few tuples.
    pub fn random(kind: FdObjective, loss: LossKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model =
            LatentClassModel::random_gaussian(RhoDistribution::uniform(3), 4, 1.0, 0.5, seed)?;
        let data = sample_contrastive_iid(&model, 6, 2, 2, &mut rng)?;
        let arch = Architecture::new(vec![4, 6, 3])?;
        let prior_var = match kind {
            FdObjective::Iid => (-4f64).exp(),
            FdObjective::Noniid => (-3f64).exp(),
        };
        let (mut post, prior) = init_network(&arch, &InitSpec::fan_in(&arch, prior_var), seed)?;
        for (m, l) in post.mu_q.iter_mut().zip(post.log_sigma2_q.iter_mut()) {
            *m += 0.05 * rng.sample::<f64, _>(StandardNormal);
            // stay clear of the chi-square guard floor
            *l += 0.2 * rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
        }
        let eps = (0..post.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let objective = Objective {
            kind: match kind {
                FdObjective::Iid => ObjectiveKind::Iid { lambda: 0.01 },
                FdObjective::Noniid => ObjectiveKind::Noniid { t: 2, b_l: 3.0 },
            },
            loss,
            m: 1000,
            b: 100.0,
            c: 0.1,
            delta: 0.05,
            loss_scale: 1.0,
        };
        Ok(Self {
            arch,
            post,
            prior,
            indices: (0..data.len()).collect(),
            data,
            eps,
            objective,
        })
    }
}

/// Naive forward pass; returns the output and the sign pattern of every
/// hidden pre-activation.
fn naive_forward(arch: &Architecture, w: &[f64], x: &[f64], pattern: &mut Vec<bool>) -> Vec<f64> {
    let sizes = arch.layer_sizes();
    let mut act = x.to_vec();
    let mut offset = 0;
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let weights = &w[offset..offset + n_in * n_out];
        let bias = &w[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = bias[o];
            for i in 0..n_in {
                s += weights[o * n_in + i] * act[i];
            }
            z[o] = s;
        }
        if l + 2 < sizes.len() {
            for v in z.iter_mut() {
                pattern.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        act = z;
    }
    act
}

/// Objective value recomputed from scratch, plus the discrete state
/// (activation signs, hinge argmin and activity) at this point.
fn oracle_objective(
    s: &FdSetup,
    post: &PosteriorParams,
    prior: &PriorParams,
) -> (f64, Vec<bool>, Vec<usize>) {
    let w: Vec<f64> = post
        .mu_q
        .iter()
        .zip(&post.log_sigma2_q)
        .zip(&s.eps)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    let mut pattern = Vec::new();
    let mut hinge_state = Vec::new();
    let (block, k) = (s.data.block_size(), s.data.k());
    let mut total = 0.0;
    for &i in &s.indices {
        let t = &s.data.tuples()[i];
        let rep = |r: usize, pattern: &mut Vec<bool>| {
            naive_forward(&s.arch, &w, &s.data.row(r).to_vec(), pattern)
        };
        let a = rep(t.anchor, &mut pattern);
        let d = a.len();
        let mut pos = vec![0.0; d];
        for &r in &t.positives {
            for (p, v) in pos.iter_mut().zip(rep(r, &mut pattern)) {
                *p += v / block as f64;
            }
        }
        let mut v = Vec::with_capacity(k);
        for blk in &t.negatives {
            let mut neg = vec![0.0; d];
            for &r in blk {
                for (n, x) in neg.iter_mut().zip(rep(r, &mut pattern)) {
                    *n += x / block as f64;
                }
            }
            v.push((0..d).map(|j| a[j] * (pos[j] - neg[j])).sum::<f64>());
        }
        if s.objective.loss == LossKind::Hinge {
            let (arg, min) =
                v.iter().enumerate().fold(
                    (0, f64::INFINITY),
                    |acc, (j, &x)| if x < acc.1 { (j, x) } else { acc },
                );
            hinge_state.push(arg);
            hinge_state.push(usize::from(min < 1.0));
        }
        total += oracle_loss(s.objective.loss, &v);
    }
    let l_hat = total / s.indices.len() as f64 / s.objective.loss_scale;
    let o = &s.objective;
    let j = o.b * (o.c / prior.sigma2_p).ln();
    let value = match o.kind {
        ObjectiveKind::Iid { lambda } => {
            lambda * o.m as f64 * l_hat + oracle_kl(post, prior) + 2.0 * j.ln()
        }
        ObjectiveKind::Noniid { t, b_l } => {
            let moment = b_l * b_l * (1.0 + 8.0 * t as f64) / (24.0 * o.m as f64 * o.delta);
            l_hat
                + std::f64::consts::PI
                    * j
                    * moment.sqrt()
                    * (0.5 * oracle_chi2_log1p(post, prior)).exp()
        }
        ObjectiveKind::Erm => l_hat,
    };
    (value, pattern, hinge_state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum FdStatus {
    Checked,
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdResult {
    pub status: FdStatus,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes dropped because the perturbation crossed a kink.
    pub kinks: usize,
    /// Relative difference between the oracle value and the main-path value.
    pub value_rel_diff: f64,
}

/// Relative error with a floor so vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `n_probes` randomly chosen coordinates over `mu_Q`,
/// `ln sigma2_Q` and `ln sigma2_P`.
pub fn finite_diff_check<R: Rng + ?Sized>(
    s: &FdSetup,
    n_probes: usize,
    rng: &mut R,
) -> Result<FdResult> {
    if s.post.log_sigma2_q.iter().any(|l| l.exp() == 0.0) || s.prior.sigma2_p == 0.0 {
        return Ok(FdResult {
            status: FdStatus::Skipped {
                reason:
                    "zero posterior or prior variance: the objective is not differentiable there"
                        .into(),
            },
            max_rel_err: 0.0,
            probes: 0,
            kinks: 0,
            value_rel_diff: 0.0,
        });
    }
    let n = s.post.len();
    if s.eps.len() != n {
        return Err(Error::DimensionMismatch {
            context: "frozen weight noise",
            expected: n,
            actual: s.eps.len(),
        });
    }
    let main = s
        .objective
        .value_and_grads(&s.arch, &s.post, &s.prior, &s.data, &s.indices, &s.eps)?;
    let (base, base_pattern, base_hinge) = oracle_objective(s, &s.post, &s.prior);
    let value_rel_diff = rel_err(base, main.value, 1e-12);
    // roundoff of a central difference scales with the objective's magnitude
    let floor = 1e-6 * base.abs().max(1.0);

    let mut max_rel = 0.0f64;
    let (mut probes, mut kinks) = (0, 0);
    for _ in 0..n_probes {
        let coord = rng.gen_range(0..2 * n + 1);
        let eval = |delta: f64| {
            let mut post = s.post.clone();
            let mut prior = s.prior.clone();
            if coord < n {
                post.mu_q[coord] += delta;
            } else if coord < 2 * n {
                post.log_sigma2_q[coord - n] += delta;
            } else {
                prior.sigma2_p = (prior.sigma2_p.ln() + delta).exp();
            }
            oracle_objective(s, &post, &prior)
        };
        let (plus, pp, hp) = eval(FD_STEP);
        let (minus, pm, hm) = eval(-FD_STEP);
        if pp != base_pattern || pm != base_pattern || hp != base_hinge || hm != base_hinge {
            kinks += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let analytic = if coord < n {
            main.grads.mu_q[coord]
        } else if coord < 2 * n {
            main.grads.log_sigma2_q[coord - n]
        } else {
            main.grads.log_sigma2_p
        };
        max_rel = max_rel.max(rel_err(fd, analytic, floor));
        probes += 1;
    }
    Ok(FdResult {
        status: FdStatus::Checked,
        max_rel_err: max_rel,
        probes,
        kinks,
        value_rel_diff,
    })
}
