//! Training objectives built from PAC-Bayes bounds.
//!
//! With `s = ln sigma2_P` and `j = b (ln c - s)`:
//!
//! * iid: `lambda m L_hat + KL(Q || P) + 2 ln j`
//! * dependent data: `L_hat + pi j sqrt(B_l^2 (1 + 8T) / (24 m delta)) sqrt(chi2 + 1)`
//!
//! `L_hat` is a one-sample estimate on a minibatch: weights
//! `w = mu_Q + sigma_Q * eps` for a given `eps`.

use serde::{Deserialize, Serialize};

use crate::contrastive::batch_loss_and_grad;
use crate::data::ContrastiveDataset;
use crate::divergences::{chi2_log_grad, kl_gaussian_grad};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{weights_from_noise, Architecture, PosteriorParams, PriorParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Iid {
        lambda: f64,
    },
    Noniid {
        t: usize,
        b_l: f64,
    },
    /// Plain empirical loss of the stochastic network, no divergence term.
    Erm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub loss: LossKind,
    /// Training-set size `m`.
    pub m: usize,
    pub b: f64,
    pub c: f64,
    pub delta: f64,
    /// The empirical loss is divided by this before entering the objective.
    pub loss_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub mu_q: Vec<f64>,
    pub log_sigma2_q: Vec<f64>,
    pub log_sigma2_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Minibatch mean loss under the sampled weights (unscaled).
    pub empirical_loss: f64,
    /// KL or chi-square, depending on the objective.
    pub divergence: f64,
    pub divergence_overflow: bool,
    pub grads: ObjectiveGrads,
}

impl Objective {
    /// Largest prior log-variance keeping `j >= 1`.
    pub fn max_log_sigma2_p(&self) -> f64 {
        self.c.ln() - 1.0 / self.b
    }

    pub fn j(&self, log_sigma2_p: f64) -> f64 {
        self.b * (self.c.ln() - log_sigma2_p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m must be >= 1"));
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
        match self.kind {
            ObjectiveKind::Iid { lambda } if !(lambda > 0.0) => {
                Err(Error::config(format!("lambda must be > 0, got {lambda}")))
            }
            ObjectiveKind::Noniid { b_l, .. } if !(b_l > 0.0) => {
                Err(Error::config(format!("B_l must be > 0, got {b_l}")))
            }
            _ => Ok(()),
        }
    }

    /// Objective value and gradients on the tuples `indices`, with the weight
    /// noise `eps` held fixed.
    pub fn value_and_grads(
        &self,
        arch: &Architecture,
        post: &PosteriorParams,
        prior: &PriorParams,
        data: &ContrastiveDataset,
        indices: &[usize],
        eps: &[f64],
    ) -> Result<ObjectiveValue> {
        let n = post.len();
        if eps.len() != n {
            return Err(Error::DimensionMismatch {
                context: "weight noise",
                expected: n,
                actual: eps.len(),
            });
        }
        let sample = weights_from_noise(post, eps.to_vec());
        let (raw_loss, g_w) = batch_loss_and_grad(arch, &sample.w, data, indices, self.loss);
        let l_hat = raw_loss / self.loss_scale;
        let s = prior.sigma2_p.ln();
        let log_c_minus_s = self.c.ln() - s;

        // d L_hat / d mu = g_w, d L_hat / d ln sigma2_q = g_w eps sigma / 2
        let loss_grad = |weight: f64| -> (Vec<f64>, Vec<f64>) {
            let f = weight / self.loss_scale;
            let mu: Vec<f64> = g_w.iter().map(|g| f * g).collect();
            let ls = g_w
                .iter()
                .zip(eps)
                .zip(&post.log_sigma2_q)
                .map(|((g, e), l)| f * g * e * 0.5 * (0.5 * l).exp())
                .collect();
            (mu, ls)
        };

        match self.kind {
            ObjectiveKind::Iid { lambda } => {
                let scale = lambda * self.m as f64;
                let (kl, kg) = kl_gaussian_grad(post, prior)?;
                let (mut g_mu, mut g_ls) = loss_grad(scale);
                add_into(&mut g_mu, &kg.mu_q);
                add_into(&mut g_ls, &kg.log_sigma2_q);
                let j = self.b * log_c_minus_s;
                let value = scale * l_hat + kl + 2.0 * j.ln();
                Ok(ObjectiveValue {
                    value,
                    empirical_loss: raw_loss,
                    divergence: kl,
                    divergence_overflow: false,
                    grads: ObjectiveGrads {
                        mu_q: g_mu,
                        log_sigma2_q: g_ls,
                        log_sigma2_p: kg.log_sigma2_p - 2.0 / log_c_minus_s,
                    },
                })
            }
            ObjectiveKind::Noniid { t, b_l } => {
                let (chi, cg) = chi2_log_grad(post, prior)?;
                let (mut g_mu, mut g_ls) = loss_grad(1.0);
                let root_a = (b_l * b_l * (1.0 + 8.0 * t as f64)
                    / (24.0 * self.m as f64 * self.delta))
                    .sqrt();
                let j = self.b * log_c_minus_s;
                if chi.overflow {
                    return Ok(ObjectiveValue {
                        value: f64::INFINITY,
                        empirical_loss: raw_loss,
                        divergence: chi.value,
                        divergence_overflow: true,
                        grads: ObjectiveGrads {
                            mu_q: g_mu,
                            log_sigma2_q: g_ls,
                            log_sigma2_p: 0.0,
                        },
                    });
                }
                // penalty = pi j root_a exp(S / 2), S = ln(chi2 + 1)
                let e = (0.5 * chi.log_one_plus).exp();
                let penalty = std::f64::consts::PI * j * root_a * e;
                let half = 0.5 * penalty;
                for (g, c) in g_mu.iter_mut().zip(&cg.mu_q) {
                    *g += half * c;
                }
                for (g, c) in g_ls.iter_mut().zip(&cg.log_sigma2_q) {
                    *g += half * c;
                }
                let d_j = -self.b;
                let g_sp = std::f64::consts::PI * root_a * e * d_j + half * cg.log_sigma2_p;
                Ok(ObjectiveValue {
                    value: l_hat + penalty,
                    empirical_loss: raw_loss,
                    divergence: chi.value,
                    divergence_overflow: false,
                    grads: ObjectiveGrads {
                        mu_q: g_mu,
                        log_sigma2_q: g_ls,
                        log_sigma2_p: g_sp,
                    },
                })
            }
            ObjectiveKind::Erm => {
                let (g_mu, g_ls) = loss_grad(1.0);
                Ok(ObjectiveValue {
                    value: l_hat,
                    empirical_loss: raw_loss,
                    divergence: 0.0,
                    divergence_overflow: false,
                    grads: ObjectiveGrads {
                        mu_q: g_mu,
                        log_sigma2_q: g_ls,
                        log_sigma2_p: 0.0,
                    },
                })
            }
        }
    }
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
