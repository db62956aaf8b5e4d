//! Independent KL and chi-square evaluations for diagonal Gaussians, and
//! Monte Carlo estimates from posterior draws.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::network::{PosteriorParams, PriorParams};

/// `KL(Q || P)` summed coordinate by coordinate.
pub fn oracle_kl(post: &PosteriorParams, prior: &PriorParams) -> f64 {
    let sp = prior.sigma2_p;
    post.mu_q
        .iter()
        .zip(&post.log_sigma2_q)
        .zip(&prior.mu_p)
        .map(|((mq, lq), mp)| {
            let sq = lq.exp();
            0.5 * (sq / sp + (mq - mp).powi(2) / sp - 1.0 + sp.ln() - lq)
        })
        .sum()
}

/// `ln(1 + chi2)` with `1 + chi2 = prod_i s_q / sqrt(s_p (2 s_q - s_p)) exp((mu_q - mu_p)^2 / (2 s_q - s_p))`,
/// i.e. `integral P^2 / Q`. Coordinates with `s_q` below `s_p/2 (1 + 1e-6)`
/// are lifted to that floor first.
pub fn oracle_chi2_log1p(post: &PosteriorParams, prior: &PriorParams) -> f64 {
    let sp = prior.sigma2_p;
    let floor = 0.5 * sp * (1.0 + 1e-6);
    post.mu_q
        .iter()
        .zip(&post.log_sigma2_q)
        .zip(&prior.mu_p)
        .map(|((mq, lq), mp)| {
            let raw = lq.exp();
            let (sq, gap) = if raw < floor {
                (floor, sp * 1e-6)
            } else {
                (raw, 2.0 * raw - sp)
            };
            sq.ln() - 0.5 * sp.ln() - 0.5 * gap.ln() + (mq - mp).powi(2) / gap
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McDivergences {
    pub kl: f64,
    pub kl_std_error: f64,
    pub chi2: f64,
    pub chi2_std_error: f64,
    pub samples: usize,
}

/// `KL = E_Q[ln q - ln p]` and `chi2 = E_Q[(p/q)^2] - 1` from `n` draws of `Q`.
pub fn mc_divergences<R: Rng + ?Sized>(
    post: &PosteriorParams,
    prior: &PriorParams,
    n: usize,
    rng: &mut R,
) -> McDivergences {
    let sp = prior.sigma2_p;
    let (mut s_kl, mut s_kl2, mut s_c, mut s_c2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0; // ln q(w) - ln p(w)
        for ((mq, lq), mp) in post.mu_q.iter().zip(&post.log_sigma2_q).zip(&prior.mu_p) {
            let sq = lq.exp();
            let z: f64 = rng.sample(StandardNormal);
            let w = mq + sq.sqrt() * z;
            log_ratio += -0.5 * lq - 0.5 * z * z + 0.5 * sp.ln() + (w - mp).powi(2) / (2.0 * sp);
        }
        let c = (-2.0 * log_ratio).exp();
        s_kl += log_ratio;
        s_kl2 += log_ratio * log_ratio;
        s_c += c;
        s_c2 += c * c;
    }
    let nf = n as f64;
    let se = |s: f64, s2: f64| {
        let mean = s / nf;
        let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        (var / nf).sqrt()
    };
    McDivergences {
        kl: s_kl / nf,
        kl_std_error: se(s_kl, s_kl2),
        chi2: s_c / nf - 1.0,
        chi2_std_error: se(s_c, s_c2),
        samples: n,
    }
}

/// Random posterior/prior pair whose chi-square importance weights have
/// finite variance: `s_q` within `[0.85, 1.3] s_p` and small mean shifts.
pub fn random_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (PosteriorParams, PriorParams) {
    let sp = rng.gen_range(-6.0f64..-2.0).exp();
    let mu_p: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
        .collect();
    let mu_q = mu_p
        .iter()
        .map(|m| m + 0.15 * sp.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let log_sigma2_q = (0..n)
        .map(|_| (sp * rng.gen_range(0.85..1.3)).ln())
        .collect();
    (
        PosteriorParams { mu_q, log_sigma2_q },
        PriorParams { mu_p, sigma2_p: sp },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let post = PosteriorParams {
            mu_q: vec![0.3, -1.0],
            log_sigma2_q: vec![-3.0, -3.0],
        };
        let prior = PriorParams {
            mu_p: vec![0.3, -1.0],
            sigma2_p: (-3f64).exp(),
        };
        assert!(oracle_kl(&post, &prior).abs() < 1e-15);
        assert!(oracle_chi2_log1p(&post, &prior).abs() < 1e-15);
    }

    #[test]
    fn equal_variance_shift_has_known_chi2() {
        // chi2 of N(d, s) vs N(0, s) is e^{d^2/s} - 1
        let post = PosteriorParams {
            mu_q: vec![0.2],
            log_sigma2_q: vec![0.25f64.ln()],
        };
        let prior = PriorParams {
            mu_p: vec![0.0],
            sigma2_p: 0.25,
        };
        assert!((oracle_chi2_log1p(&post, &prior) - 0.16).abs() < 1e-14);
        assert!((oracle_kl(&post, &prior) - 0.08).abs() < 1e-14);
    }

    #[test]
    fn monte_carlo_agrees_with_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (post, prior) = random_pair(5, &mut rng);
        let mc = mc_divergences(&post, &prior, 50_000, &mut rng);
        assert!((mc.kl - oracle_kl(&post, &prior)).abs() < 4.0 * mc.kl_std_error);
        let chi2 = oracle_chi2_log1p(&post, &prior).exp_m1();
        assert!((mc.chi2 - chi2).abs() < 4.0 * mc.chi2_std_error);
    }
}
