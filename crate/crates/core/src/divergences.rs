//! Closed-form divergences between the diagonal Gaussian posterior and the
//! isotropic Gaussian prior, with gradients for the training objectives.
//!
//! The chi-square term follows the full Gaussian closed form
//!
//! ```text
//! chi2 = |diag(s2_q)| / s2_p^N / sqrt(|2/s2_p diag(s2_q) - I|)
//!        * exp(1/2 (||2/s2_p mu_p - diag(s2_q)^-1 mu_q||^2_{A^-1}
//!                   + ||mu_q||^2_{diag(s2_q)^-1} - 2/s2_p ||mu_p||^2)) - 1,
//! A = 2/s2_p I - diag(s2_q)^-1,
//! ```
//!
//! which factorises per coordinate. Each factor is evaluated in log space as
//! `ln(q/p) - 1/2 ln(2q/p - 1) + (mu_q - mu_p)^2 / (2q - p)` and the sum is
//! exponentiated once. `A` is positive definite only when every `q > p/2`,
//! so posterior variances below that are raised to `p/2 (1 + GUARD_EPS)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{PosteriorParams, PriorParams};

/// Relative margin above `sigma2_p / 2` used by the variance guard.
pub const GUARD_EPS: f64 = 1e-6;

/// Largest argument for which `exp` stays finite.
const MAX_EXP_ARG: f64 = 709.0;

fn check_dims(q: &PosteriorParams, p: &PriorParams) -> Result<()> {
    if q.mu_q.len() != q.log_sigma2_q.len() {
        return Err(Error::DimensionMismatch {
            context: "posterior variance vector",
            expected: q.mu_q.len(),
            actual: q.log_sigma2_q.len(),
        });
    }
    if q.mu_q.len() != p.mu_p.len() {
        return Err(Error::DimensionMismatch {
            context: "prior mean vector",
            expected: q.mu_q.len(),
            actual: p.mu_p.len(),
        });
    }
    if !(p.sigma2_p > 0.0) || !p.sigma2_p.is_finite() {
        return Err(Error::Numeric(format!(
            "prior variance must be positive, got {}",
            p.sigma2_p
        )));
    }
    Ok(())
}

/// Gradients of a divergence with respect to the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGrad {
    pub mu_q: Vec<f64>,
    pub log_sigma2_q: Vec<f64>,
    /// Derivative with respect to `ln sigma2_p`.
    pub log_sigma2_p: f64,
}

/// `KL(Q || P) = 1/2 (|mu_q - mu_p|^2 / p - N + |s2_q|_1 / p + N ln p - sum ln s2_q)`.
pub fn kl_gaussian(q: &PosteriorParams, p: &PriorParams) -> Result<f64> {
    check_dims(q, p)?;
    if q.log_sigma2_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "posterior variances must be positive and finite".into(),
        ));
    }
    let n = q.len() as f64;
    let sp = p.sigma2_p;
    let mut sq_dist = 0.0;
    let mut trace = 0.0;
    let mut log_det_q = 0.0;
    for ((&mq, &ls), &mp) in q.mu_q.iter().zip(&q.log_sigma2_q).zip(&p.mu_p) {
        let d = mq - mp;
        sq_dist += d * d;
        trace += ls.exp();
        log_det_q += ls;
    }
    let kl = 0.5 * (sq_dist / sp - n + trace / sp + n * sp.ln() - log_det_q);
    // rounding can push the identical-distribution case a hair below zero
    Ok(kl.max(0.0))
}

pub fn kl_gaussian_grad(q: &PosteriorParams, p: &PriorParams) -> Result<(f64, DivergenceGrad)> {
    let kl = kl_gaussian(q, p)?;
    let inv_p = 1.0 / p.sigma2_p;
    let n = q.len() as f64;
    let mut g_mu = Vec::with_capacity(q.len());
    let mut g_ls = Vec::with_capacity(q.len());
    let mut sq_dist = 0.0;
    let mut trace = 0.0;
    for ((&mq, &ls), &mp) in q.mu_q.iter().zip(&q.log_sigma2_q).zip(&p.mu_p) {
        let d = mq - mp;
        sq_dist += d * d;
        let s2 = ls.exp();
        trace += s2;
        g_mu.push(d * inv_p);
        g_ls.push(0.5 * (s2 * inv_p - 1.0));
    }
    let g_sp = 0.5 * (n - (sq_dist + trace) * inv_p);
    Ok((
        kl,
        DivergenceGrad {
            mu_q: g_mu,
            log_sigma2_q: g_ls,
            log_sigma2_p: g_sp,
        },
    ))
}

/// Smallest posterior variance allowed by the guard.
pub fn guard_floor(sigma2_p: f64) -> f64 {
    0.5 * sigma2_p * (1.0 + GUARD_EPS)
}

/// Raises every variance below the guard floor (just above `sigma2_p / 2`,
/// where the divergence blows up) to the floor.
pub fn guard_variances(sigma2_q: &[f64], sigma2_p: f64) -> Vec<f64> {
    let floor = guard_floor(sigma2_p);
    sigma2_q
        .iter()
        .map(|&v| if v < floor { floor } else { v })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Value {
    /// `chi2(Q || P)`; `+inf` when `overflow` is set.
    pub value: f64,
    /// `ln(chi2 + 1)`, finite even when `value` overflows.
    pub log_one_plus: f64,
    pub overflow: bool,
    /// Number of coordinates raised by the variance guard.
    pub guarded: usize,
}

/// Guarded posterior variance and `2 q - p` for one coordinate. On the floor
/// the difference is formed exactly as `p * eps` instead of by cancellation.
fn guarded_variance(log_sigma2: f64, sp: f64) -> (f64, f64, bool) {
    let raw = log_sigma2.exp();
    let floor = guard_floor(sp);
    if raw >= floor {
        (raw, 2.0 * raw - sp, false)
    } else {
        (floor, sp * GUARD_EPS, true)
    }
}

fn chi2_factor_log(d: f64, q: f64, denom: f64, p: f64) -> f64 {
    (q / p).ln() - 0.5 * (denom / p).ln() + d * d / denom
}

pub fn chi2_gaussian(q: &PosteriorParams, p: &PriorParams) -> Result<Chi2Value> {
    check_dims(q, p)?;
    let sp = p.sigma2_p;
    let mut guarded = 0;
    let mut log_sum = 0.0;
    for ((&mq, &ls), &mp) in q.mu_q.iter().zip(&q.log_sigma2_q).zip(&p.mu_p) {
        let (s2, denom, is_guarded) = guarded_variance(ls, sp);
        guarded += is_guarded as usize;
        log_sum += chi2_factor_log(mq - mp, s2, denom, sp);
    }
    Ok(chi2_from_log(log_sum, guarded))
}

fn chi2_from_log(log_sum: f64, guarded: usize) -> Chi2Value {
    if !log_sum.is_finite() || log_sum > MAX_EXP_ARG {
        log::warn!("chi-square divergence overflows (ln(chi2 + 1) = {log_sum})");
        return Chi2Value {
            value: f64::INFINITY,
            log_one_plus: log_sum,
            overflow: true,
            guarded,
        };
    }
    Chi2Value {
        value: log_sum.exp_m1().max(0.0),
        log_one_plus: log_sum,
        overflow: false,
        guarded,
    }
}

/// `ln(chi2 + 1)` and its gradient. Guarded coordinates have zero gradient
/// with respect to their own log-variance and follow the prior variance.
pub fn chi2_log_grad(q: &PosteriorParams, p: &PriorParams) -> Result<(Chi2Value, DivergenceGrad)> {
    check_dims(q, p)?;
    let sp = p.sigma2_p;
    let n = q.len();
    let mut g_mu = Vec::with_capacity(n);
    let mut g_ls = Vec::with_capacity(n);
    let mut g_sp = 0.0;
    let mut guarded = 0;
    let mut log_sum = 0.0;
    for ((&mq, &ls), &mp) in q.mu_q.iter().zip(&q.log_sigma2_q).zip(&p.mu_p) {
        let (s2, denom, is_guarded) = guarded_variance(ls, sp);
        let d = mq - mp;
        log_sum += chi2_factor_log(d, s2, denom, sp);

        let r = d / denom;
        g_mu.push(2.0 * r);
        // partial derivatives of the per-coordinate log factor
        let d_q = 1.0 / s2 - 1.0 / denom - 2.0 * r * r;
        let d_p = (sp - s2) / (sp * denom) + r * r;
        if is_guarded {
            guarded += 1;
            g_ls.push(0.0);
            g_sp += sp * (d_p + d_q * 0.5 * (1.0 + GUARD_EPS));
        } else {
            g_ls.push(d_q * s2);
            g_sp += sp * d_p;
        }
    }
    Ok((
        chi2_from_log(log_sum, guarded),
        DivergenceGrad {
            mu_q: g_mu,
            log_sigma2_q: g_ls,
            log_sigma2_p: g_sp,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(mu: &[f64], s2: &[f64]) -> PosteriorParams {
        PosteriorParams {
            mu_q: mu.to_vec(),
            log_sigma2_q: s2.iter().map(|v| v.ln()).collect(),
        }
    }

    fn prior(mu: &[f64], s2: f64) -> PriorParams {
        PriorParams {
            mu_p: mu.to_vec(),
            sigma2_p: s2,
        }
    }

    /// Literal evaluation of the matrix closed form (diagonal matrices as vectors).
    fn chi2_matrix_form(mu_q: &[f64], s2_q: &[f64], mu_p: &[f64], sp: f64) -> f64 {
        let n = mu_q.len() as f64;
        let det_q: f64 = s2_q.iter().product();
        let det_m: f64 = s2_q.iter().map(|&q| 2.0 / sp * q - 1.0).product();
        let prefactor = det_q / sp.powf(n) / det_m.sqrt();
        let mut quad = 0.0;
        let mut maha_q = 0.0;
        let mut norm_p = 0.0;
        for i in 0..mu_q.len() {
            let a = 2.0 / sp - 1.0 / s2_q[i];
            let v = 2.0 / sp * mu_p[i] - mu_q[i] / s2_q[i];
            quad += v * v / a;
            maha_q += mu_q[i] * mu_q[i] / s2_q[i];
            norm_p += mu_p[i] * mu_p[i];
        }
        prefactor * (0.5 * (quad + maha_q - 2.0 / sp * norm_p)).exp() - 1.0
    }

    #[test]
    fn kl_identical_is_zero() {
        let q = post(&[0.3, -1.0, 2.0], &[0.5, 0.5, 0.5]);
        let p = prior(&[0.3, -1.0, 2.0], 0.5);
        assert!(kl_gaussian(&q, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = post(&[1.0], &[1.0]);
        let p = prior(&[0.0], 1.0);
        assert!((kl_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_unit_shift_matches_quadrature() {
        // integrate q ln(q/p) on a fine grid
        let (a, b, n) = (-12.0, 14.0, 200_000);
        let h = (b - a) / n as f64;
        let lq = |x: f64| -0.5 * (x - 1.0) * (x - 1.0) - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let lp = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let integral: f64 = (0..=n)
            .map(|i| {
                let x = a + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * lq(x).exp() * (lq(x) - lp(x))
            })
            .sum::<f64>()
            * h;
        assert!((integral - 0.5).abs() < 1e-8);
    }

    #[test]
    fn kl_variance_scaling() {
        // equal means: KL depends only on the ratio, so scaling both leaves it fixed
        let base = |alpha: f64, mu_q: f64| {
            kl_gaussian(
                &post(&[mu_q, 0.0], &[2.0 * alpha, 0.5 * alpha]),
                &prior(&[0.0, 0.0], alpha),
            )
            .unwrap()
        };
        let expected_equal = 0.5 * (2.0 + 0.5 - 2.0 - 2f64.ln() - 0.5f64.ln());
        assert!((base(1.0, 0.0) - expected_equal).abs() < 1e-12);
        assert!((base(3.0, 0.0) - expected_equal).abs() < 1e-12);
        // with a mean offset the quadratic term shrinks as alpha grows
        let k1 = base(1.0, 1.0);
        let k3 = base(3.0, 1.0);
        assert!((k1 - (expected_equal + 0.5)).abs() < 1e-12);
        assert!((k3 - (expected_equal + 0.5 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let q = post(&[1.0], &[1.0]);
        assert!(kl_gaussian(&q, &prior(&[0.0], 0.0)).is_err());
        assert!(kl_gaussian(&q, &prior(&[0.0, 1.0], 1.0)).is_err());
        let zero_var = PosteriorParams {
            mu_q: vec![0.0],
            log_sigma2_q: vec![f64::NEG_INFINITY],
        };
        assert!(kl_gaussian(&zero_var, &prior(&[0.0], 1.0)).is_err());
    }

    #[test]
    fn chi2_identical_is_zero() {
        let q = post(&[0.3, -1.0], &[0.2, 0.2]);
        let c = chi2_gaussian(&q, &prior(&[0.3, -1.0], 0.2)).unwrap();
        assert!(c.value.abs() < 1e-12);
        assert_eq!(c.guarded, 0);
    }

    #[test]
    fn chi2_unit_shift_is_e_minus_one() {
        let c = chi2_gaussian(&post(&[1.0], &[1.0]), &prior(&[0.0], 1.0)).unwrap();
        assert!((c.value - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn chi2_log_form_matches_matrix_form() {
        let mu_q = [0.3, -0.2, 0.8, 0.0];
        let s2_q = [0.7, 1.1, 0.9, 2.5];
        let mu_p = [0.1, 0.1, 0.5, -0.3];
        let sp = 1.2;
        let lit = chi2_matrix_form(&mu_q, &s2_q, &mu_p, sp);
        let c = chi2_gaussian(&post(&mu_q, &s2_q), &prior(&mu_p, sp)).unwrap();
        assert!(
            (c.value - lit).abs() < 1e-10 * (1.0 + lit.abs()),
            "{} vs {lit}",
            c.value
        );
    }

    #[test]
    fn chi2_guard_applies_and_is_idempotent() {
        let sp = 1.0;
        let raw = [0.1, 0.49, 0.5, 3.0];
        let once = guard_variances(&raw, sp);
        let twice = guard_variances(&once, sp);
        assert_eq!(once, twice);
        assert_eq!(once[0], guard_floor(sp));
        assert_eq!(once[2], guard_floor(sp));
        assert_eq!(once[3], 3.0);

        let c = chi2_gaussian(&post(&[0.0; 4], &raw), &prior(&[0.0; 4], sp)).unwrap();
        assert_eq!(c.guarded, 3);
        let g = chi2_gaussian(&post(&[0.0; 4], &once), &prior(&[0.0; 4], sp)).unwrap();
        // re-reading the floor through exp(ln(.)) may land on either side of it
        assert!((c.value - g.value).abs() < 1e-6 * c.value);
        assert!(c.value.is_finite());
    }

    #[test]
    fn chi2_overflow_is_flagged_not_fatal() {
        let n = 2000;
        let q = post(&vec![5.0; n], &vec![1.0; n]);
        let c = chi2_gaussian(&q, &prior(&vec![0.0; n], 1.0)).unwrap();
        assert!(c.overflow);
        assert!(c.value.is_infinite());
        assert!(c.log_one_plus.is_finite());
    }

    #[test]
    fn chi2_survives_thousands_of_near_prior_coordinates() {
        let n = 5000;
        let q = post(&vec![0.001; n], &vec![1.01e-3; n]);
        let c = chi2_gaussian(&q, &prior(&vec![0.0; n], 1e-3)).unwrap();
        assert!(!c.overflow);
        assert!(c.value > 0.0 && c.value.is_finite());
    }

    fn fd_check<F: Fn(&PosteriorParams, &PriorParams) -> (f64, DivergenceGrad)>(
        f: F,
        q: &PosteriorParams,
        p: &PriorParams,
    ) {
        let (_, g) = f(q, p);
        let h = 1e-6;
        for i in 0..q.len() {
            let mut qp = q.clone();
            qp.mu_q[i] += h;
            let mut qm = q.clone();
            qm.mu_q[i] -= h;
            let fd = (f(&qp, p).0 - f(&qm, p).0) / (2.0 * h);
            assert!(
                (fd - g.mu_q[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "mu {i}: {fd} {}",
                g.mu_q[i]
            );

            let mut qp = q.clone();
            qp.log_sigma2_q[i] += h;
            let mut qm = q.clone();
            qm.log_sigma2_q[i] -= h;
            let fd = (f(&qp, p).0 - f(&qm, p).0) / (2.0 * h);
            assert!(
                (fd - g.log_sigma2_q[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "ls {i}: {fd} {}",
                g.log_sigma2_q[i]
            );
        }
        let mut pp = p.clone();
        pp.sigma2_p = (p.sigma2_p.ln() + h).exp();
        let mut pm = p.clone();
        pm.sigma2_p = (p.sigma2_p.ln() - h).exp();
        let fd = (f(q, &pp).0 - f(q, &pm).0) / (2.0 * h);
        assert!(
            (fd - g.log_sigma2_p).abs() < 1e-6 * (1.0 + fd.abs()),
            "sp: {fd} {}",
            g.log_sigma2_p
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = post(&[0.3, -0.4, 1.0], &[0.2, 0.9, 0.4]);
        let p = prior(&[0.0, 0.1, 0.7], 0.5);
        fd_check(|q, p| kl_gaussian_grad(q, p).unwrap(), &q, &p);
    }

    #[test]
    fn chi2_gradient_matches_finite_differences() {
        // includes one guarded coordinate (0.1 < 0.5 / 2), centred so the
        // tiny guard denominator does not swamp the finite differences
        let q = post(&[0.0, -0.4, 1.0], &[0.1, 0.9, 0.4]);
        let p = prior(&[0.0, 0.1, 0.7], 0.5);
        fd_check(
            |q, p| {
                let (c, g) = chi2_log_grad(q, p).unwrap();
                (c.log_one_plus, g)
            },
            &q,
            &p,
        );
        let (c, _) = chi2_log_grad(&q, &p).unwrap();
        assert_eq!(c.guarded, 1);
        let direct = chi2_gaussian(&q, &p).unwrap();
        assert!((c.value - direct.value).abs() < 1e-12);
    }
}
