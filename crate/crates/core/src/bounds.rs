//! Collision probabilities and PAC-Bayes bound calculators.
//!
//! Everything here is a pure function of its arguments.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;

/// Probability distribution over latent classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RhoDistribution {
    probs: Vec<f64>,
}

impl RhoDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::config("class distribution is empty"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::config("class probabilities must be finite and >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "class probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    /// Normalises non-negative weights (e.g. class counts).
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config("class weights must have a positive sum"));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // absorb rounding so the sum check passes
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        if let Some(p) = probs.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *p += drift;
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

impl TryFrom<Vec<f64>> for RhoDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        RhoDistribution::new(v)
    }
}

impl From<RhoDistribution> for Vec<f64> {
    fn from(r: RhoDistribution) -> Self {
        r.probs
    }
}

/// Probability that two independent class draws coincide.
pub fn tau(rho: &RhoDistribution) -> f64 {
    rho.probs.iter().map(|p| p * p).sum()
}

/// Probability that at least one of `k` negative classes equals the positive class.
pub fn tau_k(rho: &RhoDistribution, k: usize) -> f64 {
    1.0 - rho
        .probs
        .iter()
        .map(|&p| p * (1.0 - p).powi(k as i32))
        .sum::<f64>()
}

/// `E[loss(0_{|I+|}) | I+ nonempty]`, where `|I+|` counts negatives sharing the
/// positive class. Given the positive class `c`, `|I+| ~ Binomial(k, rho(c))`.
pub fn collision_term(rho: &RhoDistribution, k: usize, kind: LossKind) -> f64 {
    let tk = tau_k(rho, k);
    if tk <= 0.0 {
        return kind.at_zero(1);
    }
    let mut total = 0.0;
    for &p in &rho.probs {
        let mut binom = 1.0;
        for j in 1..=k {
            binom = binom * (k - j + 1) as f64 / j as f64;
            let pj = binom * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32);
            total += p * pj * kind.at_zero(j);
        }
    }
    total / tk
}

fn check_lambda_delta(lambda: f64, delta: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda must be > 0, got {lambda}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::config(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    Ok(())
}

/// Catoni transform with an arbitrary complexity penalty `penalty = (D + ln(...)) / m`.
fn catoni_form(r_hat: f64, penalty: f64, lambda: f64) -> f64 {
    let num = -(-lambda * r_hat - penalty).exp_m1();
    let den = -(-lambda).exp_m1();
    num / den
}

/// `[1 - exp(-lambda r_hat - (kl + ln 1/delta)/m)] / [1 - exp(-lambda)]`.
pub fn catoni_bound(r_hat: f64, kl: f64, m: usize, lambda: f64, delta: f64) -> Result<f64> {
    check_lambda_delta(lambda, delta)?;
    if m == 0 {
        return Err(Error::config("sample count must be >= 1"));
    }
    let penalty = (kl + (1.0 / delta).ln()) / m as f64;
    Ok(catoni_form(r_hat, penalty, lambda))
}

/// Bound on the supervised average loss of the mean classifier (one negative).
pub fn iid_supervised_bound(
    l_hat: f64,
    kl: f64,
    m: usize,
    lambda: f64,
    delta: f64,
    b_l: f64,
    tau_val: f64,
) -> Result<f64> {
    iid_supervised_bound_k(l_hat, kl, m, lambda, delta, b_l, tau_val, 1.0)
}

/// `k`-negative form: `(B_l * catoni(l_hat / B_l) - tau_k * collision) / (1 - tau_k)`.
/// With `collision = 1` this is the one-negative bound.
#[allow(clippy::too_many_arguments)]
pub fn iid_supervised_bound_k(
    l_hat: f64,
    kl: f64,
    m: usize,
    lambda: f64,
    delta: f64,
    b_l: f64,
    tau_val: f64,
    collision: f64,
) -> Result<f64> {
    if !(tau_val < 1.0) {
        return Err(Error::config(format!("tau must be < 1, got {tau_val}")));
    }
    if !(b_l > 0.0) {
        return Err(Error::config(format!("B_l must be > 0, got {b_l}")));
    }
    let scaled = catoni_bound(l_hat / b_l, kl, m, lambda, delta)?;
    Ok((b_l * scaled - tau_val * collision) / (1.0 - tau_val))
}

/// Union-bound index of a prior variance on the grid `c exp(-j / b)`.
pub fn j_index(sigma2_p: f64, b: f64, c: f64) -> f64 {
    b * (c / sigma2_p).ln()
}

/// `l_hat + pi j sqrt(B_l^2 (1 + 8T) (chi2 + 1) / (24 m delta))`.
pub fn noniid_bound(
    l_hat: f64,
    chi2: f64,
    m: usize,
    delta: f64,
    t: usize,
    b_l: f64,
    j: f64,
) -> f64 {
    l_hat
        + PI * j
            * (b_l * b_l * (1.0 + 8.0 * t as f64) * (chi2 + 1.0) / (24.0 * m as f64 * delta)).sqrt()
}

/// Model-selection bound on the contrastive zero-one risk, minimised over
/// lambda. Returns `(bound, lambda_star)`.
pub fn selection_bound_iid(r_hat: f64, kl: f64, m: usize, delta: f64, j: f64) -> (f64, f64) {
    let mf = m as f64;
    let penalty = (kl + (PI * PI * j * j / 6.0).ln() + (2.0 * mf.sqrt() / delta).ln()) / mf;
    let objective = |log_lambda: f64| catoni_form(r_hat, penalty, log_lambda.exp());

    let lo = (1.0 / mf).ln();
    let hi = 1e7f64.ln();
    const GRID: usize = 100;
    let step = (hi - lo) / (GRID - 1) as f64;
    let grid: Vec<f64> = (0..GRID).map(|i| lo + step * i as f64).collect();
    let (best_i, best_val) =
        grid.iter()
            .map(|&x| objective(x))
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, v)| if v < acc.1 { (i, v) } else { acc },
            );

    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(GRID - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = objective(x);
    if fx <= best_val {
        (fx, x.exp())
    } else {
        (best_val, grid[best_i].exp())
    }
}

/// `r_hat + pi j sqrt((1 + 8T)(chi2 + 1) / (24 m delta))`.
pub fn selection_bound_noniid(
    r_hat: f64,
    chi2: f64,
    m: usize,
    delta: f64,
    t: usize,
    j: f64,
) -> f64 {
    noniid_bound(r_hat, chi2, m, delta, t, 1.0, j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "chi2")]
    Chi2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskKind {
    /// Convex contrastive loss.
    Loss,
    /// Contrastive zero-one risk `r_k`.
    ZeroOne,
}

/// Which certificate a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundForm {
    /// Catoni bound on `r_k`, minimised over lambda, with union-bound penalty.
    IidSelection,
    /// Mean-classifier supervised loss bound with `B_l` rescaling.
    IidSupervised,
    /// Chi-square bound on `r_k` for dependent data.
    NoniidSelection,
    /// Chi-square bound on the convex loss with `B_l` scaling.
    NoniidLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: Option<String>,
    pub dataset_hash: Option<String>,
    pub timestamp: Option<String>,
}

/// Every quantity that enters a bound certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub form: BoundForm,
    pub risk_kind: RiskKind,
    pub empirical_risk: f64,
    /// Per-draw empirical risks behind the Monte Carlo estimate.
    pub empirical_risk_draws: Vec<f64>,
    #[serde(with = "crate::serde_float")]
    pub divergence_value: f64,
    pub divergence_kind: DivergenceKind,
    pub divergence_overflow: bool,
    pub lambda: Option<f64>,
    /// Treated as a continuous positive real.
    pub j_index: f64,
    pub sigma2_p: f64,
    pub m: usize,
    pub delta: f64,
    pub tau_value: Option<f64>,
    pub collision_term: Option<f64>,
    /// Measured max representation norm of the MAP network over the training inputs.
    pub measured_b: Option<f64>,
    #[serde(rename = "B_l")]
    pub b_l: Option<f64>,
    #[serde(rename = "T_dependency")]
    pub t_dependency: Option<usize>,
    #[serde(with = "crate::serde_float")]
    pub bound_value: f64,
    /// Interpretation notes that affect how the value should be read.
    #[serde(default)]
    pub notes: Vec<String>,
    pub provenance: Option<Provenance>,
}

impl BoundReport {
    /// Bound value clamped at zero, for human-readable summaries only.
    pub fn display_value(&self) -> f64 {
        self.bound_value.max(0.0)
    }

    pub fn is_non_vacuous(&self) -> bool {
        self.risk_kind == RiskKind::ZeroOne && self.bound_value < 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rho_validation() {
        assert!(RhoDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(RhoDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(RhoDistribution::new(vec![]).is_err());
        let r = RhoDistribution::from_weights(&[1.0, 1.0, 1.0]).unwrap();
        assert!((r.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn tau_examples() {
        assert!((tau(&RhoDistribution::uniform(100)) - 0.01).abs() < 1e-15);
        assert!((tau(&RhoDistribution::new(vec![0.5, 0.5]).unwrap()) - 0.5).abs() < 1e-15);
        assert!((tau(&RhoDistribution::new(vec![0.9, 0.1]).unwrap()) - 0.82).abs() < 1e-15);
    }

    #[test]
    fn tau_k_examples() {
        let r = RhoDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((tau_k(&r, 1) - tau(&r)).abs() < 1e-15);
        assert!((tau_k(&RhoDistribution::uniform(2), 2) - 0.75).abs() < 1e-15);
        let mut prev = 0.0;
        for k in 1..30 {
            let t = tau_k(&r, k);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn collision_examples() {
        let r = RhoDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        for k in 1..5 {
            assert!((collision_term(&r, k, LossKind::Hinge) - 1.0).abs() < 1e-12);
        }
        assert!((collision_term(&r, 1, LossKind::Logistic) - 1.0).abs() < 1e-12);
        let expected = (0.5 * 1.0 + 0.25 * 3f64.log2()) / 0.75;
        let got = collision_term(&RhoDistribution::uniform(2), 2, LossKind::Logistic);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.19499).abs() < 1e-5);
    }

    #[test]
    fn catoni_examples() {
        assert_eq!(catoni_bound(0.0, 0.0, 10, 1.0, 1.0).unwrap(), 0.0);
        let v = catoni_bound(0.5, 0.0, usize::MAX / 2, 1.0, 1.0).unwrap();
        let expected = (1.0 - (-0.5f64).exp()) / (1.0 - (-1.0f64).exp());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.62246).abs() < 1e-5);
        assert!(catoni_bound(0.1, 0.0, 10, 0.0, 0.05).is_err());
        assert!(catoni_bound(0.1, 0.0, 10, 1.0, 0.0).is_err());
        assert!(catoni_bound(0.1, 0.0, 10, 1.0, 1.5).is_err());
    }

    #[test]
    fn iid_supervised_reduces_to_catoni() {
        let c = catoni_bound(0.3, 12.0, 1000, 2.0, 0.05).unwrap();
        let s = iid_supervised_bound(0.3, 12.0, 1000, 2.0, 0.05, 1.0, 0.0).unwrap();
        assert!((c - s).abs() < 1e-15);
        let neg = iid_supervised_bound(0.0, 0.0, 1000, 2.0, 1.0, 1.0, 0.25).unwrap();
        assert!((neg - (-0.25 / 0.75)).abs() < 1e-15);
        assert!(iid_supervised_bound(0.3, 1.0, 10, 1.0, 0.05, 1.0, 1.0).is_err());
    }

    #[test]
    fn noniid_examples() {
        let floor = noniid_bound(0.0, 0.0, 500, 0.05, 0, 2.0, 3.0);
        assert!((floor - PI * 3.0 * 2.0 / (24.0 * 500.0 * 0.05f64).sqrt()).abs() < 1e-12);
        assert!(floor > 0.0);
        let s = selection_bound_noniid(0.0, 0.0, 500, 0.05, 0, 3.0);
        assert!((s - PI * 3.0 / (24.0 * 500.0 * 0.05f64).sqrt()).abs() < 1e-12);
        let mut prev = 0.0;
        for t in 0..6 {
            let v = selection_bound_noniid(0.1, 0.3, 500, 0.05, t, 3.0);
            assert!(v > prev);
            prev = v;
        }
        assert!(noniid_bound(0.1, f64::INFINITY, 10, 0.05, 2, 1.0, 1.0).is_infinite());
    }

    #[test]
    fn j_index_example() {
        let j = j_index((-8.0f64).exp(), 100.0, 0.1);
        assert!((j - 100.0 * (8.0 + 0.1f64.ln())).abs() < 1e-12);
        assert!((j - 569.74).abs() < 0.01);
    }

    #[test]
    fn selection_minimises_over_lambda_grid() {
        let (m, kl, delta, j, r) = (5000usize, 300.0, 0.05, 600.0, 0.2);
        let (bound, lambda) = selection_bound_iid(r, kl, m, delta, j);
        let penalty =
            (kl + (PI * PI * j * j / 6.0).ln() + (2.0 * (m as f64).sqrt() / delta).ln()) / m as f64;
        for i in 0..400 {
            let l = (1.0 / m as f64) * (1e7 * m as f64).powf(i as f64 / 399.0);
            assert!(bound <= catoni_form(r, penalty, l) + 1e-15);
        }
        assert!(lambda > 0.0);
        assert!(bound > r && bound < 1.0);
    }

    proptest! {
        #[test]
        fn catoni_is_monotone(r in 0.0f64..1.0, dr in 0.0f64..0.5, kl in 0.0f64..100.0, dk in 0.0f64..50.0, lambda in 0.01f64..20.0) {
            let base = catoni_bound(r, kl, 100, lambda, 0.05).unwrap();
            prop_assert!(catoni_bound(r + dr, kl, 100, lambda, 0.05).unwrap() >= base);
            prop_assert!(catoni_bound(r, kl + dk, 100, lambda, 0.05).unwrap() >= base);
        }

        #[test]
        fn iid_supervised_matches_direct_formula(
            l in 0.0f64..3.0, kl in 0.0f64..500.0, m in 10usize..100000,
            lambda in 0.01f64..10.0, delta in 0.001f64..1.0, bl in 0.5f64..8.0, t in 0.0f64..0.9,
        ) {
            let direct = (1.0 / (1.0 - t)) * (bl * (1.0 - (-(lambda / bl) * l - (kl + (1.0 / delta).ln()) / m as f64).exp()) / (1.0 - (-lambda).exp()) - t);
            let ours = iid_supervised_bound(l, kl, m, lambda, delta, bl, t).unwrap();
            prop_assert!((direct - ours).abs() <= 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn bound_calculators_are_pure(r in 0.0f64..1.0, kl in 0.0f64..1e4, j in 1.0f64..1000.0) {
            prop_assert_eq!(selection_bound_iid(r, kl, 1000, 0.05, j), selection_bound_iid(r, kl, 1000, 0.05, j));
        }

        #[test]
        fn selection_bound_beats_any_fixed_lambda(r in 0.0f64..0.6, kl in 0.0f64..2000.0, j in 1.0f64..800.0, log_l in -8.0f64..14.0) {
            let m = 20_000usize;
            let (bound, _) = selection_bound_iid(r, kl, m, 0.05, j);
            let penalty = (kl + (PI * PI * j * j / 6.0).ln() + (2.0 * (m as f64).sqrt() / 0.05).ln()) / m as f64;
            let l = log_l.exp();
            prop_assert!(bound <= catoni_form(r, penalty, l) * (1.0 + 1e-9) + 1e-12);
        }
    }
}
