//! Assembles bound certificates for a trained posterior on its training data.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::{
    collision_term, iid_supervised_bound_k, j_index, noniid_bound, selection_bound_iid,
    selection_bound_noniid, tau_k, BoundForm, BoundReport, DivergenceKind, RhoDistribution,
    RiskKind,
};
use crate::data::ContrastiveDataset;
use crate::divergences::{chi2_gaussian, kl_gaussian};
use crate::error::{Error, Result};
use crate::evaluation::{mc_posterior_risk, RiskMeasure};
use crate::losses::{loss_range_bl, LossKind};
use crate::network::{
    map_network, max_representation_norm, Architecture, Network, PosteriorParams, PriorParams,
};

/// Whether the training tuples are treated as independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Iid,
    /// Dependent tuples with dependency length `t`.
    Noniid {
        t: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    /// Posterior weight draws behind the empirical risk.
    pub mc_samples: usize,
    pub delta: f64,
    pub b: f64,
    pub c: f64,
    pub loss: LossKind,
    /// Fixed lambda for the supervised-loss form.
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            delta: 0.05,
            b: 100.0,
            c: 0.1,
            loss: LossKind::Logistic,
            lambda: None,
            seed: 0,
        }
    }
}

pub fn certify(
    arch: &Architecture,
    post: &PosteriorParams,
    prior: &PriorParams,
    data: &ContrastiveDataset,
    setting: Setting,
    risk: RiskKind,
    opts: &CertifyOptions,
) -> Result<BoundReport> {
    if data.is_empty() {
        return Err(Error::config("cannot certify on an empty dataset"));
    }
    let m = data.len();
    let k = data.k();
    let j = j_index(prior.sigma2_p, opts.b, opts.c);
    // a prior clamped at its upper limit sits at j = 1 up to roundoff
    if !(j >= 1.0 - 1e-9) {
        return Err(Error::config(format!(
            "prior variance {} gives union-bound index {j} < 1 for b = {}, c = {}",
            prior.sigma2_p, opts.b, opts.c
        )));
    }
    let j = j.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let measure = match risk {
        RiskKind::ZeroOne => RiskMeasure::ZeroOne,
        RiskKind::Loss => RiskMeasure::Loss(opts.loss),
    };
    let est = mc_posterior_risk(arch, post, data, opts.mc_samples, measure, &mut rng)?;
    let w_map = map_network(post);
    let measured_b = max_representation_norm(&Network::new(arch, &w_map)?, data.used_rows().view());
    let b_l = loss_range_bl(opts.loss, measured_b, k);

    let mut notes = vec![
        "union-bound index j is treated as a continuous real".to_string(),
        format!(
            "empirical risk is the mean over {} posterior weight draws; its Monte Carlo error is not included in the bound",
            opts.mc_samples
        ),
    ];
    let mut report = BoundReport {
        form: BoundForm::IidSelection,
        risk_kind: risk,
        empirical_risk: est.mean,
        empirical_risk_draws: est.draws,
        divergence_value: 0.0,
        divergence_kind: DivergenceKind::Kl,
        divergence_overflow: false,
        lambda: None,
        j_index: j,
        sigma2_p: prior.sigma2_p,
        m,
        delta: opts.delta,
        tau_value: None,
        collision_term: None,
        measured_b: Some(measured_b),
        b_l: None,
        t_dependency: None,
        bound_value: f64::NAN,
        notes: Vec::new(),
        provenance: None,
    };

    match setting {
        Setting::Iid => {
            let kl = kl_gaussian(post, prior)?;
            report.divergence_value = kl;
            match risk {
                RiskKind::ZeroOne => {
                    let (bound, lambda) = selection_bound_iid(est.mean, kl, m, opts.delta, j);
                    report.bound_value = bound;
                    report.lambda = Some(lambda);
                }
                RiskKind::Loss => {
                    let lambda = opts.lambda.ok_or_else(|| {
                        Error::config("the supervised-loss bound needs a fixed lambda")
                    })?;
                    let rho = data.rho().ok_or_else(|| {
                        Error::config("dataset carries no class distribution; tau is unknown")
                    })?;
                    let rho = RhoDistribution::new(rho.to_vec())?;
                    let tk = tau_k(&rho, k);
                    let coll = collision_term(&rho, k, opts.loss);
                    report.form = BoundForm::IidSupervised;
                    report.bound_value =
                        iid_supervised_bound_k(est.mean, kl, m, lambda, opts.delta, b_l, tk, coll)?;
                    report.lambda = Some(lambda);
                    report.tau_value = Some(tk);
                    report.collision_term = Some(coll);
                    report.b_l = Some(b_l);
                    notes.push("B_l is computed from the measured representation norm".into());
                }
            }
        }
        Setting::Noniid { t } => {
            let chi = chi2_gaussian(post, prior)?;
            report.divergence_kind = DivergenceKind::Chi2;
            report.divergence_value = chi.value;
            report.divergence_overflow = chi.overflow;
            report.t_dependency = Some(t);
            if chi.guarded > 0 {
                notes.push(format!(
                    "{} posterior variances were raised to the chi-square guard floor",
                    chi.guarded
                ));
            }
            match risk {
                RiskKind::ZeroOne => {
                    report.form = BoundForm::NoniidSelection;
                    report.bound_value =
                        selection_bound_noniid(est.mean, chi.value, m, opts.delta, t, j);
                }
                RiskKind::Loss => {
                    report.form = BoundForm::NoniidLoss;
                    report.b_l = Some(b_l);
                    report.bound_value =
                        noniid_bound(est.mean, chi.value, m, opts.delta, t, b_l, j);
                    notes.push("B_l is computed from the measured representation norm".into());
                }
            }
        }
    }
    report.notes = notes;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_contrastive_iid, LatentClassModel};
    use crate::network::{init_network, InitSpec};

    fn setup() -> (
        Architecture,
        PosteriorParams,
        PriorParams,
        ContrastiveDataset,
    ) {
        let model =
            LatentClassModel::random_gaussian(RhoDistribution::uniform(4), 3, 1.0, 0.3, 0).unwrap();
        let data =
            sample_contrastive_iid(&model, 200, 2, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let arch = Architecture::new(vec![3, 5, 2]).unwrap();
        let (post, prior) =
            init_network(&arch, &InitSpec::fan_in(&arch, (-8f64).exp()), 2).unwrap();
        (arch, post, prior, data)
    }

    #[test]
    fn untrained_checkpoint_has_zero_divergence() {
        let (arch, post, prior, data) = setup();
        let opts = CertifyOptions::default();
        let r = certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::ZeroOne,
            &opts,
        )
        .unwrap();
        assert_eq!(r.divergence_value, 0.0);
        assert_eq!(r.empirical_risk_draws.len(), 10);
        let (expected, _) = selection_bound_iid(r.empirical_risk, 0.0, 200, 0.05, r.j_index);
        assert_eq!(r.bound_value, expected);

        let r = certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Noniid { t: 2 },
            RiskKind::ZeroOne,
            &opts,
        )
        .unwrap();
        assert!(r.divergence_value.abs() < 1e-12);
        assert_eq!(r.t_dependency, Some(2));
    }

    #[test]
    fn supervised_form_needs_lambda_and_uses_tau_k() {
        let (arch, post, prior, data) = setup();
        let mut opts = CertifyOptions::default();
        assert!(certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::Loss,
            &opts
        )
        .is_err());
        opts.lambda = Some(10.0 / 200.0);
        let r = certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::Loss,
            &opts,
        )
        .unwrap();
        let tk = tau_k(&RhoDistribution::uniform(4), 2);
        assert!((r.tau_value.unwrap() - tk).abs() < 1e-15);
        assert!(r.b_l.unwrap() > 0.0);
    }

    #[test]
    fn certificates_are_reproducible() {
        let (arch, post, prior, data) = setup();
        let opts = CertifyOptions::default();
        let a = certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::ZeroOne,
            &opts,
        )
        .unwrap();
        let b = certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::ZeroOne,
            &opts,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn prior_variance_above_grid_is_rejected() {
        let (arch, post, mut prior, data) = setup();
        prior.sigma2_p = 0.1;
        let opts = CertifyOptions::default();
        assert!(certify(
            &arch,
            &post,
            &prior,
            &data,
            Setting::Iid,
            RiskKind::ZeroOne,
            &opts
        )
        .is_err());
    }
}
