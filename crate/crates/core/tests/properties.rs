//! Property tests over divergences, bounds and datasets.

use pbcurl_core::bounds::{catoni_bound, j_index, selection_bound_iid, selection_bound_noniid};
use pbcurl_core::divergences::{chi2_gaussian, guard_floor, kl_gaussian};
use pbcurl_core::losses::{zero_one_from_margins, LossKind};
use pbcurl_core::network::{PosteriorParams, PriorParams};
use pbcurl_core::oracle::divergence::{oracle_chi2_log1p, oracle_kl};
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (PosteriorParams, PriorParams)> {
    (1usize..12, -8.0f64..0.0).prop_flat_map(|(n, lsp)| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-3.0f64..2.0, n),
        )
            .prop_map(move |(mp, dmu, dls)| {
                let sp = lsp.exp();
                let mu_q = mp
                    .iter()
                    .zip(&dmu)
                    .map(|(m, d)| m + d * sp.sqrt())
                    .collect();
                let log_sigma2_q = dls.iter().map(|d| lsp + d).collect();
                (
                    PosteriorParams { mu_q, log_sigma2_q },
                    PriorParams {
                        mu_p: mp,
                        sigma2_p: sp,
                    },
                )
            })
    })
}

proptest! {
    #[test]
    fn divergences_are_nonnegative_and_match_oracles((q, p) in pair()) {
        let kl = kl_gaussian(&q, &p).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!((kl - oracle_kl(&q, &p)).abs() <= 1e-9 * kl.abs().max(1.0));
        let chi = chi2_gaussian(&q, &p).unwrap();
        prop_assert!(chi.log_one_plus >= -1e-12);
        prop_assert!((chi.log_one_plus - oracle_chi2_log1p(&q, &p)).abs() <= 1e-9 * chi.log_one_plus.abs().max(1.0));
    }

    #[test]
    fn guard_is_idempotent((mut q, p) in pair()) {
        let before = chi2_gaussian(&q, &p).unwrap();
        let floor = guard_floor(p.sigma2_p);
        for l in q.log_sigma2_q.iter_mut() {
            if l.exp() < floor {
                *l = floor.ln();
            }
        }
        let after = chi2_gaussian(&q, &p).unwrap();
        prop_assert!((before.log_one_plus - after.log_one_plus).abs() <= 1e-6 * before.log_one_plus.abs().max(1.0));
    }

    #[test]
    fn catoni_exceeds_empirical_risk(r in 0.0f64..1.0, kl in 0.0f64..1e4, m in 10usize..100_000, lambda in 0.01f64..50.0) {
        let b = catoni_bound(r, kl, m, lambda, 0.05).unwrap();
        prop_assert!(b >= r - 1e-12);
    }

    #[test]
    fn selection_bounds_exceed_empirical_risk(r in 0.0f64..1.0, div in 0.0f64..1e3, m in 10usize..100_000, j in 1.0f64..1000.0) {
        let (b, lambda) = selection_bound_iid(r, div, m, 0.05, j);
        prop_assert!(b >= r - 1e-12 && lambda > 0.0);
        prop_assert!(selection_bound_noniid(r, div, m, 0.05, 2, j) > r);
    }

    #[test]
    fn selection_bound_grows_with_divergence(r in 0.0f64..0.5, kl in 0.0f64..1e3, m in 100usize..50_000) {
        let (lo, _) = selection_bound_iid(r, kl, m, 0.05, 10.0);
        let (hi, _) = selection_bound_iid(r, kl + 50.0, m, 0.05, 10.0);
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn j_index_decreases_in_prior_variance(a in -12.0f64..-3.0, d in 0.01f64..2.0) {
        prop_assert!(j_index(a.exp(), 100.0, 0.1) > j_index((a + d).exp(), 100.0, 0.1));
    }

    #[test]
    fn zero_one_loss_lower_bounded_by_convex_losses(v in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        // both surrogates dominate the zero-one risk
        let z = zero_one_from_margins(&v);
        prop_assert!(LossKind::Hinge.value(&v) >= z - 1e-12);
        prop_assert!(LossKind::Logistic.value(&v) >= z - 1e-12);
    }
}
