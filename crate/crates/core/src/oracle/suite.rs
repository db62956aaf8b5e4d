//! The verification suite behind the `verify` command: one verdict per check.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::discrete::{
    bound_coverage_sim, brute_force_collision, check_lemma_43, exact_losses, CoverageOptions,
    DiscreteInstance, InstanceShape,
};
use super::divergence::{mc_divergences, random_pair};
use super::gradcheck::{finite_diff_check, FdObjective, FdSetup, FdStatus};
use crate::bounds::{collision_term, tau, tau_k, RhoDistribution};
use crate::data::sample_contrastive_iid;
use crate::divergences::{chi2_gaussian, kl_gaussian};
use crate::error::Result;
use crate::losses::{contrastive_margins, LossKind};

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub lemma_instances: usize,
    pub tau_rho_draws: usize,
    pub divergence_instances: usize,
    pub divergence_samples: usize,
    pub max_divergence_dim: usize,
    pub coverage: CoverageSettings,
    pub fd_probes: usize,
    pub cross_instances: usize,
    pub cross_samples: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoverageSettings {
    pub delta: f64,
    pub trials: usize,
    pub m: usize,
    pub hypotheses: usize,
    pub lambda: f64,
    /// Smallest coverage counted as a pass.
    pub min_coverage: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma_instances: 500,
            tau_rho_draws: 20,
            divergence_instances: 50,
            divergence_samples: 200_000,
            max_divergence_dim: 20,
            coverage: CoverageSettings {
                delta: 0.05,
                trials: 200,
                m: 200,
                hypotheses: 40,
                lambda: 1.0,
                min_coverage: 0.91,
            },
            fd_probes: 200,
            cross_instances: 3,
            cross_samples: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub check: String,
    pub status: Status,
    /// Non-gating checks are diagnostics and never fail the suite.
    pub gating: bool,
    pub summary: String,
    pub details: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
}

impl VerifyReport {
    pub fn verdict(&self, check: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }
}

fn verdict(
    check: &str,
    ok: bool,
    gating: bool,
    summary: String,
    details: serde_json::Value,
) -> Verdict {
    Verdict {
        check: check.into(),
        status: if ok { Status::Pass } else { Status::Fail },
        gating,
        summary,
        details,
        seconds: None,
    }
}

fn timed(f: impl FnOnce() -> Result<Verdict>) -> Result<Verdict> {
    let t = Instant::now();
    let mut v = f()?;
    v.seconds = Some(t.elapsed().as_secs_f64());
    Ok(v)
}

/// Lemma 4.3 on random instances; `uniform` selects the gating suite.
pub fn lemma_check(kind: LossKind, instances: usize, uniform: bool, seed: u64) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = InstanceShape {
        uniform_rho: uniform,
        ..Default::default()
    };
    let (mut holds, mut worst_gap) = (0usize, f64::NEG_INFINITY);
    for _ in 0..instances {
        let inst = DiscreteInstance::random(shape, &mut rng);
        let c = check_lemma_43(&inst, kind)?;
        holds += usize::from(c.holds);
        worst_gap = worst_gap.max(c.lhs - c.rhs);
    }
    // the collapsed map sits exactly on the boundary
    let collapsed = check_lemma_43(&DiscreteInstance::random(shape, &mut rng).collapsed(), kind)?;
    let name = if uniform {
        format!("lemma-4.3-{kind}")
    } else {
        format!("lemma-4.3-{kind}-nonuniform-rho")
    };
    let ok = holds == instances && collapsed.holds;
    Ok(verdict(
        &name,
        ok,
        uniform,
        format!("holds on {holds}/{instances} instances; max lhs - rhs = {worst_gap:.3e}"),
        json!({
            "instances": instances,
            "holds": holds,
            "max_lhs_minus_rhs": worst_gap,
            "collapsed": collapsed,
        }),
    ))
}

/// Closed-form `tau`, `tau_k` and collision term against class-tuple enumeration.
pub fn tau_check(draws: usize, seed: u64) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cases, mut max_diff) = (0usize, 0.0f64);
    for nc in 1..=5 {
        for k in 1..=3 {
            for d in 0..draws {
                let rho: Vec<f64> = if d == 0 {
                    vec![1.0 / nc as f64; nc]
                } else {
                    let raw: Vec<f64> = (0..nc).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|r| r / s).collect()
                };
                let dist = RhoDistribution::new(rho.clone())?;
                for kind in [LossKind::Logistic, LossKind::Hinge] {
                    let (tk, coll) = brute_force_collision(&rho, k, kind)?;
                    max_diff = max_diff
                        .max((tk - tau_k(&dist, k)).abs())
                        .max((coll - collision_term(&dist, k, kind)).abs());
                    if k == 1 {
                        max_diff = max_diff.max((tk - tau(&dist)).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(verdict(
        "tau-k-brute-force",
        max_diff <= 1e-12,
        true,
        format!("{cases} cases with |C| <= 5, k <= 3; max abs diff {max_diff:.3e}"),
        json!({"cases": cases, "max_abs_diff": max_diff, "tolerance": 1e-12}),
    ))
}

/// Exact enumeration against main-path sampling and losses.
pub fn cross_check(instances: usize, samples: usize, seed: u64) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut ok = true;
    for i in 0..instances {
        let inst = DiscreteInstance::random(InstanceShape::default(), &mut rng);
        let model = inst.model()?;
        for (kind, k) in [(LossKind::Logistic, 1), (LossKind::Hinge, 2)] {
            let exact = exact_losses(&inst, kind, k)?;
            let data = sample_contrastive_iid(&model, samples, k, 1, &mut rng)?;
            let (mut s, mut s2) = (0.0, 0.0);
            for t in 0..data.len() {
                let l = contrastive_margins(&inst, &data.tuple(t))?.loss(kind);
                s += l;
                s2 += l * l;
            }
            let n = samples as f64;
            let mean = s / n;
            let se = ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            let z = (mean - exact.l_un) / se.max(1e-300);
            let pass = (mean - exact.l_un).abs() <= 3.0 * se;
            ok &= pass;
            rows.push(json!({"instance": i, "loss": kind, "k": k, "exact": exact.l_un, "mc": mean, "std_error": se, "z": z}));
        }
    }
    Ok(verdict(
        "exact-vs-monte-carlo",
        ok,
        true,
        format!("{} comparisons with {samples} samples each", rows.len()),
        json!({"comparisons": rows}),
    ))
}

/// Main-path KL and chi-square against Monte Carlo within 3 standard errors.
pub fn divergence_check(
    instances: usize,
    samples: usize,
    max_dim: usize,
    seed: u64,
) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kl_ok, mut chi_ok) = (0usize, 0usize);
    let (mut worst_kl_z, mut worst_chi_z) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.gen_range(1..=max_dim);
        let (post, prior) = random_pair(n, &mut rng);
        let kl = kl_gaussian(&post, &prior)?;
        let chi = chi2_gaussian(&post, &prior)?;
        let mc = mc_divergences(&post, &prior, samples, &mut rng);
        let zk = (kl - mc.kl).abs() / mc.kl_std_error;
        let zc = (chi.value - mc.chi2).abs() / mc.chi2_std_error;
        kl_ok += usize::from(zk <= 3.0);
        chi_ok += usize::from(zc <= 3.0);
        worst_kl_z = worst_kl_z.max(zk);
        worst_chi_z = worst_chi_z.max(zc);
    }
    Ok(verdict(
        "divergence-monte-carlo",
        kl_ok == instances && chi_ok == instances,
        true,
        format!("KL within 3 se on {kl_ok}/{instances}, chi2 on {chi_ok}/{instances}"),
        json!({
            "instances": instances,
            "samples": samples,
            "max_dim": max_dim,
            "kl_within": kl_ok,
            "chi2_within": chi_ok,
            "worst_kl_z": worst_kl_z,
            "worst_chi2_z": worst_chi_z,
        }),
    ))
}

pub fn coverage_check(settings: CoverageSettings, seed: u64) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = DiscreteInstance::random(InstanceShape::default(), &mut rng);
    let opts = CoverageOptions {
        delta: settings.delta,
        trials: settings.trials,
        m: settings.m,
        hypotheses: settings.hypotheses,
        lambda: settings.lambda,
    };
    let r = bound_coverage_sim(&task, opts, &mut rng)?;
    Ok(verdict(
        "catoni-coverage",
        r.coverage >= settings.min_coverage,
        true,
        format!(
            "coverage {:.3} over {} trials at delta = {} (need >= {})",
            r.coverage, r.trials, settings.delta, settings.min_coverage
        ),
        serde_json::to_value(&r).unwrap_or_default(),
    ))
}

pub fn gradient_check(kind: FdObjective, probes: usize, seed: u64) -> Result<Verdict> {
    let setup = FdSetup::random(kind, LossKind::Logistic, seed)?;
    let r = finite_diff_check(
        &setup,
        probes,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    )?;
    let ok = r.status == FdStatus::Checked
        && r.max_rel_err < 1e-4
        && r.value_rel_diff < 1e-10
        && r.probes > 0;
    let name = match kind {
        FdObjective::Iid => "gradient-iid",
        FdObjective::Noniid => "gradient-noniid",
    };
    Ok(verdict(
        name,
        ok,
        true,
        format!(
            "max rel err {:.3e} over {} probes ({} skipped at kinks), {} parameters",
            r.max_rel_err,
            r.probes,
            r.kinks,
            setup.post.len()
        ),
        serde_json::to_value(&r).unwrap_or_default(),
    ))
}

pub fn zero_variance_check(seed: u64) -> Result<Verdict> {
    let mut setup = FdSetup::random(FdObjective::Iid, LossKind::Logistic, seed)?;
    setup
        .post
        .log_sigma2_q
        .iter_mut()
        .for_each(|l| *l = f64::NEG_INFINITY);
    let r = finite_diff_check(&setup, 10, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut v = verdict(
        "gradient-zero-variance",
        true,
        false,
        "degenerate posterior: gradient check skipped".into(),
        serde_json::to_value(&r).unwrap_or_default(),
    );
    v.status = if matches!(r.status, FdStatus::Skipped { .. }) {
        Status::Skip
    } else {
        Status::Fail
    };
    Ok(v)
}

/// Runs every check. The suite passes when every gating check passes.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let s = opts.seed;
    let mut verdicts = vec![
        timed(|| lemma_check(LossKind::Logistic, opts.lemma_instances, true, s))?,
        timed(|| {
            lemma_check(
                LossKind::Hinge,
                opts.lemma_instances,
                true,
                s.wrapping_add(1),
            )
        })?,
        timed(|| {
            lemma_check(
                LossKind::Logistic,
                opts.lemma_instances,
                false,
                s.wrapping_add(2),
            )
        })?,
        timed(|| {
            lemma_check(
                LossKind::Hinge,
                opts.lemma_instances,
                false,
                s.wrapping_add(3),
            )
        })?,
        timed(|| tau_check(opts.tau_rho_draws, s.wrapping_add(4)))?,
        timed(|| {
            divergence_check(
                opts.divergence_instances,
                opts.divergence_samples,
                opts.max_divergence_dim,
                s.wrapping_add(5),
            )
        })?,
        timed(|| gradient_check(FdObjective::Iid, opts.fd_probes, s.wrapping_add(6)))?,
        timed(|| gradient_check(FdObjective::Noniid, opts.fd_probes, s.wrapping_add(7)))?,
        timed(|| zero_variance_check(s.wrapping_add(8)))?,
        timed(|| coverage_check(opts.coverage, s.wrapping_add(9)))?,
    ];
    if opts.cross_instances > 0 {
        verdicts.push(timed(|| {
            cross_check(opts.cross_instances, opts.cross_samples, s.wrapping_add(10))
        })?);
    }
    let passed = verdicts
        .iter()
        .all(|v| !v.gating || v.status == Status::Pass);
    Ok(VerifyReport { passed, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let opts = VerifyOptions {
            lemma_instances: 30,
            tau_rho_draws: 2,
            divergence_instances: 5,
            divergence_samples: 20_000,
            coverage: CoverageSettings {
                trials: 20,
                ..VerifyOptions::default().coverage
            },
            fd_probes: 40,
            cross_instances: 1,
            cross_samples: 20_000,
            ..Default::default()
        };
        let report = run_verify(&opts).unwrap();
        for v in &report.verdicts {
            assert!(!v.gating || v.status == Status::Pass, "{v:?}");
        }
        assert!(report.passed);
        assert_eq!(
            report.verdict("gradient-zero-variance").unwrap().status,
            Status::Skip
        );
    }
}
