//! Finite latent-class instances with tabulated feature maps, exact
//! expectations by enumeration, and the bound coverage simulation.
//!
//! Inputs are one-dimensional point ids; the feature map is a lookup table.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bounds::{catoni_bound, RhoDistribution};
use crate::data::{sample_contrastive_iid, ClassConditionals, LatentClassModel, SupportPoint};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::FeatureMap;

/// Largest number of terms an exact enumeration may visit.
pub const MAX_ENUMERATION: usize = 20_000_000;

#[derive(Debug, Clone)]
pub struct DiscreteInstance {
    pub rho: Vec<f64>,
    /// `(point id, probability)` per class.
    pub classes: Vec<Vec<(usize, f64)>>,
    /// Feature vector per point id.
    pub table: Vec<Vec<f64>>,
}

/// Shape limits for random instances.
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub min_classes: usize,
    pub max_classes: usize,
    pub max_support: usize,
    pub max_dim: usize,
    pub uniform_rho: bool,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            min_classes: 2,
            max_classes: 5,
            max_support: 6,
            max_dim: 4,
            uniform_rho: true,
        }
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // exponential spacings give a uniform draw on the simplex
    let raw: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

impl DiscreteInstance {
    pub fn new(
        rho: Vec<f64>,
        classes: Vec<Vec<(usize, f64)>>,
        table: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if rho.len() != classes.len() || rho.is_empty() {
            return Err(Error::config("one support table per class required"));
        }
        let d = table.first().map(Vec::len).unwrap_or(0);
        if d == 0 || table.iter().any(|t| t.len() != d) {
            return Err(Error::config(
                "feature table rows must share a nonzero dimension",
            ));
        }
        for c in &classes {
            if c.is_empty() || c.iter().any(|&(id, _)| id >= table.len()) {
                return Err(Error::config("support points must index the feature table"));
            }
        }
        Ok(Self {
            rho,
            classes,
            table,
        })
    }

    /// Random instance: disjoint supports, Gaussian feature table.
    pub fn random<R: Rng + ?Sized>(shape: InstanceShape, rng: &mut R) -> Self {
        let nc = rng.gen_range(shape.min_classes..=shape.max_classes);
        let d = rng.gen_range(1..=shape.max_dim);
        let rho = if shape.uniform_rho {
            vec![1.0 / nc as f64; nc]
        } else {
            random_simplex(nc, rng)
        };
        let mut classes = Vec::with_capacity(nc);
        let mut next = 0;
        for _ in 0..nc {
            let s = rng.gen_range(1..=shape.max_support);
            let probs = random_simplex(s, rng);
            classes.push(
                probs
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| (next + i, p))
                    .collect(),
            );
            next += s;
        }
        let table = (0..next)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Self {
            rho,
            classes,
            table,
        }
    }

    /// Same supports with a fresh random feature table.
    pub fn with_random_table<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let d = self.dim();
        let table = (0..self.table.len())
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Self {
            rho: self.rho.clone(),
            classes: self.classes.clone(),
            table,
        }
    }

    /// Every point mapped to the same vector.
    pub fn collapsed(&self) -> Self {
        let row = self.table[0].clone();
        Self {
            rho: self.rho.clone(),
            classes: self.classes.clone(),
            table: vec![row; self.table.len()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rho.len()
    }

    pub fn dim(&self) -> usize {
        self.table[0].len()
    }

    /// The generative model over point ids, for the main-path samplers.
    pub fn model(&self) -> Result<LatentClassModel> {
        let support = self
            .classes
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&(id, prob)| SupportPoint {
                        x: vec![id as f64],
                        prob,
                    })
                    .collect()
            })
            .collect();
        LatentClassModel::new(
            RhoDistribution::new(self.rho.clone())?,
            ClassConditionals::Discrete { support },
        )
    }

    /// Class mean of the tabulated features.
    fn class_mean(&self, c: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for &(id, p) in &self.classes[c] {
            for (m, f) in mean.iter_mut().zip(&self.table[id]) {
                *m += p * f;
            }
        }
        mean
    }

    /// Marginal distribution of a negative point: `sum_c rho(c) D_c`.
    fn negative_marginal(&self) -> Vec<(usize, f64)> {
        let mut q = vec![0.0; self.table.len()];
        for (c, pts) in self.classes.iter().enumerate() {
            for &(id, p) in pts {
                q[id] += self.rho[c] * p;
            }
        }
        q.into_iter()
            .enumerate()
            .filter(|(_, p)| *p > 0.0)
            .collect()
    }
}

impl FeatureMap for DiscreteInstance {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        self.dim()
    }

    fn map_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((inputs.nrows(), self.dim()));
        for (i, x) in inputs.rows().into_iter().enumerate() {
            let row = &self.table[x[0] as usize];
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss of a margin vector, written out directly from the definitions.
pub fn oracle_loss(kind: LossKind, v: &[f64]) -> f64 {
    match kind {
        LossKind::Logistic => (1.0 + v.iter().map(|x| (-x).exp()).sum::<f64>()).log2(),
        LossKind::Hinge => {
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            (1.0 - min).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactLosses {
    /// Contrastive loss with `k` negatives.
    pub l_un: f64,
    /// Supervised average loss of the mean classifier; `None` with one class.
    pub l_sup_mu: Option<f64>,
    pub tau: f64,
    pub tau_k: f64,
    pub collision_term: f64,
}

/// Exact expectations by full enumeration of classes and support points.
pub fn exact_losses(inst: &DiscreteInstance, kind: LossKind, k: usize) -> Result<ExactLosses> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let negatives = inst.negative_marginal();
    let pairs: usize = inst.classes.iter().map(|c| c.len() * c.len()).sum();
    let terms = (negatives.len() as f64).powi(k as i32) * pairs as f64;
    if terms > MAX_ENUMERATION as f64 {
        return Err(Error::TooLarge(format!(
            "{terms:.3e} terms exceed {MAX_ENUMERATION}"
        )));
    }

    // L_un: anchor and positive from D_{c+}, each negative independently from the marginal
    let mut l_un = 0.0;
    let mut v = vec![0.0; k];
    let mut idx = vec![0usize; k];
    for (c, pts) in inst.classes.iter().enumerate() {
        for &(xa, pa) in pts {
            for &(xp, pp) in pts {
                let w0 = inst.rho[c] * pa * pp;
                idx.iter_mut().for_each(|i| *i = 0);
                loop {
                    let mut w = w0;
                    for (j, &i) in idx.iter().enumerate() {
                        let (xn, pn) = negatives[i];
                        w *= pn;
                        let diff: Vec<f64> = inst.table[xp]
                            .iter()
                            .zip(&inst.table[xn])
                            .map(|(a, b)| a - b)
                            .collect();
                        v[j] = dot(&inst.table[xa], &diff);
                    }
                    l_un += w * oracle_loss(kind, &v);
                    // odometer over negative points
                    let mut pos = 0;
                    loop {
                        if pos == k {
                            break;
                        }
                        idx[pos] += 1;
                        if idx[pos] < negatives.len() {
                            break;
                        }
                        idx[pos] = 0;
                        pos += 1;
                    }
                    if pos == k {
                        break;
                    }
                }
            }
        }
    }

    let nc = inst.num_classes();
    let tau: f64 = inst.rho.iter().map(|p| p * p).sum();
    let l_sup_mu = (nc >= 2).then(|| {
        let means: Vec<Vec<f64>> = (0..nc).map(|c| inst.class_mean(c)).collect();
        let mut total = 0.0;
        for cp in 0..nc {
            for cm in 0..nc {
                if cp == cm {
                    continue;
                }
                let pair_prob = inst.rho[cp] * inst.rho[cm] / (1.0 - tau);
                let w: Vec<f64> = means[cp]
                    .iter()
                    .zip(&means[cm])
                    .map(|(a, b)| a - b)
                    .collect();
                let norm = inst.rho[cp] + inst.rho[cm];
                let mut sup = 0.0;
                for (c, y) in [(cp, 1.0), (cm, -1.0)] {
                    let restricted = inst.rho[c] / norm;
                    for &(x, p) in &inst.classes[c] {
                        sup += restricted * p * oracle_loss(kind, &[y * dot(&w, &inst.table[x])]);
                    }
                }
                total += pair_prob * sup;
            }
        }
        total
    });

    let (tau_k, collision_term) = brute_force_collision(&inst.rho, k, kind)?;
    Ok(ExactLosses {
        l_un,
        l_sup_mu,
        tau,
        tau_k,
        collision_term,
    })
}

/// `tau_k` and `E[loss(0_{|I+|}) | I+ nonempty]` by enumerating every class
/// tuple `(c+, c-_1, .., c-_k)`.
pub fn brute_force_collision(rho: &[f64], k: usize, kind: LossKind) -> Result<(f64, f64)> {
    let nc = rho.len();
    let terms = (nc as f64).powi(k as i32 + 1);
    if terms > MAX_ENUMERATION as f64 {
        return Err(Error::TooLarge(format!("{terms:.3e} class tuples")));
    }
    let total = nc.pow(k as u32 + 1);
    let (mut tk, mut weighted) = (0.0, 0.0);
    let mut digits = vec![0usize; k + 1];
    for code in 0..total {
        let mut rest = code;
        for d in digits.iter_mut() {
            *d = rest % nc;
            rest /= nc;
        }
        let prob: f64 = digits.iter().map(|&c| rho[c]).product();
        let hits = digits[1..].iter().filter(|&&c| c == digits[0]).count();
        if hits > 0 {
            tk += prob;
            weighted += prob * oracle_loss(kind, &vec![0.0; hits]);
        }
    }
    let coll = if tk > 0.0 {
        weighted / tk
    } else {
        oracle_loss(kind, &[0.0])
    };
    Ok((tk, coll))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// `L_sup^mu(f) <= (L_un(f) - tau) / (1 - tau)` with one negative.
pub fn check_lemma_43(inst: &DiscreteInstance, kind: LossKind) -> Result<LemmaCheck> {
    let e = exact_losses(inst, kind, 1)?;
    if e.tau >= 1.0 - 1e-15 {
        return Err(Error::config("tau = 1: no distinct class pair"));
    }
    let lhs = e.l_sup_mu.expect("two or more classes when tau < 1");
    let rhs = (e.l_un - e.tau) / (1.0 - e.tau);
    Ok(LemmaCheck {
        holds: lhs <= rhs + 1e-12,
        lhs,
        rhs,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CoverageOptions {
    pub delta: f64,
    pub trials: usize,
    /// Training tuples per trial.
    pub m: usize,
    pub hypotheses: usize,
    /// Catoni lambda, fixed in advance.
    pub lambda: f64,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            delta: 0.05,
            trials: 200,
            m: 200,
            hypotheses: 40,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub coverage: f64,
    pub covered: usize,
    pub trials: usize,
    pub mean_bound: f64,
    pub mean_true_risk: f64,
    pub mean_kl: f64,
}

/// Contrastive zero-one risk `1[v < 0]` of one tuple under a table.
fn zero_one(table: &[Vec<f64>], a: usize, p: usize, n: usize) -> f64 {
    let diff: Vec<f64> = table[p].iter().zip(&table[n]).map(|(x, y)| x - y).collect();
    if dot(&table[a], &diff) < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Draws `trials` training sets from a fixed discrete task and a finite set
/// of tabulated feature maps, fits the Gibbs posterior to each, and counts
/// how often the Catoni bound (uniform prior, fixed lambda) covers the exact
/// true risk of that posterior.
pub fn bound_coverage_sim<R: Rng + ?Sized>(
    task: &DiscreteInstance,
    opts: CoverageOptions,
    rng: &mut R,
) -> Result<CoverageResult> {
    if opts.trials == 0 || opts.hypotheses == 0 || opts.m == 0 {
        return Err(Error::config("trials, hypotheses and m must be >= 1"));
    }
    let model = task.model()?;
    let maps: Vec<DiscreteInstance> = (0..opts.hypotheses)
        .map(|_| task.with_random_table(rng))
        .collect();
    // exact true risk per hypothesis
    let negatives = task.negative_marginal();
    let true_risk: Vec<f64> = maps
        .iter()
        .map(|h| {
            let mut r = 0.0;
            for (c, pts) in task.classes.iter().enumerate() {
                for &(xa, pa) in pts {
                    for &(xp, pp) in pts {
                        for &(xn, pn) in &negatives {
                            r += task.rho[c] * pa * pp * pn * zero_one(&h.table, xa, xp, xn);
                        }
                    }
                }
            }
            r
        })
        .collect();
    let prior = 1.0 / opts.hypotheses as f64;
    let (mut covered, mut sum_bound, mut sum_true, mut sum_kl) = (0usize, 0.0, 0.0, 0.0);
    for _ in 0..opts.trials {
        let data = sample_contrastive_iid(&model, opts.m, 1, 1, rng)?;
        let x = data.features();
        let emp: Vec<f64> = maps
            .iter()
            .map(|h| {
                data.tuples()
                    .iter()
                    .map(|t| {
                        let id = |r: usize| x[[r, 0]] as usize;
                        zero_one(
                            &h.table,
                            id(t.anchor),
                            id(t.positives[0]),
                            id(t.negatives[0][0]),
                        )
                    })
                    .sum::<f64>()
                    / opts.m as f64
            })
            .collect();
        // Gibbs posterior Q_h ∝ exp(-lambda m r_h)
        let scores: Vec<f64> = emp
            .iter()
            .map(|r| -opts.lambda * opts.m as f64 * r)
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        let q: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let kl: f64 = q
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * (p / prior).ln())
            .sum();
        let r_hat: f64 = q.iter().zip(&emp).map(|(a, b)| a * b).sum();
        let r_true: f64 = q.iter().zip(&true_risk).map(|(a, b)| a * b).sum();
        let bound = catoni_bound(r_hat, kl, opts.m, opts.lambda, opts.delta)?;
        if bound >= r_true {
            covered += 1;
        }
        sum_bound += bound;
        sum_true += r_true;
        sum_kl += kl;
    }
    let n = opts.trials as f64;
    Ok(CoverageResult {
        coverage: covered as f64 / n,
        covered,
        trials: opts.trials,
        mean_bound: sum_bound / n,
        mean_true_risk: sum_true / n,
        mean_kl: sum_kl / n,
    })
}
