//! Contrastive losses over `k` negatives with block-averaged positives and
//! negatives, the contrastive zero-one risk, and loss-range constants.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Logistic,
    Hinge,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Logistic => "logistic",
            LossKind::Hinge => "hinge",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "log" => Ok(LossKind::Logistic),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

impl LossKind {
    pub fn value(self, v: &[f64]) -> f64 {
        match self {
            LossKind::Logistic => logistic_loss_k(v),
            LossKind::Hinge => hinge_loss_k(v),
        }
    }

    /// Writes `d loss / d v` into `out` and returns the loss.
    pub fn value_and_grad(self, v: &[f64], out: &mut [f64]) -> f64 {
        debug_assert_eq!(v.len(), out.len());
        match self {
            LossKind::Logistic => {
                let lse = log1p_sum_exp_neg(v);
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o = -(-vi - lse).exp() / LN_2;
                }
                lse / LN_2
            }
            LossKind::Hinge => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let (idx, min_v) =
                    v.iter()
                        .copied()
                        .enumerate()
                        .fold(
                            (0, f64::INFINITY),
                            |acc, (i, x)| if x < acc.1 { (i, x) } else { acc },
                        );
                let value = 1.0 - min_v;
                if value > 0.0 {
                    out[idx] = -1.0;
                    value
                } else {
                    0.0
                }
            }
        }
    }

    /// Loss of the all-zero margin vector of length `j`.
    pub fn at_zero(self, j: usize) -> f64 {
        match self {
            LossKind::Logistic => (1.0 + j as f64).log2(),
            LossKind::Hinge => 1.0,
        }
    }
}

/// `ln(1 + sum_i exp(-v_i))`, stabilised.
fn log1p_sum_exp_neg(v: &[f64]) -> f64 {
    let max = v.iter().fold(0.0f64, |m, &x| m.max(-x));
    let sum: f64 = (-max).exp() + v.iter().map(|&x| (-x - max).exp()).sum::<f64>();
    max + sum.ln()
}

/// `log2(1 + sum_i exp(-v_i))`.
pub fn logistic_loss_k(v: &[f64]) -> f64 {
    log1p_sum_exp_neg(v) / LN_2
}

/// `max(0, 1 + max_i(-v_i))`.
pub fn hinge_loss_k(v: &[f64]) -> f64 {
    let worst = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(-x));
    (1.0 + worst).max(0.0)
}

/// Fraction of margins that are strictly negative. A zero margin counts as correct.
pub fn zero_one_from_margins(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&x| x < 0.0).count() as f64 / v.len() as f64
}

/// Upper end of the loss range when every representation has norm at most `b`.
pub fn loss_range_bl(kind: LossKind, b: f64, k: usize) -> f64 {
    let a = 2.0 * b * b;
    match kind {
        // log2(1 + k e^a) = (a + ln(k + e^-a)) / ln 2
        LossKind::Logistic => (a + (k as f64 + (-a).exp()).ln()) / LN_2,
        LossKind::Hinge => 1.0 + a,
    }
}

/// Margin vector `v_j = f(x) . (mean f(x+) - mean f(x-_j))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginVector(pub Vec<f64>);

impl MarginVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn loss(&self, kind: LossKind) -> f64 {
        kind.value(&self.0)
    }

    pub fn zero_one(&self) -> f64 {
        zero_one_from_margins(&self.0)
    }
}

/// An anchor, a block of positives and `k` blocks of negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTuple {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
}

impl ContrastiveTuple {
    pub fn block_size(&self) -> usize {
        self.positives.len()
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }

    pub fn validate(&self, d0: usize) -> Result<()> {
        let b = self.block_size();
        if b == 0 {
            return Err(Error::config("tuple needs at least one positive"));
        }
        if self.negatives.is_empty() {
            return Err(Error::config("tuple needs at least one negative block"));
        }
        if let Some(block) = self.negatives.iter().find(|blk| blk.len() != b) {
            return Err(Error::DimensionMismatch {
                context: "negative block size",
                expected: b,
                actual: block.len(),
            });
        }
        let vectors = std::iter::once(&self.anchor)
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in vectors {
            if v.len() != d0 {
                return Err(Error::DimensionMismatch {
                    context: "tuple input",
                    expected: d0,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    /// All inputs stacked as rows: anchor, positives, then negatives block by block.
    pub fn stacked_rows(&self) -> Array2<f64> {
        let d0 = self.anchor.len();
        let rows: Vec<f64> = std::iter::once(&self.anchor)
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten())
            .flat_map(|v| v.iter().copied())
            .collect();
        Array2::from_shape_vec((rows.len() / d0.max(1), d0), rows).expect("rectangular rows")
    }
}

/// Margins from the stacked representations of one tuple (layout of
/// [`ContrastiveTuple::stacked_rows`]), written into `out`.
pub(crate) fn margins_from_rows(
    reps: &Array2<f64>,
    first_row: usize,
    block: usize,
    out: &mut [f64],
) {
    let anchor = reps.row(first_row);
    let pos_mean = block_mean(reps, first_row + 1, block);
    let pos_score = anchor.dot(&pos_mean);
    for (j, o) in out.iter_mut().enumerate() {
        let start = first_row + 1 + block * (j + 1);
        let neg_mean = block_mean(reps, start, block);
        *o = pos_score - anchor.dot(&neg_mean);
    }
}

pub(crate) fn block_mean(reps: &Array2<f64>, start: usize, block: usize) -> ndarray::Array1<f64> {
    let mut acc = reps.row(start).to_owned();
    for r in 1..block {
        acc += &reps.row(start + r);
    }
    acc / block as f64
}

pub fn contrastive_margins<F: FeatureMap + ?Sized>(
    f: &F,
    t: &ContrastiveTuple,
) -> Result<MarginVector> {
    t.validate(f.input_dim())?;
    let reps = f.map_batch(t.stacked_rows().view());
    let mut v = vec![0.0; t.k()];
    margins_from_rows(&reps, 0, t.block_size(), &mut v);
    Ok(MarginVector(v))
}

/// `r_k`: fraction of the `k` negatives that the anchor scores above the positives.
pub fn zero_one_risk_k<F: FeatureMap + ?Sized>(f: &F, t: &ContrastiveTuple) -> Result<f64> {
    Ok(contrastive_margins(f, t)?.zero_one())
}

/// Plain dot-product margin `a . (p - n)`, the unblocked form.
pub fn simple_margin(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>) -> f64 {
    a.dot(&(&p - &n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Identity;
    use proptest::prelude::*;

    fn tuple(anchor: &[f64], pos: &[&[f64]], neg: &[&[&[f64]]]) -> ContrastiveTuple {
        ContrastiveTuple {
            anchor: anchor.to_vec(),
            positives: pos.iter().map(|v| v.to_vec()).collect(),
            negatives: neg
                .iter()
                .map(|blk| blk.iter().map(|v| v.to_vec()).collect())
                .collect(),
        }
    }

    #[test]
    fn margin_examples() {
        let f = Identity(2);
        let t = tuple(&[1.0, 0.0], &[&[1.0, 0.0]], &[&[&[0.0, 1.0]]]);
        assert_eq!(contrastive_margins(&f, &t).unwrap().0, vec![1.0]);

        let t = tuple(
            &[0.3, -2.0],
            &[&[1.0, 2.0], &[4.0, -1.0]],
            &[&[&[1.0, 2.0], &[4.0, -1.0]]],
        );
        assert_eq!(contrastive_margins(&f, &t).unwrap().0, vec![0.0]);

        // block means (1,0) vs (0,1)
        let t = tuple(
            &[1.0, 0.0],
            &[&[2.0, 0.0], &[0.0, 0.0]],
            &[&[&[0.0, 2.0], &[0.0, 0.0]]],
        );
        assert!((contrastive_margins(&f, &t).unwrap().0[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn margin_dimension_mismatch() {
        let f = Identity(3);
        let t = tuple(&[1.0, 0.0], &[&[1.0, 0.0]], &[&[&[0.0, 1.0]]]);
        assert!(matches!(
            contrastive_margins(&f, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logistic_examples() {
        assert!((logistic_loss_k(&[0.0]) - 1.0).abs() < 1e-15);
        assert!((logistic_loss_k(&[0.0, 0.0]) - 3f64.log2()).abs() < 1e-15);
        // no overflow on huge negative margins
        let v = logistic_loss_k(&[-2000.0]);
        assert!((v - 2000.0 / LN_2).abs() < 1e-9);
        assert!(logistic_loss_k(&[2000.0]) >= 0.0);
    }

    #[test]
    fn logistic_range_endpoints_bracket_bl() {
        let b: f64 = 1.0;
        let k = 4;
        let lo = logistic_loss_k(&vec![2.0 * b * b; k]);
        let hi = logistic_loss_k(&vec![-2.0 * b * b; k]);
        assert!((hi - loss_range_bl(LossKind::Logistic, b, k)).abs() < 1e-12);
        assert!((lo - (1.0 + 4.0 * (-2.0f64).exp()).log2()).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        assert!((hinge_loss_k(&[0.5]) - 0.5).abs() < 1e-15);
        assert_eq!(hinge_loss_k(&[1.0, 3.0, 1.5]), 0.0);
        assert!((hinge_loss_k(&[3.0, -0.2]) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_one_examples() {
        assert_eq!(zero_one_from_margins(&[0.1, 2.0]), 0.0);
        assert_eq!(zero_one_from_margins(&[-1.0, 0.5, -0.1, 3.0]), 0.5);
        assert_eq!(zero_one_from_margins(&[0.0]), 0.0);
    }

    #[test]
    fn range_constants() {
        for k in [1, 2, 7] {
            assert_eq!(loss_range_bl(LossKind::Hinge, 1.0, k), 3.0);
        }
        assert!((loss_range_bl(LossKind::Logistic, 0.0, 1) - 1.0).abs() < 1e-15);
        let expected = (1.0 + 4.0 * 2f64.exp()).log2();
        assert!((loss_range_bl(LossKind::Logistic, 1.0, 4) - expected).abs() < 1e-12);
        assert!((expected - 4.9334).abs() < 1e-4);
        // k = 1 logistic equals the max of the two endpoints
        let b: f64 = 0.7;
        let a = 2.0 * b * b;
        let max = logistic_loss_k(&[-a]).max(logistic_loss_k(&[a]));
        assert!((loss_range_bl(LossKind::Logistic, b, 1) - max).abs() < 1e-12);
    }

    #[test]
    fn unknown_loss_kind() {
        assert!("softmax".parse::<LossKind>().is_err());
        assert_eq!("hinge".parse::<LossKind>().unwrap(), LossKind::Hinge);
    }

    #[test]
    fn hinge_gradient_when_saturated_is_zero() {
        let mut g = [9.0; 3];
        let v = LossKind::Hinge.value_and_grad(&[1.5, 2.0, 4.0], &mut g);
        assert_eq!(v, 0.0);
        assert_eq!(g, [0.0; 3]);
    }

    proptest! {
        #[test]
        fn zero_one_is_dominated_by_both_losses(v in -5.0f64..5.0) {
            let r = zero_one_from_margins(&[v]);
            prop_assert!(r <= logistic_loss_k(&[v]) + 1e-15);
            prop_assert!(r <= hinge_loss_k(&[v]));
        }

        #[test]
        fn losses_are_midpoint_convex(
            u in prop::collection::vec(-4.0f64..4.0, 3),
            w in prop::collection::vec(-4.0f64..4.0, 3),
        ) {
            let mid: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 0.5 * (a + b)).collect();
            for kind in [LossKind::Logistic, LossKind::Hinge] {
                let lhs = kind.value(&mid);
                let rhs = 0.5 * (kind.value(&u) + kind.value(&w));
                prop_assert!(lhs <= rhs + 1e-12);
            }
        }

        #[test]
        fn bounded_norm_keeps_margins_and_loss_in_range(
            raw in prop::collection::vec(-1.0f64..1.0, 2 * 6),
            b in 0.1f64..2.0,
        ) {
            // six 2-d vectors rescaled onto norm <= b
            let vecs: Vec<Vec<f64>> = raw.chunks(2).map(|c| {
                let n = (c[0] * c[0] + c[1] * c[1]).sqrt().max(1.0);
                vec![b * c[0] / n, b * c[1] / n]
            }).collect();
            let t = ContrastiveTuple {
                anchor: vecs[0].clone(),
                positives: vec![vecs[1].clone()],
                negatives: vec![vec![vecs[2].clone()], vec![vecs[3].clone()], vec![vecs[4].clone()], vec![vecs[5].clone()]],
            };
            let m = contrastive_margins(&Identity(2), &t).unwrap();
            let bound = 2.0 * b * b;
            for &x in m.as_slice() {
                prop_assert!(x >= -bound - 1e-12 && x <= bound + 1e-12);
            }
            for kind in [LossKind::Logistic, LossKind::Hinge] {
                prop_assert!(m.loss(kind) <= loss_range_bl(kind, b, 4) + 1e-12);
            }
        }

        #[test]
        fn single_block_margin_is_plain_margin(raw in prop::collection::vec(-3.0f64..3.0, 9)) {
            let a = raw[0..3].to_vec();
            let p = raw[3..6].to_vec();
            let n = raw[6..9].to_vec();
            let t = ContrastiveTuple { anchor: a.clone(), positives: vec![p.clone()], negatives: vec![vec![n.clone()]] };
            let m = contrastive_margins(&Identity(3), &t).unwrap();
            let plain = simple_margin(ArrayView1::from(&a), ArrayView1::from(&p), ArrayView1::from(&n));
            prop_assert!((m.0[0] - plain).abs() <= 1e-12 * (1.0 + plain.abs()));
        }

        #[test]
        fn logistic_gradient_matches_finite_differences(v in prop::collection::vec(-6.0f64..6.0, 1..5)) {
            let mut g = vec![0.0; v.len()];
            LossKind::Logistic.value_and_grad(&v, &mut g);
            for i in 0..v.len() {
                let h = 1e-6;
                let mut vp = v.clone();
                vp[i] += h;
                let mut vm = v.clone();
                vm[i] -= h;
                let fd = (logistic_loss_k(&vp) - logistic_loss_k(&vm)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-7);
            }
        }
    }
}
