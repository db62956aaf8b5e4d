//! Batched contrastive losses over a [`ContrastiveDataset`] and their
//! gradients with respect to the network weights.

use ndarray::{Array2, ArrayView2};

use crate::data::ContrastiveDataset;
use crate::losses::{zero_one_from_margins, LossKind};
use crate::network::{backward, forward_batch, forward_cached, Architecture};

/// Tuples per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 2048;

/// Margins of every tuple in a stacked representation matrix, `k` per tuple.
fn margins(reps: ArrayView2<f64>, tuples: usize, block: usize, k: usize) -> Vec<f64> {
    let dim = reps.ncols();
    let per = 1 + block * (k + 1);
    let inv_b = 1.0 / block as f64;
    let mut out = Vec::with_capacity(tuples * k);
    let mut mean = vec![0.0; dim];
    for t in 0..tuples {
        let base = t * per;
        let anchor = reps.row(base);
        let block_score = |start: usize, mean: &mut [f64]| {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for r in start..start + block {
                for (m, v) in mean.iter_mut().zip(reps.row(r)) {
                    *m += v;
                }
            }
            anchor
                .iter()
                .zip(mean.iter())
                .map(|(a, m)| a * m)
                .sum::<f64>()
                * inv_b
        };
        let pos = block_score(base + 1, &mut mean);
        for j in 0..k {
            let neg = block_score(base + 1 + block * (j + 1), &mut mean);
            out.push(pos - neg);
        }
    }
    out
}

/// Mean loss and mean zero-one risk of fixed weights over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub zero_one: f64,
}

pub fn evaluate_weights(
    arch: &Architecture,
    w: &[f64],
    data: &ContrastiveDataset,
    loss: LossKind,
) -> Evaluation {
    let m = data.len();
    let (block, k) = (data.block_size(), data.k());
    let (mut sum_loss, mut sum_01) = (0.0, 0.0);
    let all: Vec<usize> = (0..m).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = data.stacked_batch(chunk);
        let reps = forward_batch(arch, w, x.view());
        let v = margins(reps.view(), chunk.len(), block, k);
        for tv in v.chunks(k) {
            sum_loss += loss.value(tv);
            sum_01 += zero_one_from_margins(tv);
        }
    }
    Evaluation {
        loss: sum_loss / m as f64,
        zero_one: sum_01 / m as f64,
    }
}

/// Mean loss over the tuples `indices` and its gradient with respect to `w`.
pub fn batch_loss_and_grad(
    arch: &Architecture,
    w: &[f64],
    data: &ContrastiveDataset,
    indices: &[usize],
    loss: LossKind,
) -> (f64, Vec<f64>) {
    let n = indices.len();
    let (block, k) = (data.block_size(), data.k());
    let per = data.rows_per_tuple();
    let cache = forward_cached(arch, w, data.stacked_batch(indices));
    let reps = cache.output();
    let dim = reps.ncols();
    let v = margins(reps.view(), n, block, k);

    let inv_n = 1.0 / n as f64;
    let inv_b = 1.0 / block as f64;
    let mut d_out = Array2::<f64>::zeros(reps.raw_dim());
    let mut g_v = vec![0.0; k];
    let mut total = 0.0;
    let mut pos_mean = vec![0.0; dim];
    let mut neg_mean = vec![0.0; dim];
    for t in 0..n {
        let base = t * per;
        total += loss.value_and_grad(&v[t * k..(t + 1) * k], &mut g_v);
        let anchor = reps.row(base).to_owned();
        block_mean_into(reps, base + 1, block, &mut pos_mean);
        let g_sum: f64 = g_v.iter().sum::<f64>() * inv_n;
        // d v_j / d f(x+_i) = anchor / B for every j
        for r in base + 1..base + 1 + block {
            let mut row = d_out.row_mut(r);
            for (d, a) in row.iter_mut().zip(anchor.iter()) {
                *d += g_sum * a * inv_b;
            }
        }
        for (j, &gj) in g_v.iter().enumerate() {
            let g = gj * inv_n;
            if g == 0.0 {
                continue;
            }
            let start = base + 1 + block * (j + 1);
            block_mean_into(reps, start, block, &mut neg_mean);
            {
                let mut row = d_out.row_mut(base);
                for ((d, p), q) in row.iter_mut().zip(&pos_mean).zip(&neg_mean) {
                    *d += g * (p - q);
                }
            }
            for r in start..start + block {
                let mut row = d_out.row_mut(r);
                for (d, a) in row.iter_mut().zip(anchor.iter()) {
                    *d -= g * a * inv_b;
                }
            }
        }
    }
    let mut grad = vec![0.0; w.len()];
    backward(arch, w, &cache, d_out, &mut grad);
    (total * inv_n, grad)
}

fn block_mean_into(reps: &Array2<f64>, start: usize, block: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in start..start + block {
        for (o, v) in out.iter_mut().zip(reps.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / block as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}
