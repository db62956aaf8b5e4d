//! Samplers drawing i.i.d. contrastive tuples and labelled points from a
//! latent class model.

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::dataset::{ContrastiveDataset, DatasetProvenance, LabeledDataset, Split, TupleIndex};
use super::model::LatentClassModel;
use crate::error::{Error, Result};

/// Draws `m` i.i.d. tuples: classes `(c+, c-_1..c-_k) ~ rho^(k+1)`, an anchor
/// and `block_size` positives from `D_{c+}`, and `block_size` negatives from
/// each `D_{c-_j}`. Every input gets its own feature row.
pub fn sample_contrastive_iid<R: Rng + ?Sized>(
    model: &LatentClassModel,
    m: usize,
    k: usize,
    block_size: usize,
    rng: &mut R,
) -> Result<ContrastiveDataset> {
    if m == 0 {
        return Err(Error::config("m must be >= 1"));
    }
    if k == 0 || block_size == 0 {
        return Err(Error::config("k and block_size must be >= 1"));
    }
    let d0 = model.input_dim();
    let per_tuple = 1 + block_size * (k + 1);
    let mut data = Vec::with_capacity(m * per_tuple * d0);
    let mut tuples = Vec::with_capacity(m);
    let mut next_row = 0usize;
    let mut push = |class: usize, rng: &mut R, data: &mut Vec<f64>| {
        data.extend(model.sample_input(class, rng));
        next_row += 1;
        next_row - 1
    };
    for _ in 0..m {
        let c_pos = model.sample_class(rng);
        let negative_classes: Vec<usize> = (0..k).map(|_| model.sample_class(rng)).collect();
        let anchor = push(c_pos, rng, &mut data);
        let positives = (0..block_size)
            .map(|_| push(c_pos, rng, &mut data))
            .collect();
        let negatives = negative_classes
            .iter()
            .map(|&c| (0..block_size).map(|_| push(c, rng, &mut data)).collect())
            .collect();
        tuples.push(TupleIndex {
            anchor,
            positives,
            negatives,
            positive_class: Some(c_pos),
            negative_classes,
        });
    }
    let features = Array2::from_shape_vec((m * per_tuple, d0), data).expect("row-major samples");
    let ds = ContrastiveDataset::new(
        features,
        tuples,
        k,
        block_size,
        0,
        DatasetProvenance {
            source: "synthetic-iid".into(),
            seed: None,
        },
    )?;
    Ok(ds.with_rho(model.rho().probs().to_vec()))
}

/// `n` i.i.d. labelled points `(x, y)` with `y ~ rho`, `x ~ D_y`.
pub fn sample_labeled<R: Rng + ?Sized>(
    model: &LatentClassModel,
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::config("n must be >= 1"));
    }
    let d0 = model.input_dim();
    let mut data = Vec::with_capacity(n * d0);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = model.sample_class(rng);
        data.extend(model.sample_input(y, rng));
        labels.push(y);
    }
    let inputs = Array2::from_shape_vec((n, d0), data).expect("row-major samples");
    LabeledDataset::new(inputs, labels, model.num_classes(), split)
}

/// One tuple per labelled point: the point is the anchor, positives are
/// other points of its class, and each negative block comes from a class
/// drawn with the empirical class frequencies (collisions allowed). Rows are
/// the labelled inputs themselves.
pub fn contrastive_from_labeled<R: Rng + ?Sized>(
    labeled: &LabeledDataset,
    k: usize,
    block_size: usize,
    rng: &mut R,
) -> Result<ContrastiveDataset> {
    if k == 0 || block_size == 0 {
        return Err(Error::config("k and block_size must be >= 1"));
    }
    let by_class = labeled.class_indices();
    let counts: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    if let Some(c) = by_class.iter().position(|v| v.len() == 1) {
        return Err(Error::config(format!(
            "class {c} has a single point and cannot form a positive pair"
        )));
    }
    let class_dist =
        WeightedIndex::new(&counts).map_err(|_| Error::config("empty labelled dataset"))?;
    let other = |c: usize, anchor: usize, rng: &mut R| loop {
        let r = by_class[c][rng.gen_range(0..by_class[c].len())];
        if r != anchor {
            break r;
        }
    };
    let mut tuples = Vec::with_capacity(labeled.len());
    for (anchor, &y) in labeled.labels().iter().enumerate() {
        let positives = (0..block_size).map(|_| other(y, anchor, rng)).collect();
        let negative_classes: Vec<usize> = (0..k).map(|_| class_dist.sample(rng)).collect();
        let negatives = negative_classes
            .iter()
            .map(|&c| (0..block_size).map(|_| other(c, anchor, rng)).collect())
            .collect();
        tuples.push(TupleIndex {
            anchor,
            positives,
            negatives,
            positive_class: Some(y),
            negative_classes,
        });
    }
    let total: f64 = counts.iter().sum();
    let ds = ContrastiveDataset::new(
        labeled.inputs().clone(),
        tuples,
        k,
        block_size,
        0,
        DatasetProvenance {
            source: "labeled".into(),
            seed: None,
        },
    )?;
    Ok(ds.with_rho(counts.iter().map(|c| c / total).collect()))
}
