//! Time-series corpora and the sliding-window tuple builder for dependent data.

use ndarray::{Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{ContrastiveDataset, DatasetProvenance, LabeledDataset, Split, TupleIndex};
use crate::error::{Error, Result};

/// One labelled time series: `length x d0` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub class: usize,
    pub frames: Array2<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Synthetic corpus of class-specific AR(1) processes around random class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCorpusSpec {
    pub classes: usize,
    pub sequences_per_class: usize,
    pub length: usize,
    pub dim: usize,
    /// Scale of the class means.
    pub separation: f64,
    /// Stationary standard deviation around the class mean.
    pub std: f64,
    /// Autoregressive coefficient in `[0, 1)`.
    pub phi: f64,
    pub seed: u64,
}

impl SequenceCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.sequences_per_class == 0 || self.length == 0 || self.dim == 0 {
            return Err(Error::config("sequence corpus sizes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(Error::config(format!(
                "phi must lie in [0, 1), got {}",
                self.phi
            )));
        }
        if !(self.std >= 0.0) {
            return Err(Error::config("sequence std must be >= 0"));
        }
        Ok(())
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// Generates `sequences_per_class` sequences per class with `stream`
    /// selecting an independent noise stream (so train and test corpora share
    /// class means but not noise).
    pub fn generate(&self, stream: u64) -> Result<Vec<Sequence>> {
        self.validate()?;
        let means = self.class_means();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let innovation = self.std * (1.0 - self.phi * self.phi).sqrt();
        let mut out = Vec::with_capacity(self.classes * self.sequences_per_class);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..self.sequences_per_class {
                let mut frames = Array2::zeros((self.length, self.dim));
                let mut dev: Vec<f64> = (0..self.dim)
                    .map(|_| self.std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for t in 0..self.length {
                    if t > 0 {
                        for d in dev.iter_mut() {
                            *d = self.phi * *d + innovation * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    for (j, v) in frames.row_mut(t).iter_mut().enumerate() {
                        *v = mean[j] + dev[j];
                    }
                }
                out.push(Sequence { class, frames });
            }
        }
        Ok(out)
    }
}

/// Options for [`build_noniid_from_sequences`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOptions {
    /// Block size `B`; also the dependency length `T` of the result.
    pub block: usize,
    pub k: usize,
    /// Whether negative classes may equal the anchor's class.
    pub allow_same_class: bool,
}

/// Sliding-window tuples: for every sequence and offset `t` in `[0, L - B)`,
/// the anchor is frame `t` and the positives frames `t+1..=t+B`. Negative
/// classes are drawn from the sequence class frequencies; each negative is a
/// uniformly chosen frame of a uniformly chosen sequence of that class, never
/// inside the anchor's window.
///
/// Sequences are laid out contiguously in the feature matrix, so frame `t` of
/// sequence `s` is row `offset(s) + t`.
pub fn build_noniid_from_sequences<R: Rng + ?Sized>(
    sequences: &[Sequence],
    opts: WindowOptions,
    rng: &mut R,
) -> Result<ContrastiveDataset> {
    let WindowOptions {
        block,
        k,
        allow_same_class,
    } = opts;
    if block == 0 || k == 0 {
        return Err(Error::config("block and k must be >= 1"));
    }
    if sequences.is_empty() {
        return Err(Error::config("no sequences given"));
    }
    let dim = sequences[0].frames.ncols();
    for (i, s) in sequences.iter().enumerate() {
        if s.len() < block + 1 {
            return Err(Error::config(format!(
                "sequence {i} has length {} but block {block} needs at least {}",
                s.len(),
                block + 1
            )));
        }
        if s.frames.ncols() != dim {
            return Err(Error::DimensionMismatch {
                context: "sequence feature dimension",
                expected: dim,
                actual: s.frames.ncols(),
            });
        }
    }
    let num_classes = sequences.iter().map(|s| s.class).max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in sequences.iter().enumerate() {
        by_class[s.class].push(i);
    }
    let counts: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    let total: f64 = counts.iter().sum();
    let rho: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let class_dist = WeightedIndex::new(&counts).expect("at least one sequence");
    let present = counts.iter().filter(|&&c| c > 0.0).count();
    if !allow_same_class && present < 2 {
        return Err(Error::config(
            "negatives from other classes need at least two classes",
        ));
    }

    let mut offsets = Vec::with_capacity(sequences.len());
    let mut acc = 0;
    for s in sequences {
        offsets.push(acc);
        acc += s.len();
    }
    let views: Vec<_> = sequences.iter().map(|s| s.frames.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).expect("matching dims");

    let mut tuples = Vec::new();
    for (si, s) in sequences.iter().enumerate() {
        let off = offsets[si];
        for t in 0..s.len() - block {
            let window = off + t..=off + t + block;
            let mut negative_classes = Vec::with_capacity(k);
            let mut negatives = Vec::with_capacity(k);
            for _ in 0..k {
                let c = loop {
                    let c = class_dist.sample(rng);
                    if allow_same_class || c != s.class {
                        break c;
                    }
                };
                let members = &by_class[c];
                let mut blk = Vec::with_capacity(block);
                for _ in 0..block {
                    let mut attempts = 0;
                    let row = loop {
                        let seq = members[rng.gen_range(0..members.len())];
                        let row = offsets[seq] + rng.gen_range(0..sequences[seq].len());
                        if !window.contains(&row) {
                            break row;
                        }
                        attempts += 1;
                        if attempts > 10_000 {
                            return Err(Error::config(format!(
                                "class {c} has no frames outside the anchor window"
                            )));
                        }
                    };
                    blk.push(row);
                }
                negative_classes.push(c);
                negatives.push(blk);
            }
            tuples.push(TupleIndex {
                anchor: off + t,
                positives: (1..=block).map(|d| off + t + d).collect(),
                negatives,
                positive_class: Some(s.class),
                negative_classes,
            });
        }
    }
    let ds = ContrastiveDataset::new(
        features,
        tuples,
        k,
        block,
        block,
        DatasetProvenance {
            source: "sequences".into(),
            seed: None,
        },
    )?;
    Ok(ds.with_rho(rho))
}

/// Every frame labelled with its sequence's class.
pub fn labeled_frames(
    sequences: &[Sequence],
    num_classes: usize,
    split: Split,
) -> Result<LabeledDataset> {
    if sequences.is_empty() {
        return Err(Error::config("no sequences given"));
    }
    let views: Vec<_> = sequences.iter().map(|s| s.frames.view()).collect();
    let inputs = ndarray::concatenate(Axis(0), &views)
        .map_err(|_| Error::config("sequences have different feature dimensions"))?;
    let labels = sequences
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.len()))
        .collect();
    LabeledDataset::new(inputs, labels, num_classes, split)
}

/// Keeps the first `length` frames of every sequence.
pub fn truncate_sequences(sequences: &mut [Sequence], length: usize) -> Result<()> {
    for (i, s) in sequences.iter_mut().enumerate() {
        if s.len() < length {
            return Err(Error::config(format!(
                "sequence {i} has {} frames, fewer than {length}",
                s.len()
            )));
        }
        s.frames = s.frames.slice(ndarray::s![..length, ..]).to_owned();
    }
    Ok(())
}

/// Splits per class in input order: the first `train_per_class` sequences of
/// every class go to the first output, the rest to the second.
pub fn split_per_class(
    sequences: Vec<Sequence>,
    train_per_class: usize,
) -> (Vec<Sequence>, Vec<Sequence>) {
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut rest) = (Vec::new(), Vec::new());
    for s in sequences {
        let n = seen.entry(s.class).or_insert(0usize);
        if *n < train_per_class {
            train.push(s);
        } else {
            rest.push(s);
        }
        *n += 1;
    }
    (train, rest)
}
