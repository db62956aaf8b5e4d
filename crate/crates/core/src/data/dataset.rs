//! Contrastive and labelled dataset containers.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::ContrastiveTuple;

/// Row indices of one tuple inside a dataset's feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleIndex {
    pub anchor: usize,
    pub positives: Vec<usize>,
    /// `k` blocks of `block_size` rows each.
    pub negatives: Vec<Vec<usize>>,
    /// Latent class of the anchor, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_classes: Vec<usize>,
}

impl TupleIndex {
    /// Row indices in stacked order: anchor, positives, negative blocks.
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().copied())
            .chain(self.negatives.iter().flatten().copied())
    }

    pub fn has_collision(&self) -> Option<bool> {
        let c = self.positive_class?;
        if self.negative_classes.is_empty() {
            return None;
        }
        Some(self.negative_classes.contains(&c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub source: String,
    pub seed: Option<u64>,
}

/// Contrastive tuples stored as index lists into a shared feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveDataset {
    features: Array2<f64>,
    tuples: Vec<TupleIndex>,
    k: usize,
    block_size: usize,
    dependency_t: usize,
    /// Class distribution negatives were drawn from, when known.
    rho: Option<Vec<f64>>,
    pub provenance: DatasetProvenance,
}

impl ContrastiveDataset {
    pub fn new(
        features: Array2<f64>,
        tuples: Vec<TupleIndex>,
        k: usize,
        block_size: usize,
        dependency_t: usize,
        provenance: DatasetProvenance,
    ) -> Result<Self> {
        if k == 0 || block_size == 0 {
            return Err(Error::config("k and block_size must be >= 1"));
        }
        let rows = features.nrows();
        for (i, t) in tuples.iter().enumerate() {
            if t.positives.len() != block_size {
                return Err(Error::config(format!(
                    "tuple {i} has {} positives, expected block size {block_size}",
                    t.positives.len()
                )));
            }
            if t.negatives.len() != k || t.negatives.iter().any(|b| b.len() != block_size) {
                return Err(Error::config(format!(
                    "tuple {i} does not have {k} negative blocks of size {block_size}"
                )));
            }
            if let Some(r) = t.rows().find(|&r| r >= rows) {
                return Err(Error::config(format!(
                    "tuple {i} references row {r} but the feature matrix has {rows} rows"
                )));
            }
        }
        Ok(Self {
            features,
            tuples,
            k,
            block_size,
            dependency_t,
            rho: None,
            provenance,
        })
    }

    pub fn with_rho(mut self, rho: Vec<f64>) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.provenance.seed = Some(seed);
        self
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn tuples(&self) -> &[TupleIndex] {
        &self.tuples
    }

    pub fn rho(&self) -> Option<&[f64]> {
        self.rho.as_deref()
    }

    /// Number of tuples `m`.
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn dependency_t(&self) -> usize {
        self.dependency_t
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows_per_tuple(&self) -> usize {
        1 + self.block_size * (self.k + 1)
    }

    pub fn row(&self, r: usize) -> ArrayView1<'_, f64> {
        self.features.row(r)
    }

    /// Materialises tuple `i`.
    pub fn tuple(&self, i: usize) -> ContrastiveTuple {
        let t = &self.tuples[i];
        let get = |r: usize| self.features.row(r).to_vec();
        ContrastiveTuple {
            anchor: get(t.anchor),
            positives: t.positives.iter().map(|&r| get(r)).collect(),
            negatives: t
                .negatives
                .iter()
                .map(|b| b.iter().map(|&r| get(r)).collect())
                .collect(),
        }
    }

    /// Inputs of the selected tuples stacked tuple after tuple, each in
    /// anchor / positives / negatives order.
    pub fn stacked_batch(&self, indices: &[usize]) -> Array2<f64> {
        let rows: Vec<usize> = indices
            .iter()
            .flat_map(|&i| self.tuples[i].rows())
            .collect();
        self.features.select(Axis(0), &rows)
    }

    /// Feature rows referenced by at least one tuple, each once.
    pub fn used_rows(&self) -> Array2<f64> {
        let mut used = vec![false; self.features.nrows()];
        for t in &self.tuples {
            for r in t.rows() {
                used[r] = true;
            }
        }
        let rows: Vec<usize> = (0..used.len()).filter(|&r| used[r]).collect();
        self.features.select(Axis(0), &rows)
    }

    /// Fraction of tuples whose negative classes include the positive class.
    pub fn collision_rate(&self) -> Option<f64> {
        let flags: Option<Vec<bool>> = self.tuples.iter().map(|t| t.has_collision()).collect();
        let flags = flags?;
        if flags.is_empty() {
            return None;
        }
        Some(flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64)
    }

    /// Concatenation of two datasets with matching `(k, block_size)`.
    pub fn merge(&self, other: &ContrastiveDataset) -> Result<ContrastiveDataset> {
        if self.k != other.k || self.block_size != other.block_size {
            return Err(Error::config(format!(
                "cannot merge datasets with (k, block) = ({}, {}) and ({}, {})",
                self.k, self.block_size, other.k, other.block_size
            )));
        }
        if self.input_dim() != other.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "merged feature dimension",
                expected: self.input_dim(),
                actual: other.input_dim(),
            });
        }
        let offset = self.features.nrows();
        let features =
            ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
                .expect("matching column counts");
        let shift = |r: &usize| r + offset;
        let mut tuples = self.tuples.clone();
        tuples.extend(other.tuples.iter().map(|t| {
            TupleIndex {
                anchor: t.anchor + offset,
                positives: t.positives.iter().map(shift).collect(),
                negatives: t
                    .negatives
                    .iter()
                    .map(|b| b.iter().map(shift).collect())
                    .collect(),
                positive_class: t.positive_class,
                negative_classes: t.negative_classes.clone(),
            }
        }));
        let mut merged = ContrastiveDataset::new(
            features,
            tuples,
            self.k,
            self.block_size,
            self.dependency_t.max(other.dependency_t),
            DatasetProvenance {
                source: format!("{}+{}", self.provenance.source, other.provenance.source),
                seed: self.provenance.seed,
            },
        )?;
        merged.rho = if self.rho == other.rho {
            self.rho.clone()
        } else {
            None
        };
        Ok(merged)
    }

    /// SHA-256 over the feature bytes and the tuple index lists.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.features.nrows() as u64).to_le_bytes());
        h.update((self.features.ncols() as u64).to_le_bytes());
        for v in self.features.iter() {
            h.update(v.to_le_bytes());
        }
        h.update((self.k as u64).to_le_bytes());
        h.update((self.block_size as u64).to_le_bytes());
        h.update((self.dependency_t as u64).to_le_bytes());
        for t in &self.tuples {
            for r in t.rows() {
                h.update((r as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "labels",
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Row indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }
}
