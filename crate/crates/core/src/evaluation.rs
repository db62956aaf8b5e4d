//! Mean classifiers on learned representations, their supervised metrics, and
//! Monte Carlo estimates of posterior-averaged contrastive risks.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::evaluate_weights;
use crate::data::{ContrastiveDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{sample_weights, Architecture, FeatureMap, PosteriorParams};

/// How many training points per class enter each class mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplesPerClass {
    All,
    Count(usize),
}

impl std::str::FromStr for SamplesPerClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Self::Count(n)),
            _ => Err(Error::config(format!(
                "samples per class must be 'all' or a positive integer, got '{s}'"
            ))),
        }
    }
}

impl std::fmt::Display for SamplesPerClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplesPerClass::All => write!(f, "mu"),
            SamplesPerClass::Count(n) => write!(f, "mu-{n}"),
        }
    }
}

/// Rows are class means `mu_c`; classes absent from the training data have
/// no row in use and are never predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanClassifier {
    pub class_means: Array2<f64>,
    pub present: Vec<bool>,
    pub samples_per_class: SamplesPerClass,
}

pub fn build_mean_classifier<F: FeatureMap + ?Sized, R: Rng + ?Sized>(
    f: &F,
    train: &LabeledDataset,
    samples_per_class: SamplesPerClass,
    rng: &mut R,
) -> Result<MeanClassifier> {
    let reps = f.map_batch(train.inputs().view());
    mean_classifier_from_reps(&reps, train, samples_per_class, rng)
}

fn mean_classifier_from_reps<R: Rng + ?Sized>(
    reps: &Array2<f64>,
    train: &LabeledDataset,
    samples_per_class: SamplesPerClass,
    rng: &mut R,
) -> Result<MeanClassifier> {
    let classes = train.num_classes();
    let mut means = Array2::zeros((classes, reps.ncols()));
    let mut present = vec![false; classes];
    for (c, idx) in train.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let chosen: Vec<usize> = match samples_per_class {
            SamplesPerClass::All => idx,
            SamplesPerClass::Count(n) => {
                if idx.len() < n {
                    return Err(Error::config(format!(
                        "class {c} has {} training samples, fewer than {n}",
                        idx.len()
                    )));
                }
                idx.choose_multiple(rng, n).copied().collect()
            }
        };
        let mean = reps
            .select(Axis(0), &chosen)
            .mean_axis(Axis(0))
            .expect("nonempty");
        means.row_mut(c).assign(&mean);
        present[c] = true;
    }
    Ok(MeanClassifier {
        class_means: means,
        present,
        samples_per_class,
    })
}

impl MeanClassifier {
    /// `mu_c . f(x)` for every test point and class.
    fn scores(&self, reps: &Array2<f64>) -> Array2<f64> {
        reps.dot(&self.class_means.t())
    }
}

/// Mean over unordered class pairs `(a, b)` of the binary accuracy of
/// `sign((mu_a - mu_b) . f(x))` on the test points labelled `a` or `b`. A zero
/// score counts as correct.
pub fn avg2_accuracy<F: FeatureMap + ?Sized>(
    mc: &MeanClassifier,
    f: &F,
    test: &LabeledDataset,
) -> Result<f64> {
    let reps = f.map_batch(test.inputs().view());
    avg2_from_reps(mc, &reps, test)
}

fn avg2_from_reps(mc: &MeanClassifier, reps: &Array2<f64>, test: &LabeledDataset) -> Result<f64> {
    let scores = mc.scores(reps);
    let by_class = test.class_indices();
    let usable: Vec<usize> = (0..mc.present.len())
        .filter(|&c| mc.present[c] && c < by_class.len() && !by_class[c].is_empty())
        .collect();
    if usable.len() < 2 {
        return Err(Error::config(
            "avg-2 needs at least two classes present in train and test",
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (ia, &a) in usable.iter().enumerate() {
        for &b in &usable[ia + 1..] {
            let mut correct = 0usize;
            for &i in &by_class[a] {
                if scores[[i, a]] - scores[[i, b]] >= 0.0 {
                    correct += 1;
                }
            }
            for &i in &by_class[b] {
                if scores[[i, b]] - scores[[i, a]] >= 0.0 {
                    correct += 1;
                }
            }
            total += correct as f64 / (by_class[a].len() + by_class[b].len()) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Fraction of test points whose label is among the `k` classes with the
/// largest `mu_c . f(x)`. Equal scores rank the lower class index first.
pub fn topk_accuracy<F: FeatureMap + ?Sized>(
    mc: &MeanClassifier,
    f: &F,
    test: &LabeledDataset,
    k: usize,
) -> Result<f64> {
    let reps = f.map_batch(test.inputs().view());
    topk_from_reps(mc, &reps, test, k)
}

fn topk_from_reps(
    mc: &MeanClassifier,
    reps: &Array2<f64>,
    test: &LabeledDataset,
    k: usize,
) -> Result<f64> {
    let classes = mc.present.len();
    if k == 0 || k > classes {
        return Err(Error::config(format!(
            "top-k needs 1 <= k <= {classes}, got {k}"
        )));
    }
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let scores = mc.scores(reps);
    let mut hits = 0usize;
    for (i, &y) in test.labels().iter().enumerate() {
        if y >= classes || !mc.present[y] {
            continue;
        }
        let sy = scores[[i, y]];
        let ahead = (0..classes)
            .filter(|&c| c != y && mc.present[c])
            .filter(|&c| {
                let s = scores[[i, c]];
                s > sy || (s == sy && c < y)
            })
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedMetrics {
    pub avg2: f64,
    pub top1: f64,
    pub top5: f64,
}

/// avg-2 / top-1 / top-5 for one classifier variant. With a finite sample
/// count the metrics are averaged over `repetitions` independent draws.
pub fn supervised_metrics<F: FeatureMap + ?Sized, R: Rng + ?Sized>(
    f: &F,
    train: &LabeledDataset,
    test: &LabeledDataset,
    samples_per_class: SamplesPerClass,
    repetitions: usize,
    rng: &mut R,
) -> Result<SupervisedMetrics> {
    let train_reps = f.map_batch(train.inputs().view());
    let test_reps = f.map_batch(test.inputs().view());
    let reps = match samples_per_class {
        SamplesPerClass::All => 1,
        SamplesPerClass::Count(_) => repetitions.max(1),
    };
    let top5_k = 5.min(train.num_classes());
    let mut acc = SupervisedMetrics {
        avg2: 0.0,
        top1: 0.0,
        top5: 0.0,
    };
    for _ in 0..reps {
        let mc = mean_classifier_from_reps(&train_reps, train, samples_per_class, rng)?;
        acc.avg2 += avg2_from_reps(&mc, &test_reps, test)?;
        acc.top1 += topk_from_reps(&mc, &test_reps, test, 1)?;
        acc.top5 += topk_from_reps(&mc, &test_reps, test, top5_k)?;
    }
    let n = reps as f64;
    Ok(SupervisedMetrics {
        avg2: acc.avg2 / n,
        top1: acc.top1 / n,
        top5: acc.top5 / n,
    })
}

/// Which contrastive quantity to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskMeasure {
    Loss(LossKind),
    ZeroOne,
}

/// Monte Carlo estimate over posterior weight draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub draws: Vec<f64>,
    pub std_error: f64,
}

impl McEstimate {
    pub fn from_draws(draws: Vec<f64>) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std_error = if draws.len() > 1 {
            let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            draws,
            std_error,
        }
    }
}

/// Mean over `n_samples` weight draws of the dataset-mean loss or risk.
pub fn mc_posterior_risk<R: Rng + ?Sized>(
    arch: &Architecture,
    post: &PosteriorParams,
    data: &ContrastiveDataset,
    n_samples: usize,
    measure: RiskMeasure,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::config("empty contrastive dataset"));
    }
    let loss = match measure {
        RiskMeasure::Loss(l) => l,
        RiskMeasure::ZeroOne => LossKind::Logistic,
    };
    let draws = (0..n_samples)
        .map(|_| {
            let w = sample_weights(post, rng).w;
            let e = evaluate_weights(arch, &w, data, loss);
            match measure {
                RiskMeasure::Loss(_) => e.loss,
                RiskMeasure::ZeroOne => e.zero_one,
            }
        })
        .collect();
    Ok(McEstimate::from_draws(draws))
}
