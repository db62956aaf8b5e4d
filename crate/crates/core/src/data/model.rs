//! Latent class models: a class distribution plus class-conditional input
//! distributions.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::RhoDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub prob: f64,
}

/// Per-class input distributions `D_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ClassConditionals {
    /// Spherical Gaussians sharing one standard deviation.
    Gaussian { means: Vec<Vec<f64>>, std: f64 },
    /// Finite support tables, one per class.
    Discrete { support: Vec<Vec<SupportPoint>> },
}

/// Latent class distribution together with the class conditionals.
///
/// A single class is allowed so collision edge cases can be sampled; anything
/// that needs a distinct class pair rejects it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub struct LatentClassModel {
    rho: RhoDistribution,
    conditionals: ClassConditionals,
    samplers: Samplers,
}

#[derive(Clone, Serialize, Deserialize)]
struct ModelSpec {
    rho: RhoDistribution,
    conditionals: ClassConditionals,
}

impl TryFrom<ModelSpec> for LatentClassModel {
    type Error = Error;

    fn try_from(spec: ModelSpec) -> Result<Self> {
        LatentClassModel::new(spec.rho, spec.conditionals)
    }
}

impl From<LatentClassModel> for ModelSpec {
    fn from(m: LatentClassModel) -> Self {
        ModelSpec {
            rho: m.rho,
            conditionals: m.conditionals,
        }
    }
}

impl PartialEq for LatentClassModel {
    fn eq(&self, other: &Self) -> bool {
        self.rho == other.rho && self.conditionals == other.conditionals
    }
}

#[derive(Debug, Clone)]
struct Samplers {
    rho: WeightedIndex<f64>,
    support: Vec<WeightedIndex<f64>>,
}

impl LatentClassModel {
    pub fn new(rho: RhoDistribution, conditionals: ClassConditionals) -> Result<Self> {
        let classes = rho.num_classes();
        match &conditionals {
            ClassConditionals::Gaussian { means, std } => {
                if means.len() != classes {
                    return Err(Error::DimensionMismatch {
                        context: "class means",
                        expected: classes,
                        actual: means.len(),
                    });
                }
                if !(*std >= 0.0) {
                    return Err(Error::config("class std must be >= 0"));
                }
                let d = means[0].len();
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return Err(Error::config("class means must share a nonzero dimension"));
                }
            }
            ClassConditionals::Discrete { support } => {
                if support.len() != classes {
                    return Err(Error::DimensionMismatch {
                        context: "class support tables",
                        expected: classes,
                        actual: support.len(),
                    });
                }
                let d = support
                    .first()
                    .and_then(|s| s.first())
                    .map(|p| p.x.len())
                    .unwrap_or(0);
                for (c, table) in support.iter().enumerate() {
                    if table.is_empty() {
                        return Err(Error::config(format!("class {c} has empty support")));
                    }
                    let total: f64 = table.iter().map(|p| p.prob).sum();
                    if (total - 1.0).abs() > 1e-9 || table.iter().any(|p| !(p.prob >= 0.0)) {
                        return Err(Error::config(format!(
                            "class {c} support probabilities sum to {total}"
                        )));
                    }
                    if d == 0 || table.iter().any(|p| p.x.len() != d) {
                        return Err(Error::config(
                            "support points must share a nonzero dimension",
                        ));
                    }
                }
            }
        }
        let samplers = build_samplers(&rho, &conditionals)?;
        Ok(Self {
            rho,
            conditionals,
            samplers,
        })
    }
}

fn build_samplers(rho: &RhoDistribution, conditionals: &ClassConditionals) -> Result<Samplers> {
    let rho = WeightedIndex::new(rho.probs().iter().copied())
        .map_err(|e| Error::config(format!("class distribution: {e}")))?;
    let support = match conditionals {
        ClassConditionals::Gaussian { .. } => Vec::new(),
        ClassConditionals::Discrete { support } => support
            .iter()
            .map(|t| {
                WeightedIndex::new(t.iter().map(|p| p.prob))
                    .map_err(|e| Error::config(format!("support table: {e}")))
            })
            .collect::<Result<_>>()?,
    };
    Ok(Samplers { rho, support })
}

impl LatentClassModel {
    pub fn rho(&self) -> &RhoDistribution {
        &self.rho
    }

    pub fn conditionals(&self) -> &ClassConditionals {
        &self.conditionals
    }

    /// Random spherical-Gaussian model: class means drawn from `N(0, separation^2 I)`.
    pub fn random_gaussian(
        rho: RhoDistribution,
        dim: usize,
        separation: f64,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..rho.num_classes())
            .map(|_| {
                (0..dim)
                    .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self::new(rho, ClassConditionals::Gaussian { means, std })
    }

    pub fn num_classes(&self) -> usize {
        self.rho.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        match &self.conditionals {
            ClassConditionals::Gaussian { means, .. } => means[0].len(),
            ClassConditionals::Discrete { support } => support[0][0].x.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.conditionals, ClassConditionals::Discrete { .. })
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.samplers.rho.sample(rng)
    }

    pub fn sample_input<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        match &self.conditionals {
            ClassConditionals::Gaussian { means, std } => means[class]
                .iter()
                .map(|&m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            ClassConditionals::Discrete { support } => {
                let i = self.samplers.support[class].sample(rng);
                support[class][i].x.clone()
            }
        }
    }
}
