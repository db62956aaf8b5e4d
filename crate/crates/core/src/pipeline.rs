//! Dataset specifications, experiment configuration files, and the glue that
//! turns them into datasets, grid runs and certificates.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::RhoDistribution;
use crate::checkpoint::Checkpoint;
use crate::data::io::{load_labeled, load_sequence_manifest, save_labeled, write_json};
use crate::data::sequences::{labeled_frames, split_per_class, truncate_sequences};
use crate::data::{
    build_noniid_from_sequences, contrastive_from_labeled, load_dataset, sample_contrastive_iid,
    sample_labeled, save_dataset, ContrastiveDataset, LabeledDataset, LatentClassModel, NormStats,
    Sequence, SequenceCorpusSpec, Split, WindowOptions,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    mc_posterior_risk, supervised_metrics, McEstimate, RiskMeasure, SamplesPerClass,
};
use crate::grid::{grid_search, Criterion, GridData, GridResult, GridSpec};
use crate::losses::LossKind;
use crate::network::{map_network, Network};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Gaussian latent-class task sampled i.i.d.
    SyntheticIid(SyntheticSpec),
    /// Sliding-window tuples over a sequence corpus.
    Sequences(SequenceSpec),
    /// Previously written manifests.
    Files(FileSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Scale of the random class means.
    pub separation: f64,
    /// Within-class standard deviation.
    pub std: f64,
    pub k: usize,
    pub block_size: usize,
    /// Tuple counts per split.
    pub train: usize,
    #[serde(default)]
    pub valid: usize,
    #[serde(default)]
    pub test: usize,
    /// Labelled point counts per split, for the mean classifier.
    #[serde(default)]
    pub labeled_train: usize,
    #[serde(default)]
    pub labeled_valid: usize,
    #[serde(default)]
    pub labeled_test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    /// Synthetic corpus to generate; exclusive with `manifest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<SequenceCorpusSpec>,
    /// Sequence manifest (`path,class` lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Keep only the first frames of each sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate: Option<usize>,
    pub train_per_class: usize,
    #[serde(default)]
    pub valid_per_class: usize,
    /// How tuples are formed from the frames.
    #[serde(default)]
    pub construction: TupleConstruction,
    /// Block size B; for windows also the dependency length T.
    pub block: usize,
    pub k: usize,
    #[serde(default = "default_true")]
    pub allow_same_class: bool,
    /// Standardise frames with training-set statistics.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TupleConstruction {
    /// Anchor frame followed by the next `block` frames of its sequence.
    #[default]
    Windows,
    /// Frames treated as independent labelled points; positives are other
    /// frames of the same class.
    IidFrames,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_test: Option<PathBuf>,
}

/// All splits of a dataset held in memory.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub train: ContrastiveDataset,
    pub valid: Option<ContrastiveDataset>,
    pub test: Option<ContrastiveDataset>,
    pub labeled_train: Option<LabeledDataset>,
    pub labeled_valid: Option<LabeledDataset>,
    pub labeled_test: Option<LabeledDataset>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl DatasetSpec {
    /// Replaces the data seed of generated datasets.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            DatasetSpec::SyntheticIid(s) => s.seed = seed,
            DatasetSpec::Sequences(s) => {
                s.seed = seed;
                if let Some(c) = s.corpus.as_mut() {
                    c.seed = seed;
                }
            }
            DatasetSpec::Files(_) => {}
        }
    }

    /// Builds every split. Relative paths resolve against `base`.
    pub fn materialize(&self, base: &Path) -> Result<Materialized> {
        match self {
            DatasetSpec::SyntheticIid(s) => synthetic(s),
            DatasetSpec::Sequences(s) => sequences(s, base),
            DatasetSpec::Files(f) => files(f, base),
        }
    }
}

fn synthetic(s: &SyntheticSpec) -> Result<Materialized> {
    if s.classes == 0 || s.dim == 0 {
        return Err(Error::config("classes and dim must be >= 1"));
    }
    let model = LatentClassModel::random_gaussian(
        RhoDistribution::uniform(s.classes),
        s.dim,
        s.separation,
        s.std,
        s.seed,
    )?;
    let tuples = |n: usize, id: u64| -> Result<Option<ContrastiveDataset>> {
        if n == 0 {
            return Ok(None);
        }
        let ds = sample_contrastive_iid(&model, n, s.k, s.block_size, &mut stream(s.seed, id))?;
        Ok(Some(ds.with_seed(s.seed)))
    };
    let labeled = |n: usize, split: Split, id: u64| -> Result<Option<LabeledDataset>> {
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(sample_labeled(
            &model,
            n,
            split,
            &mut stream(s.seed, id),
        )?))
    };
    Ok(Materialized {
        train: tuples(s.train, 1)?.ok_or_else(|| Error::config("train must be >= 1"))?,
        valid: tuples(s.valid, 2)?,
        test: tuples(s.test, 3)?,
        labeled_train: labeled(s.labeled_train, Split::Train, 4)?,
        labeled_valid: labeled(s.labeled_valid, Split::Valid, 5)?,
        labeled_test: labeled(s.labeled_test, Split::Test, 6)?,
    })
}

fn sequences(s: &SequenceSpec, base: &Path) -> Result<Materialized> {
    let mut seqs: Vec<Sequence> = match (&s.corpus, &s.manifest) {
        (Some(c), None) => c.generate(0)?,
        (None, Some(m)) => load_sequence_manifest(&base.join(m))?,
        _ => return Err(Error::config("give exactly one of `corpus` and `manifest`")),
    };
    if let Some(len) = s.truncate {
        truncate_sequences(&mut seqs, len)?;
    }
    let num_classes = seqs.iter().map(|q| q.class + 1).max().unwrap_or(0);
    let (mut train, rest) = split_per_class(seqs, s.train_per_class);
    let (mut valid, mut test) = split_per_class(rest, s.valid_per_class);
    if train.is_empty() {
        return Err(Error::config("no training sequences"));
    }
    if s.normalize {
        let frames: Vec<_> = train.iter().map(|q| q.frames.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &frames)
            .map_err(|_| Error::config("sequences have different feature dimensions"))?;
        let stats = NormStats::fit(&stacked);
        for q in train
            .iter_mut()
            .chain(valid.iter_mut())
            .chain(test.iter_mut())
        {
            stats.apply(&mut q.frames)?;
        }
    }
    let opts = WindowOptions {
        block: s.block,
        k: s.k,
        allow_same_class: s.allow_same_class,
    };
    let label = |set: &[Sequence], split: Split| -> Result<Option<LabeledDataset>> {
        if set.is_empty() {
            return Ok(None);
        }
        Ok(Some(labeled_frames(set, num_classes, split)?))
    };
    let (lt, lv, ls) = (
        label(&train, Split::Train)?,
        label(&valid, Split::Valid)?,
        label(&test, Split::Test)?,
    );
    let build = |set: &[Sequence],
                 labeled: &Option<LabeledDataset>,
                 id: u64|
     -> Result<Option<ContrastiveDataset>> {
        let mut rng = stream(s.seed, id);
        let ds = match (s.construction, labeled) {
            (_, None) => return Ok(None),
            (TupleConstruction::Windows, Some(_)) => {
                build_noniid_from_sequences(set, opts, &mut rng)?
            }
            (TupleConstruction::IidFrames, Some(l)) => {
                contrastive_from_labeled(l, s.k, s.block, &mut rng)?
            }
        };
        Ok(Some(ds.with_seed(s.seed)))
    };
    Ok(Materialized {
        train: build(&train, &lt, 1)?.expect("nonempty"),
        valid: build(&valid, &lv, 2)?,
        test: build(&test, &ls, 3)?,
        labeled_train: lt,
        labeled_valid: lv,
        labeled_test: ls,
    })
}

fn files(f: &FileSpec, base: &Path) -> Result<Materialized> {
    let opt_c = |p: &Option<PathBuf>| p.as_ref().map(|p| load_dataset(&base.join(p))).transpose();
    let opt_l = |p: &Option<PathBuf>| p.as_ref().map(|p| load_labeled(&base.join(p))).transpose();
    Ok(Materialized {
        train: load_dataset(&base.join(&f.train))?,
        valid: opt_c(&f.valid)?,
        test: opt_c(&f.test)?,
        labeled_train: opt_l(&f.labeled_train)?,
        labeled_valid: opt_l(&f.labeled_valid)?,
        labeled_test: opt_l(&f.labeled_test)?,
    })
}

impl Materialized {
    /// Writes every split into `dir` and returns the file spec, with paths
    /// relative to `dir`. The spec itself is written to `dir/dataset.json`.
    pub fn save(&self, dir: &Path) -> Result<FileSpec> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let save_c = |d: &ContrastiveDataset, name: &str| -> Result<PathBuf> {
            let p = PathBuf::from(format!("{name}.json"));
            save_dataset(d, &dir.join(&p))?;
            Ok(p)
        };
        let save_l = |d: &LabeledDataset, name: &str| -> Result<PathBuf> {
            let p = PathBuf::from(format!("{name}.json"));
            save_labeled(d, &dir.join(&p))?;
            Ok(p)
        };
        let spec = FileSpec {
            train: save_c(&self.train, "train")?,
            valid: self
                .valid
                .as_ref()
                .map(|d| save_c(d, "valid"))
                .transpose()?,
            test: self.test.as_ref().map(|d| save_c(d, "test")).transpose()?,
            labeled_train: self
                .labeled_train
                .as_ref()
                .map(|d| save_l(d, "labeled_train"))
                .transpose()?,
            labeled_valid: self
                .labeled_valid
                .as_ref()
                .map(|d| save_l(d, "labeled_valid"))
                .transpose()?,
            labeled_test: self
                .labeled_test
                .as_ref()
                .map(|d| save_l(d, "labeled_test"))
                .transpose()?,
        };
        write_json(&dir.join("dataset.json"), &DatasetSpec::Files(spec.clone()))?;
        Ok(spec)
    }

    /// Training set of a run under `criterion`: PB pools train and valid.
    pub fn training_set(&self, criterion: Criterion) -> Result<ContrastiveDataset> {
        match (criterion, &self.valid) {
            (Criterion::Pb, Some(v)) => self.train.merge(v),
            _ => Ok(self.train.clone()),
        }
    }

    pub fn grid_data(&self) -> GridData<'_> {
        GridData {
            train: &self.train,
            valid: self.valid.as_ref(),
            labeled_train: self.labeled_train.as_ref(),
            labeled_valid: self.labeled_valid.as_ref(),
        }
    }
}

/// An experiment file: data, hyperparameter grid and selection criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Explicit configurations, run first and in order.
    #[serde(default)]
    pub grid: Vec<TrainConfig>,
    /// A base configuration crossed with sweeps, appended after `grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<GridSpec>,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<Criterion>,
    /// Global seed; overrides every training and data seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_criteria() -> Vec<Criterion> {
    vec![Criterion::Pb]
}

impl RunConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.set_seed(seed);
    }

    /// The grid in execution order, with the global seed applied.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = self.grid.clone();
        if let Some(sweep) = &self.sweep {
            out.extend(sweep.expand());
        }
        if let Some(seed) = self.seed {
            out.iter_mut().for_each(|c| c.seed = seed);
        }
        out
    }

    pub fn run(&self, data: &Materialized) -> Result<GridResult> {
        grid_search(&self.configs(), &self.criteria, data.grid_data())
    }
}

/// Settings of [`evaluate_checkpoint`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Posterior draws per Monte Carlo risk estimate.
    pub mc_samples: usize,
    /// Points per class of the subsampled mean classifier.
    pub subset: usize,
    /// Independent subsets averaged for the subsampled classifier.
    pub repetitions: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            subset: 5,
            repetitions: 5,
            loss: LossKind::Logistic,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    /// `mu` (all points) or `mu-<n>`.
    pub classifier: String,
    pub avg2: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean classifiers on the MAP network's representation.
    pub classifiers: Vec<ClassifierMetrics>,
    /// Posterior-averaged contrastive zero-one risk on the training tuples.
    pub train_risk: McEstimate,
    pub train_loss: McEstimate,
    /// The same on held-out tuples.
    pub test_risk: Option<McEstimate>,
    pub test_loss: Option<McEstimate>,
    /// `|train_risk - test_risk|`.
    pub risk_gap: Option<f64>,
}

/// Supervised metrics and Monte Carlo contrastive risks of a checkpoint.
/// `trained_on` is the tuple set the posterior was fitted to.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    trained_on: &ContrastiveDataset,
    data: &Materialized,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let post = ckpt.posterior();
    let map = map_network(&post);
    let net = Network::new(&ckpt.arch, &map)?;
    let mut classifiers = Vec::new();
    if let (Some(train), Some(test)) = (&data.labeled_train, &data.labeled_test) {
        let mut rng = stream(opts.seed, 7);
        for spc in [SamplesPerClass::All, SamplesPerClass::Count(opts.subset)] {
            let m = supervised_metrics(&net, train, test, spc, opts.repetitions, &mut rng)?;
            classifiers.push(ClassifierMetrics {
                classifier: spc.to_string(),
                avg2: m.avg2,
                top1: m.top1,
                top5: m.top5,
            });
        }
    }
    let mc = |set: &ContrastiveDataset, measure: RiskMeasure, id: u64| {
        mc_posterior_risk(
            &ckpt.arch,
            &post,
            set,
            opts.mc_samples,
            measure,
            &mut stream(opts.seed, id),
        )
    };
    let train_risk = mc(trained_on, RiskMeasure::ZeroOne, 8)?;
    let train_loss = mc(trained_on, RiskMeasure::Loss(opts.loss), 9)?;
    let (test_risk, test_loss) = match &data.test {
        Some(t) => (
            Some(mc(t, RiskMeasure::ZeroOne, 10)?),
            Some(mc(t, RiskMeasure::Loss(opts.loss), 11)?),
        ),
        None => (None, None),
    };
    let risk_gap = test_risk.as_ref().map(|t| (train_risk.mean - t.mean).abs());
    Ok(EvalReport {
        classifiers,
        train_risk,
        train_loss,
        test_risk,
        test_loss,
        risk_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainObjective;

    fn synthetic_spec() -> DatasetSpec {
        DatasetSpec::SyntheticIid(SyntheticSpec {
            classes: 3,
            dim: 4,
            separation: 2.0,
            std: 0.5,
            k: 2,
            block_size: 1,
            train: 50,
            valid: 20,
            test: 10,
            labeled_train: 30,
            labeled_valid: 0,
            labeled_test: 15,
            seed: 4,
        })
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = synthetic_spec();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"synthetic-iid\""));
        assert_eq!(serde_json::from_str::<DatasetSpec>(&text).unwrap(), spec);
        let bad = text.replace("\"dim\"", "\"dims\"");
        assert!(serde_json::from_str::<DatasetSpec>(&bad).is_err());
    }

    #[test]
    fn synthetic_materialises_all_splits() {
        let m = synthetic_spec().materialize(Path::new(".")).unwrap();
        assert_eq!(m.train.len(), 50);
        assert_eq!(m.valid.as_ref().unwrap().len(), 20);
        assert_eq!(m.test.as_ref().unwrap().len(), 10);
        assert_eq!(m.labeled_train.as_ref().unwrap().len(), 30);
        assert!(m.labeled_valid.is_none());
        assert_eq!(m.training_set(Criterion::Pb).unwrap().len(), 70);
        assert_eq!(m.training_set(Criterion::SValid).unwrap().len(), 50);
        // same spec, same data
        let again = synthetic_spec().materialize(Path::new(".")).unwrap();
        assert_eq!(again.train.content_hash(), m.train.content_hash());
    }

    #[test]
    fn saved_files_reload_identically() {
        let m = synthetic_spec().materialize(Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let spec: DatasetSpec =
            crate::data::io::read_json(&dir.path().join("dataset.json")).unwrap();
        let back = spec.materialize(dir.path()).unwrap();
        assert_eq!(back.train.content_hash(), m.train.content_hash());
        assert_eq!(
            back.test.unwrap().content_hash(),
            m.test.unwrap().content_hash()
        );
        assert_eq!(
            back.labeled_test.unwrap().labels(),
            m.labeled_test.unwrap().labels()
        );
    }

    #[test]
    fn sequence_spec_splits_per_class() {
        let spec = DatasetSpec::Sequences(SequenceSpec {
            corpus: Some(SequenceCorpusSpec {
                classes: 3,
                sequences_per_class: 5,
                length: 10,
                dim: 2,
                separation: 1.0,
                std: 0.5,
                phi: 0.5,
                seed: 1,
            }),
            manifest: None,
            truncate: None,
            train_per_class: 3,
            valid_per_class: 1,
            construction: TupleConstruction::Windows,
            block: 2,
            k: 1,
            allow_same_class: true,
            normalize: true,
            seed: 2,
        });
        let m = spec.materialize(Path::new(".")).unwrap();
        assert_eq!(m.train.len(), 3 * 3 * 8);
        assert_eq!(m.valid.unwrap().len(), 3 * 8);
        assert_eq!(m.test.unwrap().len(), 3 * 8);
        assert_eq!(m.train.dependency_t(), 2);
        assert_eq!(m.labeled_train.unwrap().len(), 90);
    }

    #[test]
    fn global_seed_overrides_configs() {
        let arch = crate::network::Architecture::new(vec![4, 2]).unwrap();
        let mut cfg = TrainConfig::new(TrainObjective::Iid, arch);
        cfg.lambda = Some(1.0);
        let mut rc = RunConfig {
            dataset: synthetic_spec(),
            grid: vec![cfg],
            sweep: None,
            criteria: default_criteria(),
            seed: None,
        };
        rc.apply_seed(99);
        assert_eq!(rc.configs()[0].seed, 99);
        match &rc.dataset {
            DatasetSpec::SyntheticIid(s) => assert_eq!(s.seed, 99),
            _ => unreachable!(),
        }
    }
}
