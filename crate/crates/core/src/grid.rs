//! Hyperparameter grids and the three model-selection criteria.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundReport, RiskKind};
use crate::certify::{certify, CertifyOptions, Setting};
use crate::checkpoint::Checkpoint;
use crate::data::{ContrastiveDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::train::{
    train, train_supervised, EarlyStopping, RunRecord, TrainConfig, TrainObjective,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// Posterior-averaged validation loss.
    #[serde(rename = "s-valid")]
    SValid,
    /// Validation loss of the mean network.
    #[serde(rename = "det-valid")]
    DetValid,
    /// Selection bound on train and validation data pooled.
    #[serde(rename = "PB")]
    Pb,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::SValid, Criterion::DetValid, Criterion::Pb];

    pub fn early_stopping(self) -> EarlyStopping {
        match self {
            Criterion::SValid => EarlyStopping::SValid,
            Criterion::DetValid => EarlyStopping::DetValid,
            Criterion::Pb => EarlyStopping::Off,
        }
    }

    /// Ranking metric of a finished run under this criterion.
    pub fn metric(self, record: &RunRecord) -> Option<f64> {
        let best = record.best_metrics();
        match self {
            Criterion::SValid => best.and_then(|m| m.s_valid),
            Criterion::DetValid => best.and_then(|m| m.det_valid),
            Criterion::Pb => record.bound,
        }
        .filter(|v| !v.is_nan())
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::SValid => "s-valid",
            Criterion::DetValid => "det-valid",
            Criterion::Pb => "PB",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-valid" => Ok(Criterion::SValid),
            "det-valid" => Ok(Criterion::DetValid),
            "PB" | "pb" => Ok(Criterion::Pb),
            other => Err(Error::config(format!(
                "unknown selection criterion `{other}`"
            ))),
        }
    }
}

/// A base configuration crossed with optional sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_exponents: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizers: Option<Vec<OptimizerKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rates: Option<Vec<f64>>,
}

impl GridSpec {
    /// Cartesian product in the order lambda, optimizer, learning rate.
    pub fn expand(&self) -> Vec<TrainConfig> {
        let lambdas: Vec<Option<i32>> = match &self.lambda_exponents {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let opts: Vec<Option<OptimizerKind>> = match &self.optimizers {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let lrs: Vec<Option<f64>> = match &self.learning_rates {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut out = Vec::new();
        for a in &lambdas {
            for o in &opts {
                for lr in &lrs {
                    let mut cfg = self.base.clone();
                    if let Some(a) = a {
                        cfg.lambda = None;
                        cfg.lambda_exponent = Some(*a);
                    }
                    if let Some(o) = o {
                        cfg.optimizer = *o;
                    }
                    if let Some(lr) = lr {
                        cfg.learning_rate = *lr;
                    }
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Data handed to a grid search.
#[derive(Debug, Clone, Copy)]
pub struct GridData<'a> {
    pub train: &'a ContrastiveDataset,
    pub valid: Option<&'a ContrastiveDataset>,
    /// Labelled data for the supervised baseline.
    pub labeled_train: Option<&'a LabeledDataset>,
    pub labeled_valid: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub criterion: Criterion,
    /// Position of the configuration in the grid.
    pub config_index: usize,
    pub record: RunRecord,
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    #[serde(rename = "config-id")]
    pub config_id: String,
    pub criterion: Criterion,
    pub objective: TrainObjective,
    pub metric: f64,
    pub bound: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub runs: Vec<GridRun>,
    /// Per criterion, grouped by objective in grid order, each group ranked by metric then grid order.
    pub leaderboard: Vec<LeaderboardRow>,
    /// Winning run index into `runs` per criterion and objective.
    pub winners: Vec<(Criterion, usize)>,
}

pub fn config_id(index: usize) -> String {
    format!("c{index:03}")
}

/// Setting implied by a training configuration.
pub fn setting_for(cfg: &TrainConfig, data: &ContrastiveDataset) -> Setting {
    match cfg.objective {
        TrainObjective::Noniid => Setting::Noniid {
            t: cfg.t.unwrap_or_else(|| data.dependency_t()),
        },
        _ => Setting::Iid,
    }
}

/// Certificate of a checkpoint on its training data: zero-one risk, with the
/// selection bound matching the objective's setting.
pub fn selection_report(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    data: &ContrastiveDataset,
) -> Result<BoundReport> {
    let opts = CertifyOptions {
        mc_samples: cfg.mc_samples,
        delta: cfg.delta,
        b: cfg.b,
        c: cfg.c,
        loss: cfg.loss,
        lambda: None,
        seed: cfg.seed,
    };
    certify(
        &ckpt.arch,
        &ckpt.posterior(),
        &ckpt.prior(),
        data,
        setting_for(cfg, data),
        RiskKind::ZeroOne,
        &opts,
    )
}

pub fn selection_certificate(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    data: &ContrastiveDataset,
) -> Result<f64> {
    Ok(selection_report(cfg, ckpt, data)?.bound_value)
}

/// Runs every configuration once per criterion. PB runs train on train and
/// validation data pooled, without early stopping.
pub fn grid_search(
    grid: &[TrainConfig],
    criteria: &[Criterion],
    data: GridData<'_>,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    if criteria.is_empty() {
        return Err(Error::config("no selection criteria given"));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let needs_valid = criteria.iter().any(|c| *c != Criterion::Pb);
    let has_contrastive = grid
        .iter()
        .any(|c| c.objective != TrainObjective::SupervisedBaseline);
    if needs_valid && has_contrastive && data.valid.is_none() {
        return Err(Error::config("s-valid and det-valid need a validation set"));
    }
    let pooled = match (criteria.contains(&Criterion::Pb), data.valid) {
        (true, Some(v)) => Some(data.train.merge(v)?),
        _ => None,
    };

    let mut runs = Vec::new();
    for &criterion in criteria {
        for (i, cfg) in grid.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.early_stopping = criterion.early_stopping();
            let outcome = if cfg.objective == TrainObjective::SupervisedBaseline {
                if criterion == Criterion::Pb {
                    warn!(
                        "{}: the PB criterion does not apply to the supervised baseline",
                        config_id(i)
                    );
                    continue;
                }
                let lt = data.labeled_train.ok_or_else(|| {
                    Error::config("the supervised baseline needs labelled training data")
                })?;
                let lv = data.labeled_valid.ok_or_else(|| {
                    Error::config("the supervised baseline needs labelled validation data")
                })?;
                train_supervised(&cfg, lt, Some(lv))?
            } else if criterion == Criterion::Pb {
                let train_set = pooled.as_ref().unwrap_or(data.train);
                let mut out = train(&cfg, train_set, None)?;
                if let Some(ckpt) = &out.checkpoint {
                    out.record.bound = Some(selection_certificate(&cfg, ckpt, train_set)?);
                }
                out
            } else {
                let mut out = train(&cfg, data.train, data.valid)?;
                if let Some(ckpt) = &out.checkpoint {
                    out.record.bound = Some(selection_certificate(&cfg, ckpt, data.train)?);
                }
                out
            };
            let mut record = outcome.record;
            record.config_id = config_id(i);
            record.criterion = Some(criterion.to_string());
            if !record.is_completed() {
                warn!(
                    "{} ({criterion}) aborted and is excluded from selection",
                    record.config_id
                );
            }
            runs.push(GridRun {
                criterion,
                config_index: i,
                record,
                checkpoint: outcome.checkpoint,
            });
        }
    }
    let (leaderboard, winners) = rank(&runs, criteria);
    Ok(GridResult {
        runs,
        leaderboard,
        winners,
    })
}

/// Leaderboard rows and winners over finished runs. Runs compete only with
/// runs of the same objective, since their metrics are different losses;
/// each (criterion, objective) pair gets a winner. Ties go to the earlier
/// grid position.
pub fn rank(
    runs: &[GridRun],
    criteria: &[Criterion],
) -> (Vec<LeaderboardRow>, Vec<(Criterion, usize)>) {
    let mut objectives: Vec<TrainObjective> = Vec::new();
    let mut by_position: Vec<&GridRun> = runs.iter().collect();
    by_position.sort_by_key(|r| r.config_index);
    for r in by_position {
        if !objectives.contains(&r.record.config.objective) {
            objectives.push(r.record.config.objective);
        }
    }
    let mut leaderboard = Vec::new();
    let mut winners = Vec::new();
    for &criterion in criteria {
        for &objective in &objectives {
            let mut scored: Vec<(f64, usize, usize)> = runs
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    r.criterion == criterion
                        && r.record.config.objective == objective
                        && r.record.is_completed()
                })
                .filter_map(|(idx, r)| {
                    criterion
                        .metric(&r.record)
                        .map(|m| (m, r.config_index, idx))
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(&(_, _, idx)) = scored.first() {
                winners.push((criterion, idx));
            }
            for (metric, _, idx) in scored {
                let r = &runs[idx].record;
                leaderboard.push(LeaderboardRow {
                    config_id: r.config_id.clone(),
                    criterion,
                    objective,
                    metric,
                    bound: r.bound,
                    checkpoint: r.checkpoint.clone(),
                });
            }
        }
    }
    (leaderboard, winners)
}
