//! Subcommand implementations and the on-disk layout of their outputs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use pbcurl_core::bounds::{BoundReport, Provenance, RiskKind};
use pbcurl_core::certify::{certify, CertifyOptions, Setting};
use pbcurl_core::checkpoint::Checkpoint;
use pbcurl_core::data::io::{read_json, write_json};
use pbcurl_core::data::ContrastiveDataset;
use pbcurl_core::grid::{rank, selection_report, Criterion, GridRun, LeaderboardRow};
use pbcurl_core::oracle::{run_verify, CoverageSettings, Status, VerifyOptions};
use pbcurl_core::pipeline::{
    evaluate_checkpoint, DatasetSpec, EvalOptions, EvalReport, Materialized, RunConfig,
};
use pbcurl_core::train::{RunRecord, TrainObjective};
use thiserror::Error;

use crate::{BoundArgs, Cli, Command, DataArgs, EvalArgs, RiskArg, SelectArgs, SplitArg};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pbcurl_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("no run finished: {0}")]
    NoCompletedRun(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    /// 1 failed verification, 2 invalid input, 3 numeric abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_validation() => 3,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::NoCompletedRun(_) => 3,
            CliError::VerifyFailed(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(context: String, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{context}: {e}"))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Usage(format!("writing {}: {e}", path.display()))
}

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| io_err(format!("creating {}", cli.out.display()), e))?;
    match &cli.command {
        Command::GenData { config } => gen_data(cli, config),
        Command::Train { config } => train(cli, config),
        Command::Bound(args) => bound(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Select(args) => select(cli, args),
        Command::Verify { quick } => verify(cli, *quick),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads an experiment configuration, or a bare dataset specification
/// wrapped into one with an empty grid.
fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let value: serde_json::Value = read_json(path)?;
    let mut config = if value.get("dataset").is_some() {
        serde_json::from_value::<RunConfig>(value)
    } else {
        serde_json::from_value::<DatasetSpec>(value).map(|dataset| RunConfig {
            dataset,
            grid: Vec::new(),
            sweep: None,
            criteria: vec![Criterion::Pb],
            seed: None,
        })
    }
    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed.or(config.seed) {
        config.apply_seed(s);
    }
    Ok(config)
}

fn materialize(path: &Path, seed: Option<u64>) -> Result<(RunConfig, Materialized)> {
    let config = load_config(path, seed)?;
    let data = config.dataset.materialize(&base_dir(path))?;
    Ok((config, data))
}

fn timestamp(deterministic: bool) -> Option<String> {
    if deterministic {
        return None;
    }
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Some(format!("unix:{secs}"))
}

fn gen_data(cli: &Cli, config: &Path) -> Result<()> {
    let (_, data) = materialize(config, cli.seed)?;
    data.save(&cli.out)?;
    println!(
        "wrote {} training tuples (hash {}) to {}",
        data.train.len(),
        data.train.content_hash(),
        cli.out.join("dataset.json").display()
    );
    Ok(())
}

fn write_leaderboard(path: &Path, rows: &[LeaderboardRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()
        .map_err(|e| io_err(format!("writing {}", path.display()), e))
}

fn write_jsonl(path: &Path, records: &[&RunRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Usage(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| io_err(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| io_err(format!("writing {}", path.display()), e))
}

fn run_name(record: &RunRecord) -> String {
    match &record.criterion {
        Some(c) => format!("{}-{c}", record.config_id),
        None => record.config_id.clone(),
    }
}

fn train(cli: &Cli, config_path: &Path) -> Result<()> {
    let (config, data) = materialize(config_path, cli.seed)?;
    let mut result = config.run(&data)?;

    let ckpt_dir = cli.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| io_err(format!("creating {}", ckpt_dir.display()), e))?;
    for run in result.runs.iter_mut() {
        if cli.deterministic {
            run.record.wall_time_secs = None;
        }
        if let Some(ckpt) = &run.checkpoint {
            let rel = format!("checkpoints/{}.json", run_name(&run.record));
            ckpt.save(&cli.out.join(&rel))?;
            run.record.checkpoint = Some(rel);
        }
    }
    let (leaderboard, winners) = rank(&result.runs, &config.criteria);
    result.leaderboard = leaderboard;
    result.winners = winners;

    write_jsonl(
        &cli.out.join("runs.jsonl"),
        &result.runs.iter().map(|r| &r.record).collect::<Vec<_>>(),
    )?;
    write_leaderboard(&cli.out.join("leaderboard.csv"), &result.leaderboard)?;

    if result.winners.is_empty() {
        return Err(CliError::NoCompletedRun(format!(
            "every run in {} aborted",
            config_path.display()
        )));
    }
    let configs = config.configs();
    for &(criterion, idx) in &result.winners {
        let run = &result.runs[idx];
        let objective = run.record.config.objective;
        let Some(ckpt) = run
            .checkpoint
            .as_ref()
            .filter(|_| objective != TrainObjective::SupervisedBaseline)
        else {
            println!(
                "{criterion}: {} selected among {objective:?} runs (no certificate)",
                run.record.config_id
            );
            continue;
        };
        let train_set = data.training_set(criterion)?;
        let cfg = &configs[run.config_index];
        let mut report = selection_report(cfg, ckpt, &train_set)?;
        report.provenance = Some(Provenance {
            checkpoint: run.record.checkpoint.clone(),
            dataset_hash: Some(train_set.content_hash()),
            timestamp: timestamp(cli.deterministic),
        });
        let path = cli
            .out
            .join(format!("bound_{}.json", run_name(&run.record)));
        write_json(&path, &report)?;
        println!(
            "{criterion}: {} selected among {objective:?} runs, certificate {:.4} ({})",
            run.record.config_id,
            report.bound_value,
            path.display()
        );
    }
    Ok(())
}

fn split_of(data: &Materialized, split: SplitArg) -> Result<ContrastiveDataset> {
    let missing = |name: &str| CliError::Usage(format!("the dataset has no {name} split"));
    Ok(match split {
        SplitArg::Train => data.train.clone(),
        SplitArg::Valid => data.valid.clone().ok_or_else(|| missing("valid"))?,
        SplitArg::Test => data.test.clone().ok_or_else(|| missing("test"))?,
        SplitArg::Pooled => data.training_set(Criterion::Pb)?,
    })
}

fn load_split(args: &DataArgs, seed: Option<u64>) -> Result<ContrastiveDataset> {
    let (_, data) = materialize(&args.data, seed)?;
    split_of(&data, args.split)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn bound(cli: &Cli, args: &BoundArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_split(&args.data, cli.seed)?;
    let setting = match (args.iid, args.noniid, args.t) {
        (_, true, Some(t)) => Setting::Noniid { t },
        (_, true, None) => return Err(CliError::Usage("--noniid needs --T".into())),
        _ => Setting::Iid,
    };
    let opts = CertifyOptions {
        mc_samples: args.mc_samples,
        delta: args.delta,
        b: args.b,
        c: args.c,
        loss: args.loss.into(),
        lambda: args.lambda,
        seed: cli.seed.unwrap_or(ckpt.seed),
    };
    let risk = match args.risk {
        RiskArg::Loss => RiskKind::Loss,
        RiskArg::ZeroOne => RiskKind::ZeroOne,
    };
    let mut report: BoundReport = certify(
        &ckpt.arch,
        &ckpt.posterior(),
        &ckpt.prior(),
        &data,
        setting,
        risk,
        &opts,
    )?;
    report.provenance = Some(Provenance {
        checkpoint: Some(args.checkpoint.display().to_string()),
        dataset_hash: Some(data.content_hash()),
        timestamp: timestamp(cli.deterministic),
    });
    let id = args.id.clone().unwrap_or_else(|| stem(&args.checkpoint));
    let path = cli.out.join(format!("bound_{id}.json"));
    write_json(&path, &report)?;
    println!(
        "{:?} certificate {:.6} (empirical risk {:.4}, {:?} {:.4}) -> {}",
        report.form,
        report.bound_value,
        report.empirical_risk,
        report.divergence_kind,
        report.divergence_value,
        path.display()
    );
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (_, data) = materialize(&args.data, cli.seed)?;
    let trained_on = data.training_set(args.criterion)?;
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for path in &args.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let opts = EvalOptions {
            mc_samples: args.mc_samples,
            subset: args.subset,
            repetitions: args.repetitions,
            loss: args.loss.into(),
            seed: cli.seed.unwrap_or(ckpt.seed),
        };
        let report = evaluate_checkpoint(&ckpt, &trained_on, &data, &opts)?;
        for c in &report.classifiers {
            println!(
                "{} {}: avg-2 {:.4}  top-1 {:.4}  top-5 {:.4}",
                path.display(),
                c.classifier,
                c.avg2,
                c.top1,
                c.top5
            );
        }
        if let Some(gap) = report.risk_gap {
            println!("{}: risk gap {gap:.4}", path.display());
        }
        reports.push((path.display().to_string(), report));
    }

    let csv_path = cli.out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record([
        "checkpoint",
        "classifier",
        "avg2",
        "top1",
        "top5",
        "train_risk",
        "test_risk",
        "risk_gap",
        "train_loss",
        "test_loss",
    ])
    .map_err(|e| csv_err(&csv_path, e))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in &reports {
        let tail = [
            r.train_risk.mean.to_string(),
            fmt(r.test_risk.as_ref().map(|e| e.mean)),
            fmt(r.risk_gap),
            r.train_loss.mean.to_string(),
            fmt(r.test_loss.as_ref().map(|e| e.mean)),
        ];
        let heads: Vec<[String; 4]> = if r.classifiers.is_empty() {
            vec![[String::new(), String::new(), String::new(), String::new()]]
        } else {
            r.classifiers
                .iter()
                .map(|c| {
                    [
                        c.classifier.clone(),
                        c.avg2.to_string(),
                        c.top1.to_string(),
                        c.top5.to_string(),
                    ]
                })
                .collect()
        };
        for head in heads {
            let row: Vec<&str> = std::iter::once(name.as_str())
                .chain(head.iter().map(String::as_str))
                .chain(tail.iter().map(String::as_str))
                .collect();
            w.write_record(row).map_err(|e| csv_err(&csv_path, e))?;
        }
    }
    w.flush()
        .map_err(|e| io_err(format!("writing {}", csv_path.display()), e))?;
    let json: Vec<serde_json::Value> = reports
        .iter()
        .map(|(name, r)| serde_json::json!({ "checkpoint": name, "report": r }))
        .collect();
    write_json(&cli.out.join("metrics.json"), &json)?;
    Ok(())
}

fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| io_err(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

fn select(cli: &Cli, args: &SelectArgs) -> Result<()> {
    let records = read_runs(&args.runs)?;
    let mut runs = Vec::with_capacity(records.len());
    for record in records {
        let criterion: Criterion = match &record.criterion {
            Some(c) => c.parse()?,
            None => {
                return Err(CliError::Usage(format!(
                    "run {} has no criterion",
                    record.config_id
                )))
            }
        };
        let config_index = record
            .config_id
            .trim_start_matches('c')
            .parse()
            .map_err(|_| {
                CliError::Usage(format!("unrecognised config id `{}`", record.config_id))
            })?;
        runs.push(GridRun {
            criterion,
            config_index,
            record,
            checkpoint: None,
        });
    }
    let criteria = if args.criteria.is_empty() {
        let mut seen = Vec::new();
        for r in &runs {
            if !seen.contains(&r.criterion) {
                seen.push(r.criterion);
            }
        }
        seen
    } else {
        args.criteria.clone()
    };

    let runs_dir = base_dir(&args.runs);
    let mut reports = Vec::new();
    if let Some(config_path) = &args.config {
        let (_, data) = materialize(config_path, cli.seed)?;
        for run in runs.iter_mut().filter(|r| r.record.is_completed()) {
            let Some(rel) = run.record.checkpoint.clone() else {
                continue;
            };
            if run.record.config.objective == TrainObjective::SupervisedBaseline {
                continue;
            }
            let ckpt = Checkpoint::load(&runs_dir.join(&rel))?;
            let train_set = data.training_set(run.criterion)?;
            let mut report = selection_report(&run.record.config, &ckpt, &train_set)?;
            report.provenance = Some(Provenance {
                checkpoint: Some(rel),
                dataset_hash: Some(train_set.content_hash()),
                timestamp: timestamp(cli.deterministic),
            });
            run.record.bound = Some(report.bound_value);
            reports.push((run_name(&run.record), report));
        }
    }
    let (leaderboard, winners) = rank(&runs, &criteria);
    write_leaderboard(&cli.out.join("leaderboard.csv"), &leaderboard)?;
    if winners.is_empty() {
        return Err(CliError::NoCompletedRun(format!(
            "no finished run in {}",
            args.runs.display()
        )));
    }
    for (criterion, idx) in winners {
        let r = &runs[idx].record;
        let metric = criterion.metric(r).unwrap_or(f64::NAN);
        println!(
            "{criterion}: {} (metric {metric:.6}, bound {:?})",
            r.config_id, r.bound
        );
        if let Some((name, report)) = reports.iter().find(|(n, _)| *n == run_name(r)) {
            write_json(&cli.out.join(format!("bound_{name}.json")), report)?;
        }
    }
    Ok(())
}

fn verify(cli: &Cli, quick: bool) -> Result<()> {
    let mut opts = if quick {
        let d = VerifyOptions::default();
        VerifyOptions {
            lemma_instances: 50,
            tau_rho_draws: 3,
            divergence_instances: 10,
            divergence_samples: 20_000,
            coverage: CoverageSettings {
                trials: 40,
                ..d.coverage
            },
            fd_probes: 50,
            cross_instances: 1,
            cross_samples: 50_000,
            ..d
        }
    } else {
        VerifyOptions::default()
    };
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    info!(
        "running verification suite ({})",
        if quick { "quick" } else { "full" }
    );
    let mut report = run_verify(&opts)?;
    for v in &mut report.verdicts {
        let status = match v.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        let secs = v.seconds.map(|s| format!(" [{s:.1}s]")).unwrap_or_default();
        let gate = if v.gating { "" } else { " (diagnostic)" };
        println!("{status} {}{gate}: {}{secs}", v.check, v.summary);
        if cli.deterministic {
            v.seconds = None;
        }
    }
    write_json(&cli.out.join("verify.json"), &report)?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<_> = report
            .verdicts
            .iter()
            .filter(|v| v.gating && v.status != Status::Pass)
            .map(|v| v.check.as_str())
            .collect();
        if quick {
            warn!("quick mode uses reduced sample sizes");
        }
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}
