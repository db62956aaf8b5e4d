//! File formats: the binary feature matrix, JSON dataset manifests, labelled
//! CSV tables and sequence manifests.
//!
//! Feature matrices are stored as a 16-byte header (`PBCURLF1`, row count as
//! little-endian `u32`, dimension as little-endian `u32`) followed by the
//! values as little-endian `f64` in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::dataset::{ContrastiveDataset, DatasetProvenance, LabeledDataset, Split, TupleIndex};
use super::sequences::Sequence;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"PBCURLF1";

pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let rows = u32::try_from(features.nrows())
        .map_err(|_| Error::TooLarge(format!("{} rows", features.nrows())))?;
    let dim = u32::try_from(features.ncols())
        .map_err(|_| Error::TooLarge(format!("{} columns", features.ncols())))?;
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = || format!("writing {}", path.display());
    w.write_all(FEATURE_MAGIC)
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&rows.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&dim.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    for v in features.iter() {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing PBCURLF1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * dim * 8 {
        return Err(bad(format!(
            "header says {rows}x{dim} values but the body holds {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), values).expect("checked length"))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    /// Feature file, relative to the manifest's directory.
    features: String,
    rows: usize,
    dim: usize,
    k: usize,
    block_size: usize,
    dependency_t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<Vec<f64>>,
    provenance: DatasetProvenance,
    tuples: Vec<TupleIndex>,
}

/// Writes `<stem>.json` (manifest) and `<stem>.features.bin` next to it.
pub fn save_dataset(dataset: &ContrastiveDataset, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("bad manifest path {}", manifest_path.display())))?;
    let feature_name = format!("{stem}.features.bin");
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    write_features(&dir.join(&feature_name), dataset.features())?;
    let manifest = Manifest {
        features: feature_name,
        rows: dataset.features().nrows(),
        dim: dataset.input_dim(),
        k: dataset.k(),
        block_size: dataset.block_size(),
        dependency_t: dataset.dependency_t(),
        rho: dataset.rho().map(<[f64]>::to_vec),
        provenance: dataset.provenance.clone(),
        tuples: dataset.tuples().to_vec(),
    };
    write_json(manifest_path, &manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<ContrastiveDataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let features_path = dir.join(&manifest.features);
    let features = read_features(&features_path)?;
    if features.nrows() != manifest.rows || features.ncols() != manifest.dim {
        return Err(Error::Format {
            path: features_path,
            message: format!(
                "manifest expects {}x{} but file holds {}x{}",
                manifest.rows,
                manifest.dim,
                features.nrows(),
                features.ncols()
            ),
        });
    }
    let ds = ContrastiveDataset::new(
        features,
        manifest.tuples,
        manifest.k,
        manifest.block_size,
        manifest.dependency_t,
        manifest.provenance,
    )?;
    Ok(match manifest.rho {
        Some(r) => ds.with_rho(r),
        None => ds,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabeledManifest {
    features: String,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

/// Writes `<stem>.json` with labels and `<stem>.features.bin` with inputs.
pub fn save_labeled(dataset: &LabeledDataset, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("bad manifest path {}", manifest_path.display())))?;
    let feature_name = format!("{stem}.features.bin");
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    write_features(&dir.join(&feature_name), dataset.inputs())?;
    write_json(
        manifest_path,
        &LabeledManifest {
            features: feature_name,
            labels: dataset.labels().to_vec(),
            num_classes: dataset.num_classes(),
            split: dataset.split,
        },
    )
}

pub fn load_labeled(manifest_path: &Path) -> Result<LabeledDataset> {
    let manifest: LabeledManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let inputs = read_features(&dir.join(&manifest.features))?;
    LabeledDataset::new(
        inputs,
        manifest.labels,
        manifest.num_classes,
        manifest.split,
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(format!("serialising {}", path.display()), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

/// Per-dimension standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Mean and population standard deviation of each column.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let std = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &m)| (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
            .collect();
        Self {
            mean: mean.to_vec(),
            std,
        }
    }

    pub fn apply(&self, x: &mut Array2<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "normalisation statistics",
                expected: self.mean.len(),
                actual: x.ncols(),
            });
        }
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s.max(STD_FLOOR);
            }
        }
        Ok(())
    }
}

fn parse_rows(path: &Path, with_label: bool) -> Result<(Vec<Vec<f64>>, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let n = record.len();
        match width {
            None => width = Some(n),
            Some(w) if w != n => return Err(parse_err(format!("expected {w} fields, found {n}"))),
            _ => {}
        }
        let feature_cells = if with_label { n.saturating_sub(1) } else { n };
        if feature_cells == 0 {
            return Err(parse_err("row has no feature columns".into()));
        }
        let mut row = Vec::with_capacity(feature_cells);
        for (i, cell) in record.iter().take(feature_cells).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(format!("column {}: '{cell}' is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("column {}: non-finite value", i + 1)));
            }
            row.push(v);
        }
        if with_label {
            let cell = &record[n - 1];
            let y: i64 = cell
                .parse()
                .map_err(|_| parse_err(format!("label '{cell}' is not an integer")))?;
            if y < 0 {
                return Err(parse_err(format!("label {y} is negative")));
            }
            labels.push(y);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    }
    Ok((rows, labels))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let d = rows[0].len();
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular")
}

/// Reads a headerless CSV of features with a trailing integer label.
///
/// Without `stats`, the per-dimension statistics of this file are computed,
/// applied and returned; otherwise the given ones are applied. Labels must be
/// below `num_classes` when it is given, otherwise the class count is
/// `max label + 1`.
pub fn load_feature_csv(
    path: &Path,
    stats: Option<&NormStats>,
    num_classes: Option<usize>,
    split: Split,
) -> Result<(LabeledDataset, NormStats)> {
    let (rows, labels) = parse_rows(path, true)?;
    let classes = match num_classes {
        Some(c) => {
            if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y as usize >= c) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unknown label {y} (expected < {c})"),
                });
            }
            c
        }
        None => labels.iter().copied().max().unwrap() as usize + 1,
    };
    let mut x = to_matrix(rows);
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(&x),
    };
    stats.apply(&mut x)?;
    let ds = LabeledDataset::new(
        x,
        labels.into_iter().map(|y| y as usize).collect(),
        classes,
        split,
    )?;
    Ok((ds, stats))
}

/// Reads a headerless CSV of frames (one row per time step, no label).
pub fn load_sequence_csv(path: &Path) -> Result<Array2<f64>> {
    let (rows, _) = parse_rows(path, false)?;
    Ok(to_matrix(rows))
}

/// Reads a manifest CSV of `path,class` lines; paths are relative to the
/// manifest's directory.
pub fn load_sequence_manifest(path: &Path) -> Result<Vec<Sequence>> {
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 'path,class', found {} fields", record.len()),
            });
        }
        let class: usize = record[1].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("class '{}' is not a non-negative integer", &record[1]),
        })?;
        let frames = load_sequence_csv(&dir.join(&record[0]))?;
        out.push(Sequence { class, frames });
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "manifest lists no sequences".into(),
        });
    }
    Ok(out)
}

/// Writes one CSV per sequence plus `sequences.csv` into `dir`; returns the
/// manifest path.
pub fn write_sequence_corpus(dir: &Path, sequences: &[Sequence]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest_path = dir.join("sequences.csv");
    let mut manifest = String::new();
    for (i, s) in sequences.iter().enumerate() {
        let name = format!("seq_{i:05}.csv");
        let mut text = String::new();
        for row in s.frames.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(dir.join(&name), text).map_err(|e| Error::io(format!("writing {name}"), e))?;
        manifest.push_str(&format!("{name},{}\n", s.class));
    }
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}
