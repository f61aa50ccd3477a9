//! Dataset ingestion, box scaling, splits, the synthetic 1-D set and test metrics.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictiveDistribution;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per observation.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    /// Checks the invariants required for training: non-empty, finite values.
    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::EmptyData);
        }
        if self.d() == 0 {
            return Err(Error::InvalidArgument("dataset has no feature columns".into()));
        }
        if self.x.len() != self.y.len() {
            return Err(Error::LengthMismatch {
                left: self.x.len(),
                right: self.y.len(),
            });
        }
        for (i, (row, y)) in self.x.iter().zip(&self.y).enumerate() {
            if row.len() != self.d() {
                return Err(Error::SchemaMismatch {
                    expected: self.d(),
                    got: row.len(),
                });
            }
            if !y.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite value in row {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

fn sniff_delimiter(path: &Path) -> Result<u8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(if first.contains('\t') && !first.contains(',') {
        b'\t'
    } else {
        b','
    })
}

/// Reads a header row plus numeric records. Comma-delimited by default; a tab
/// separated header switches to tabs.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    read_table_requiring(path, None)
}

fn read_table_requiring(path: &Path, required: Option<&str>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let delimiter = sniff_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if let Some(name) = required {
        if !header.iter().any(|h| h == name) {
            return Err(Error::MissingColumn(name.to_string()));
        }
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .zip(&header)
            .map(|(cell, name)| {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: name.clone(),
                    value: cell.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Loads a delimited file, extracting `target` as the response column.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<Dataset> {
    let (header, rows) = read_table_requiring(path.as_ref(), Some(target))?;
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::MissingColumn(target.to_string()))?;
    let feature_names = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, h)| h.clone())
        .collect();
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for mut row in rows {
        y.push(row.remove(t));
        x.push(row);
    }
    Ok(Dataset {
        x,
        y,
        feature_names,
        target_name: target.to_string(),
    })
}

/// Writes features followed by the target column, comma-delimited.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header)?;
    for (row, y) in data.x.iter().zip(&data.y) {
        w.write_record(row.iter().chain(std::iter::once(y)).map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// What to do with inputs that fall outside the training box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodPolicy {
    /// Drop the row and count it.
    #[default]
    Discard,
    /// Project onto the unit box.
    Clamp,
    /// Evaluate the polynomial outside the box anyway, flagging the row.
    Evaluate,
}

impl FromStr for OodPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discard" => Ok(OodPolicy::Discard),
            "clamp" => Ok(OodPolicy::Clamp),
            "evaluate" => Ok(OodPolicy::Evaluate),
            other => Err(Error::InvalidArgument(format!("unknown out-of-domain policy {other:?}"))),
        }
    }
}

impl fmt::Display for OodPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodPolicy::Discard => "discard",
            OodPolicy::Clamp => "clamp",
            OodPolicy::Evaluate => "evaluate",
        })
    }
}

/// Affine map from a rectangular input box onto `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxScaler {
    pub bounds: Vec<(f64, f64)>,
}

/// Result of [`BoxScaler::apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledInputs {
    pub rows: Vec<Vec<f64>>,
    /// Index into the input of each returned row.
    pub kept: Vec<usize>,
    pub discarded: usize,
    /// Rows returned with at least one coordinate outside `[0, 1]` (evaluate policy).
    pub flagged: usize,
}

impl BoxScaler {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        for (dim, &(lower, upper)) in bounds.iter().enumerate() {
            if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                return Err(Error::InvalidDomain { dim, lower, upper });
            }
        }
        Ok(BoxScaler { bounds })
    }

    /// Fits the box to the training inputs, widened by `margin` times the range on each side.
    ///
    /// A constant column gets a unit-width box centred on its value.
    pub fn fit(rows: &[Vec<f64>], margin: f64) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyData)?;
        if !(margin >= 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be non-negative, got {margin}")));
        }
        let d = first.len();
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for row in rows {
            if row.len() != d {
                return Err(Error::SchemaMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            for (b, &v) in bounds.iter_mut().zip(row) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        for (dim, b) in bounds.iter_mut().enumerate() {
            if b.0 == b.1 {
                warn!("input dimension {dim} is constant ({}); using a unit-width box", b.0);
                *b = (b.0 - 0.5, b.0 + 0.5);
            } else if margin > 0.0 {
                let pad = margin * (b.1 - b.0);
                *b = (b.0 - pad, b.1 + pad);
            }
        }
        BoxScaler::new(bounds)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bounds)
            .map(|(&v, &(a, b))| (v - a) / (b - a))
            .collect()
    }

    pub fn apply(&self, rows: &[Vec<f64>], policy: OodPolicy) -> Result<ScaledInputs> {
        let mut out = ScaledInputs {
            rows: Vec::with_capacity(rows.len()),
            kept: Vec::with_capacity(rows.len()),
            discarded: 0,
            flagged: 0,
        };
        for (i, row) in rows.iter().enumerate() {
            if row.len() != self.dim() {
                return Err(Error::SchemaMismatch {
                    expected: self.dim(),
                    got: row.len(),
                });
            }
            let mut u = self.to_unit(row);
            let inside = u.iter().all(|v| (0.0..=1.0).contains(v));
            if !inside {
                match policy {
                    OodPolicy::Discard => {
                        out.discarded += 1;
                        continue;
                    }
                    OodPolicy::Clamp => u.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
                    OodPolicy::Evaluate => out.flagged += 1,
                }
            }
            out.rows.push(u);
            out.kept.push(i);
        }
        Ok(out)
    }
}

/// Shuffled split; the first `⌈ratio · n⌉` rows (capped at `n − 1`) go to training.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The epsilon absorbs products like 0.9 * 20 = 18.000000000000004.
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n_train);
    Ok((data.subset(train), data.subset(test)))
}

/// 20 inputs uniform on `[0, 0.33]` and 20 on `[0.66, 1]`, with `y = 3 sin(16 x)`.
pub fn gen_synthetic_1d(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..=0.33)).collect();
    x.extend((0..20).map(|_| rng.gen_range(0.66..=1.0)));
    Dataset {
        y: x.iter().map(|&v| 3.0 * (16.0 * v).sin()).collect(),
        x: x.into_iter().map(|v| vec![v]).collect(),
        feature_names: vec!["x".into()],
        target_name: "y".into(),
    }
}

/// Mean and standard deviation used to standardize targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    pub const IDENTITY: TargetStats = TargetStats { mean: 0.0, std: 1.0 };

    /// Population statistics; a zero spread falls back to unit scale.
    pub fn fit(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyData);
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(TargetStats { mean, std })
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mean_loglik: f64,
}

/// RMSE of the predictive means and mean Gaussian log density of the targets.
pub fn metrics(predictions: &[PredictiveDistribution], truths: &[f64]) -> Result<Metrics> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = truths.len() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let (sq, ll) = predictions
        .iter()
        .zip(truths)
        .fold((0.0, 0.0), |(sq, ll), (p, &y)| {
            let r2 = (y - p.mean).powi(2);
            (sq + r2, ll - 0.5 * (ln_2pi + p.y_var.ln() + r2 / p.y_var))
        });
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        mean_loglik: ll / n,
    })
}

/// Writes a `row,mean,f_var,y_var` table; `row` is the 0-based index of the input record.
pub fn write_predictions<W: Write>(out: W, rows: &[usize], predictions: &[PredictiveDistribution]) -> Result<()> {
    if rows.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: rows.len(),
            right: predictions.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "mean", "f_var", "y_var"])?;
    for (r, p) in rows.iter().zip(predictions) {
        w.write_record([r.to_string(), p.mean.to_string(), p.f_var.to_string(), p.y_var.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}
