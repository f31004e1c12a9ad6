//! Synthetic benchmark generation, CSV ingestion, splitting and standardization.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

/// Affine per-column transform fit on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Scaler {
    pub fn identity(p: usize) -> Self {
        Self {
            feature_mean: vec![0.0; p],
            feature_std: vec![1.0; p],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn transform_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    /// Maps a variance in standardized target units back to original units.
    pub fn inverse_variance(&self, v: f64) -> f64 {
        v * self.target_std * self.target_std
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    /// `N × p`.
    pub features: DenseMatrix,
    pub targets: Vec<f64>,
    /// Transform that produced the current values from the raw data
    /// (identity for unstandardized data).
    pub scaler: Scaler,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        features: DenseMatrix,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::dim(format!(
                "{} feature rows vs {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::dim("feature names do not match feature columns"));
        }
        if !features.is_finite() || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        let p = features.cols();
        Ok(Self {
            name: name.into(),
            feature_names,
            features,
            targets,
            scaler: Scaler::identity(p),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let p = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        Dataset {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features: DenseMatrix::from_vec(indices.len(), p, data).expect("subset shape"),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            scaler: self.scaler.clone(),
        }
    }

    fn apply(&self, scaler: &Scaler) -> Dataset {
        let p = self.input_dim();
        let mut features = DenseMatrix::zeros(self.len(), p);
        for i in 0..self.len() {
            features
                .row_mut(i)
                .copy_from_slice(&scaler.transform_features(self.x(i)));
        }
        Dataset {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features,
            targets: self
                .targets
                .iter()
                .map(|&y| scaler.transform_target(y))
                .collect(),
            scaler: scaler.clone(),
        }
    }
}

/// The noiseless regression curve of the synthetic benchmark.
pub fn sine_curve(x: f64) -> f64 {
    (4.0 * PI * x).sin() + (7.0 * PI * x).sin()
}

/// `x ~ U[0, 1]`, `y = sin(4πx) + sin(7πx) + ε`, `ε ~ N(0, noise_std²)`.
pub fn gen_sine(n: usize, noise_std: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid(format!(
            "noise std must be >= 0, got {noise_std}"
        )));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform();
        let eps = if noise_std > 0.0 {
            noise_std * rng.standard_normal()
        } else {
            0.0
        };
        xs.push(x);
        ys.push(sine_curve(x) + eps);
    }
    Dataset::new(
        "sine",
        vec!["x".into()],
        DenseMatrix::from_vec(n, 1, xs)?,
        ys,
    )
}

/// Reads a headered, comma-separated file of decimal numbers. Every column
/// other than `target` becomes a feature, in header order.
pub fn load_csv(path: &Path, target: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::invalid(format!("target column `{target}` not in header")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_col)
        .map(|(_, h)| h.clone())
        .collect();

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        // Row numbers are 1-based and count the header line.
        let row = row_idx + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[col].clone(),
                message: format!("`{cell}` is not a decimal number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[col].clone(),
                    message: "non-finite value".into(),
                });
            }
            if col == target_col {
                targets.push(value);
            } else {
                features.push(value);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = targets.len();
    let p = feature_names.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let ds = Dataset::new(
        name,
        feature_names,
        DenseMatrix::from_vec(n, p, features)?,
        targets,
    )?;
    if n > 1 {
        for (j, name) in ds.feature_names.iter().enumerate() {
            if column_std(&ds.features.col(j)) == 0.0 {
                return Err(Error::ConstantColumn(name.clone()));
            }
        }
    }
    Ok(ds)
}

/// Random disjoint split; the test part has `round(N · fraction)` rows, at least one.
pub fn split(
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} rows")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let (train_idx, test_idx) = split_indices(n, test_fraction, rng);
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

pub(crate) fn split_indices(
    n: usize,
    test_fraction: f64,
    rng: &mut RngStream,
) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        perm.swap(i, j);
    }
    let test = perm[..n_test].to_vec();
    let train = perm[n_test..].to_vec();
    (train, test)
}

fn column_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population (ddof = 0) standard deviation.
fn column_std(v: &[f64]) -> f64 {
    let m = column_mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Fits a scaler on `train` and applies it to both splits.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Scaler)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.input_dim() != test.input_dim() {
        return Err(Error::dim("train and test have different feature counts"));
    }
    let p = train.input_dim();
    let mut feature_mean = Vec::with_capacity(p);
    let mut feature_std = Vec::with_capacity(p);
    for j in 0..p {
        let col = train.features.col(j);
        let s = column_std(&col);
        if !(s > 0.0) {
            return Err(Error::ConstantColumn(train.feature_names[j].clone()));
        }
        feature_mean.push(column_mean(&col));
        feature_std.push(s);
    }
    let target_std = column_std(&train.targets);
    if !(target_std > 0.0) {
        return Err(Error::ConstantColumn("<target>".into()));
    }
    let scaler = Scaler {
        feature_mean,
        feature_std,
        target_mean: column_mean(&train.targets),
        target_std,
    };
    Ok((train.apply(&scaler), test.apply(&scaler), scaler))
}
