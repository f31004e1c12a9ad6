//! Minibatch SGD with momentum, stochastic weight averaging, and the
//! iterate-deviation matrix used by the PCA baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{GradTarget, Mlp, MlpConfig, OutputHead, ParamVector, Scratch};
use crate::numerics::{DenseMatrix, RngStream};
use crate::subspace::{read_f64s, read_u32, read_u64, write_f64s};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of the total step budget after which snapshots are taken.
    pub swa_start: f64,
    /// Steps between snapshots; `None` means once per epoch.
    pub snapshot_interval: Option<usize>,
    /// L2 penalty coefficient added to the per-example mean loss.
    pub weight_decay: f64,
    /// Set per trial by the caller.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 10,
            learning_rate: 1e-2,
            momentum: 0.9,
            swa_start: 0.75,
            snapshot_interval: None,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.swa_start > 0.0 && self.swa_start < 1.0) {
            return Err(Error::invalid(format!(
                "swa start fraction must lie in (0, 1), got {}",
                self.swa_start
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "learning rate must be > 0 and momentum in [0, 1)",
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if self.snapshot_interval == Some(0) {
            return Err(Error::invalid("snapshot interval must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<ParamVector>,
    pub final_params: ParamVector,
    pub swa_mean: ParamVector,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Training objective for a head: squared error or Gaussian NLL.
pub fn training_target(head: OutputHead) -> GradTarget {
    match head {
        OutputHead::Scalar => GradTarget::MseLoss,
        OutputHead::MeanVariance => GradTarget::GaussianNll,
    }
}

/// Mean per-example training loss over the whole dataset.
pub fn dataset_loss(mlp: &Mlp, theta: &[f64], data: &Dataset) -> Result<f64> {
    let target = training_target(mlp.config().head);
    let mut total = 0.0;
    for i in 0..data.len() {
        total += mlp.scalar_target(theta, data.x(i), Some(data.y(i)), target)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains from a seeded initialization. Snapshots are aligned to the end of
/// training, so the final iterate is always the last snapshot.
pub fn train_map(config: &MlpConfig, data: &Dataset, hyper: &TrainHyper) -> Result<Trajectory> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mlp = Mlp::new(config.clone())?;
    let target = training_target(config.head);
    let n = mlp.param_count();
    let mut theta = mlp
        .init_params(&mut RngStream::new(hyper.seed, INIT_STREAM))
        .into_vec();
    let initial_loss = dataset_loss(&mlp, &theta, data)?;

    let batch = hyper.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = hyper.epochs * steps_per_epoch;
    let interval = hyper.snapshot_interval.unwrap_or(steps_per_epoch);
    let start_step = ((hyper.swa_start * total_steps as f64).floor() as usize).min(total_steps - 1);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = RngStream::new(hyper.seed, SHUFFLE_STREAM);
    let mut velocity = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut scratch = Scratch::default();
    let mut snapshots = Vec::new();
    let mut last_finite = theta.clone();
    let mut step = 0usize;

    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += w * mlp.accumulate_target_grad(
                    &theta,
                    data.x(i),
                    Some(data.y(i)),
                    target,
                    w,
                    &mut scratch,
                    &mut grad,
                )?;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { step, last_finite });
            }
            for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = hyper.momentum * *v + g + hyper.weight_decay * *t;
                *t -= hyper.learning_rate * *v;
            }
            step += 1;
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::TrainingDiverged { step, last_finite });
            }
            last_finite.copy_from_slice(&theta);
            if step > start_step && (total_steps - step).is_multiple_of(interval) {
                snapshots.push(ParamVector::new(theta.clone()));
            }
        }
    }

    let final_loss = dataset_loss(&mlp, &theta, data)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { step, last_finite });
    }
    let swa_mean = mean_of(&snapshots, n);
    Ok(Trajectory {
        snapshots,
        final_params: ParamVector::new(theta),
        swa_mean,
        initial_loss,
        final_loss,
    })
}

fn mean_of(snapshots: &[ParamVector], n: usize) -> ParamVector {
    let mut mean = vec![0.0; n];
    for s in snapshots {
        mean.iter_mut().zip(s.iter()).for_each(|(m, v)| *m += v);
    }
    let c = snapshots.len() as f64;
    mean.iter_mut().for_each(|m| *m /= c);
    ParamVector::new(mean)
}

/// Rows `θ_t − θ_SWA` for the last `m` snapshots.
pub fn iterate_deviations(traj: &Trajectory, m: usize) -> Result<DenseMatrix> {
    let available = traj.snapshots.len();
    if m == 0 || m > available {
        return Err(Error::invalid(format!(
            "requested {m} deviations but {available} snapshots are available"
        )));
    }
    let rows: Vec<Vec<f64>> = traj.snapshots[available - m..]
        .iter()
        .map(|s| {
            s.iter()
                .zip(traj.swa_mean.iter())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    DenseMatrix::from_rows(&rows)
}

/// First eight bytes of the SHA-256 of the config's JSON form.
pub fn mlp_config_hash(config: &MlpConfig) -> u64 {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASBNCKPT";
const MATRIX_MAGIC: &[u8; 8] = b"ASBNMTRX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub theta: ParamVector,
}

pub fn save_checkpoint(path: &Path, config_hash: u64, theta: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(theta.len() as u64).to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    write_f64s(&mut w, theta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    expect_header(&mut r, path, CHECKPOINT_MAGIC)?;
    let n = read_u64(&mut r)? as usize;
    let config_hash = read_u64(&mut r)?;
    let theta = read_f64s(&mut r, n)?;
    expect_eof(&mut r, path)?;
    Ok(Checkpoint {
        config_hash,
        theta: ParamVector::new(theta),
    })
}

/// Loads a checkpoint and checks it was written for `config`.
pub fn load_checkpoint_for(path: &Path, config: &MlpConfig) -> Result<ParamVector> {
    let ck = load_checkpoint(path)?;
    if ck.config_hash != mlp_config_hash(config) || ck.theta.len() != config.param_count() {
        return Err(Error::format(
            path,
            "checkpoint was written for a different network",
        ));
    }
    Ok(ck.theta)
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    write_f64s(&mut w, m.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    expect_header(&mut r, path, MATRIX_MAGIC)?;
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    let data = read_f64s(&mut r, rows * cols)?;
    expect_eof(&mut r, path)?;
    DenseMatrix::from_vec(rows, cols, data)
}

fn expect_header(r: &mut impl Read, path: &Path, magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::format(path, "unexpected file magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(())
}
