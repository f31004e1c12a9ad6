use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Files of one trial under `<out>/trial_NNN/`.
#[derive(Debug, Clone)]
pub struct TrialPaths {
    dir: PathBuf,
}

impl TrialPaths {
    pub fn new(out_dir: &Path, trial: usize) -> Self {
        Self {
            dir: out_dir.join(format!("trial_{trial:03}")),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// SWA mean `θ̂₀`.
    pub fn anchor(&self) -> PathBuf {
        self.dir.join("anchor.ckpt")
    }

    /// Last SGD iterate.
    pub fn final_params(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn deviations(&self) -> PathBuf {
        self.dir.join("deviations.bin")
    }

    pub fn projection(&self) -> PathBuf {
        self.dir.join("projection.bin")
    }

    pub fn posterior(&self) -> PathBuf {
        self.dir.join("posterior.csv")
    }

    pub fn inference_summary(&self) -> PathBuf {
        self.dir.join("inference.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.json")
    }
}

/// Wall-clock seconds per stage; zero for stages loaded from disk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub pretrain: f64,
    pub subspace: f64,
    pub inference: f64,
    pub eval: f64,
}

/// Sampler and optimizer diagnostics written by the inference stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "opt17",
        default
    )]
    pub acceptance_rate: Option<f64>,
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "opt17",
        default
    )]
    pub step_size: Option<f64>,
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "opt17",
        default
    )]
    pub final_elbo: Option<f64>,
}

fn opt17<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => crate::json::f64_17(x, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub rmse: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub avg_log_lik: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub coverage95: f64,
    pub times: StageTimes,
    #[serde(serialize_with = "opt17")]
    pub sigma0: Option<f64>,
    pub subspace_dim: usize,
    pub inference: InferenceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `[mean, sample std]` across trials.
    #[serde(serialize_with = "crate::json::pair_f64_17")]
    pub rmse: (f64, f64),
    #[serde(serialize_with = "crate::json::pair_f64_17")]
    pub avg_log_lik: (f64, f64),
    #[serde(serialize_with = "crate::json::pair_f64_17")]
    pub coverage95: (f64, f64),
}

/// Mean and sample standard deviation; the std of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Aggregate {
    pub fn from_trials(trials: &[TrialRecord]) -> Self {
        let col = |f: fn(&TrialRecord) -> f64| mean_std(&trials.iter().map(f).collect::<Vec<_>>());
        Self {
            rmse: col(|t| t.rmse),
            avg_log_lik: col(|t| t.avg_log_lik),
            coverage95: col(|t| t.coverage95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    /// Content hash of the config file and any data file.
    pub input_hash: String,
    pub method: String,
    pub dataset: String,
    pub trials: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ResultRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
