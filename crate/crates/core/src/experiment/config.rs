use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{HmcConfig, NoiseModel, ViConfig};
use crate::network::{Activation, MlpConfig, OutputHead};
use crate::pretrain::TrainHyper;
use crate::subspace::LisObjective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    As,
    Lis,
    Pca,
    Full,
    /// Deterministic network at the final SGD iterate.
    Sgd,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::As => "AS",
            Method::Lis => "LIS",
            Method::Pca => "SGD-PCA",
            Method::Full => "FULL",
            Method::Sgd => "SGD",
        }
    }

    /// Column order for comparison tables.
    pub fn rank(label: &str) -> usize {
        ["SGD", "FULL", "SGD-PCA", "AS", "LIS"]
            .iter()
            .position(|l| *l == label)
            .unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Subspace,
    Inference,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Subspace => "subspace",
            Stage::Inference => "inference",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "subspace" => Ok(Stage::Subspace),
            "inference" => Ok(Stage::Inference),
            "eval" => Ok(Stage::Eval),
            other => Err(Error::Config(format!(
                "unknown stage `{other}` (expected pretrain, subspace, inference or eval)"
            ))),
        }
    }
}

fn default_trials() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub method: Method,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
}

fn default_n_test() -> usize {
    500
}

fn yes() -> bool {
    true
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    /// Noisy samples of the two-frequency sine curve on `[0, 1]`; the test
    /// set is an independent draw.
    Synthetic {
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        noise_std: f64,
        #[serde(default = "yes")]
        standardize: bool,
    },
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        target: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

impl DataSection {
    pub fn name(&self) -> String {
        match self {
            DataSection::Synthetic {
                n_train, noise_std, ..
            } => {
                format!("sine(n={n_train},noise={noise_std})")
            }
            DataSection::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    /// `K`.
    pub dim: usize,
    /// `M`.
    pub gradient_samples: usize,
    /// Perturbation std; `0.1 · RMS(θ̂₀)` when absent.
    pub sigma0: Option<f64>,
    /// `σ̃`.
    pub prior_std: f64,
    pub lis_objective: LisObjective,
    /// Iterate deviations for the PCA baseline; defaults to `gradient_samples`.
    pub deviations: Option<usize>,
    pub pca_prior: PcaPrior,
}

/// Prior on the coordinates of the PCA baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaPrior {
    /// `σ̃ · √λ_k`: equivalent to a basis scaled by the deviation singular values.
    #[default]
    Scaled,
    /// `σ̃` on every coordinate.
    Isotropic,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        Self {
            dim: 20,
            gradient_samples: 100,
            sigma0: None,
            prior_std: 1.0,
            lis_objective: LisObjective::default(),
            deviations: None,
            pca_prior: PcaPrior::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hmc,
    Vi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub algorithm: Algorithm,
    /// `J`.
    pub draws: usize,
    /// Prior on the shared log noise scale (scalar head only).
    pub noise_prior_mean: f64,
    pub noise_prior_std: f64,
    pub hmc: HmcConfig,
    pub vi: ViConfig,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vi,
            draws: 30,
            noise_prior_mean: 0.5f64.ln(),
            noise_prior_std: 1.0,
            hmc: HmcConfig::default(),
            vi: ViConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub network: NetworkSection,
    #[serde(default)]
    pub pretrain: TrainHyper,
    #[serde(default)]
    pub subspace: SubspaceSection,
    #[serde(default)]
    pub inference: InferenceSection,
    /// Directory of the config file, used to resolve relative data paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without checking referenced files.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mlp_config(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden: self.network.hidden.clone(),
            head: self.network.head,
            activation: self.network.activation,
        }
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        match &self.data {
            DataSection::Csv { path, .. } => Some(self.base_dir.join(path)),
            DataSection::Synthetic { .. } => None,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        match self.network.head {
            OutputHead::MeanVariance => NoiseModel::Head,
            OutputHead::Scalar => NoiseModel::GlobalLogScale {
                prior_mean: self.inference.noise_prior_mean,
                prior_std: self.inference.noise_prior_std,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment.trials == 0 {
            return bad("experiment.trials must be >= 1".into());
        }
        let method = self.experiment.method;
        if matches!(method, Method::As | Method::Lis | Method::Pca) {
            if self.subspace.dim == 0 {
                return bad("subspace.dim must be >= 1".into());
            }
            let m = match method {
                Method::Pca => self
                    .subspace
                    .deviations
                    .unwrap_or(self.subspace.gradient_samples),
                _ => self.subspace.gradient_samples,
            };
            if self.subspace.dim > m {
                return bad(format!(
                    "subspace.dim = {} exceeds the {m} available rows",
                    self.subspace.dim
                ));
            }
        }
        if matches!(self.subspace.sigma0, Some(s) if !(s >= 0.0)) {
            return bad("subspace.sigma0 must be >= 0".into());
        }
        if !(self.subspace.prior_std > 0.0) || !(self.inference.noise_prior_std > 0.0) {
            return bad("prior standard deviations must be > 0".into());
        }
        if self.inference.draws == 0 {
            return bad("inference.draws must be >= 1".into());
        }
        if self.inference.algorithm == Algorithm::Hmc
            && self.inference.hmc.samples < self.inference.draws
        {
            return bad("inference.hmc.samples must be >= inference.draws".into());
        }
        self.pretrain
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match &self.data {
            DataSection::Synthetic {
                n_train,
                n_test,
                noise_std,
                ..
            } => {
                if *n_train < 2 || *n_test == 0 || !(*noise_std >= 0.0) {
                    return bad(
                        "synthetic data needs n_train >= 2, n_test >= 1 and noise_std >= 0".into(),
                    );
                }
            }
            DataSection::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return bad("data.test_fraction must lie in (0, 1)".into());
                }
                let path = self.data_path().expect("csv data has a path");
                if !path.is_file() {
                    return bad(format!("data file {} does not exist", path.display()));
                }
            }
        }
        self.mlp_config(1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form (output location excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
