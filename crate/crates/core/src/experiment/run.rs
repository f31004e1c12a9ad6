use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::artifacts::{
    Aggregate, InferenceSummary, ResultRecord, StageTimes, TrialPaths, TrialRecord,
};
use super::config::{blob_hash, Algorithm, DataSection, ExperimentConfig, Method, PcaPrior, Stage};
use crate::data::{gen_sine, load_csv, split, standardize, Dataset, Scaler};
use crate::error::{Error, Result};
use crate::inference::{
    bma_predictive, draw_posterior, fit_vi, hmc_run, NoiseModel, PosteriorSamples, PosteriorSource,
    PredictiveMixture, SampleSource, SubspacePosterior,
};
use crate::metrics::{to_original_units, EvalReport};
use crate::network::{Mlp, MlpConfig, ParamVector};
use crate::numerics::{DenseMatrix, RngStream};
use crate::pretrain::{
    iterate_deviations, load_checkpoint_for, load_matrix, mlp_config_hash, save_checkpoint,
    save_matrix, train_map,
};
use crate::subspace::{
    default_sigma0, load_projection, pca_projection_from_deviations, projection_from_gradients,
    sample_gradient_matrix, save_projection, Projection, SubspaceMethod, SubspaceModel,
};

/// Purposes that get their own derived seed within a trial.
#[derive(Debug, Clone, Copy)]
enum Purpose {
    Data = 1,
    Split = 2,
    Pretrain = 3,
    Subspace = 4,
    Inference = 5,
}

/// Independent seed per (trial seed, purpose) via a splitmix64 step.
fn derived_seed(trial_seed: u64, purpose: Purpose) -> u64 {
    let mut z = trial_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((purpose as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    cfg.experiment.seed.wrapping_add(trial as u64)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub from: Stage,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            from: Stage::Pretrain,
        }
    }
}

/// Standardized train/test split of one trial.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub train: Dataset,
    pub test: Dataset,
    pub scaler: Scaler,
}

pub fn trial_data(cfg: &ExperimentConfig, seed: u64) -> Result<TrialData> {
    let data_seed = derived_seed(seed, Purpose::Data);
    let (train, test, standardize_it) = match &cfg.data {
        DataSection::Synthetic {
            n_train,
            n_test,
            noise_std,
            standardize,
        } => (
            gen_sine(*n_train, *noise_std, &mut RngStream::new(data_seed, 0))?,
            gen_sine(*n_test, *noise_std, &mut RngStream::new(data_seed, 1))?,
            *standardize,
        ),
        DataSection::Csv {
            target,
            test_fraction,
            ..
        } => {
            let path = cfg.data_path().expect("csv data has a path");
            let all = load_csv(&path, target)?;
            let (train, test) = split(
                &all,
                *test_fraction,
                &mut RngStream::new(derived_seed(seed, Purpose::Split), 0),
            )?;
            (train, test, true)
        }
    };
    if standardize_it {
        let (train, test, scaler) = standardize(&train, &test)?;
        Ok(TrialData {
            train,
            test,
            scaler,
        })
    } else {
        let scaler = Scaler::identity(train.input_dim());
        Ok(TrialData {
            train,
            test,
            scaler,
        })
    }
}

struct Trial<'a> {
    cfg: &'a ExperimentConfig,
    index: usize,
    seed: u64,
    paths: TrialPaths,
    data: TrialData,
    mlp_cfg: MlpConfig,
    mlp: Mlp,
}

impl<'a> Trial<'a> {
    fn new(cfg: &'a ExperimentConfig, index: usize, out_dir: &Path) -> Result<Self> {
        let seed = trial_seed(cfg, index);
        let data = trial_data(cfg, seed)?;
        let mlp_cfg = cfg.mlp_config(data.train.input_dim());
        let mlp = Mlp::new(mlp_cfg.clone())?;
        Ok(Self {
            cfg,
            index,
            seed,
            paths: TrialPaths::new(out_dir, index),
            data,
            mlp_cfg,
            mlp,
        })
    }

    fn wrap<T>(&self, stage: Stage, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Stage {
            stage: stage.name(),
            trial: self.index,
            source: Box::new(e),
        })
    }

    fn pretrain(&self) -> Result<()> {
        let mut hyper = self.cfg.pretrain.clone();
        hyper.seed = derived_seed(self.seed, Purpose::Pretrain);
        let traj = train_map(&self.mlp_cfg, &self.data.train, &hyper)?;
        let hash = mlp_config_hash(&self.mlp_cfg);
        save_checkpoint(&self.paths.anchor(), hash, &traj.swa_mean)?;
        save_checkpoint(&self.paths.final_params(), hash, &traj.final_params)?;
        let wanted = self
            .cfg
            .subspace
            .deviations
            .unwrap_or(self.cfg.subspace.gradient_samples);
        let count = match self.cfg.experiment.method {
            Method::Pca => wanted,
            _ => wanted.min(traj.snapshots.len()),
        };
        save_matrix(&self.paths.deviations(), &iterate_deviations(&traj, count)?)
    }

    fn anchor(&self) -> Result<ParamVector> {
        load_checkpoint_for(&self.paths.anchor(), &self.mlp_cfg)
    }

    fn subspace(&self) -> Result<()> {
        let sub = &self.cfg.subspace;
        let n = self.mlp.param_count();
        let proj = match self.cfg.experiment.method {
            m @ (Method::As | Method::Lis) => {
                let anchor = self.anchor()?;
                let kind = if m == Method::As {
                    SubspaceMethod::As
                } else {
                    SubspaceMethod::Lis
                };
                let sigma0 = sub.sigma0.unwrap_or_else(|| default_sigma0(&anchor));
                let g = sample_gradient_matrix(
                    kind,
                    sub.lis_objective,
                    &self.mlp,
                    &anchor,
                    sigma0,
                    sub.gradient_samples,
                    &self.data.train,
                    derived_seed(self.seed, Purpose::Subspace),
                )?;
                projection_from_gradients(&g, sub.dim)?
            }
            Method::Pca => {
                let d = load_matrix(&self.paths.deviations())?;
                if d.cols() != n {
                    return Err(Error::dim("stored deviations do not match the network"));
                }
                pca_projection_from_deviations(&d, sub.dim)?
            }
            Method::Full | Method::Sgd => Projection::identity(n),
        };
        save_projection(&self.paths.projection(), &proj)
    }

    /// Subspace model implied by the method and the stored artifacts.
    fn model(&self) -> Result<SubspaceModel> {
        let n = self.mlp.param_count();
        let prior = self.cfg.subspace.prior_std;
        match self.cfg.experiment.method {
            Method::Full => SubspaceModel::identity(n, prior),
            Method::Sgd => SubspaceModel::new(
                load_checkpoint_for(&self.paths.final_params(), &self.mlp_cfg)?,
                Projection::identity(n),
                prior,
            ),
            _ => {
                let proj = load_projection(&self.paths.projection())?;
                if proj.ambient_dim() != n {
                    return Err(Error::dim("stored projection does not match the network"));
                }
                let scales = (self.cfg.experiment.method == Method::Pca
                    && self.cfg.subspace.pca_prior == PcaPrior::Scaled)
                    .then(|| {
                        proj.spectrum
                            .iter()
                            .map(|l| l.max(f64::MIN_POSITIVE).sqrt())
                            .collect::<Vec<_>>()
                    });
                let model = SubspaceModel::new(self.anchor()?, proj, prior)?;
                match scales {
                    Some(s) => model.with_coordinate_scales(s),
                    None => Ok(model),
                }
            }
        }
    }

    /// Log of the training RMSE at the point estimate, in standardized units.
    fn log_train_rmse(&self, theta: &[f64]) -> Result<f64> {
        let d = &self.data.train;
        let mut sse = 0.0;
        for i in 0..d.len() {
            sse += (self.mlp.forward(theta, d.x(i))?.mean - d.y(i)).powi(2);
        }
        Ok((sse / d.len() as f64).sqrt().max(1e-3).ln())
    }

    fn inference(&self) -> Result<()> {
        let cfg = self.cfg;
        let model = self.model()?;
        let noise = cfg.noise_model();
        let point = match cfg.experiment.method {
            Method::Full => Some(self.anchor()?),
            Method::Sgd => Some(model.anchor.clone()),
            _ => None,
        };
        let mut init = match (cfg.experiment.method, &point) {
            (Method::Full, Some(theta)) => theta.to_vec(),
            _ => vec![0.0; model.dim()],
        };
        if let NoiseModel::GlobalLogScale { .. } = noise {
            let at = match &point {
                Some(theta) => theta.clone(),
                None => model.embed(&init)?,
            };
            init.push(self.log_train_rmse(&at)?);
        }

        let mut rng = RngStream::new(derived_seed(self.seed, Purpose::Inference), 0);
        let j = cfg.inference.draws;
        let mut summary = InferenceSummary::default();
        let draws = if cfg.experiment.method == Method::Sgd {
            PosteriorSamples::new(DenseMatrix::from_rows(&[init])?, SampleSource::Point)?
        } else {
            let target = SubspacePosterior::new(&self.mlp, &model, &self.data.train, noise)?;
            match cfg.inference.algorithm {
                Algorithm::Hmc => {
                    let chain = hmc_run(&target, &init, &cfg.inference.hmc, &mut rng)?;
                    summary.acceptance_rate = chain.acceptance_rate;
                    summary.step_size = chain.step_size;
                    draw_posterior(PosteriorSource::Hmc(&chain), j, &mut rng)?
                }
                Algorithm::Vi => {
                    let fit = fit_vi(&target, &init, &cfg.inference.vi, &mut rng)?;
                    let tail = (fit.elbo_trace.len() / 10).max(1);
                    let last = &fit.elbo_trace[fit.elbo_trace.len() - tail..];
                    summary.final_elbo = Some(last.iter().sum::<f64>() / last.len() as f64);
                    draw_posterior(PosteriorSource::Vi(&fit.params), j, &mut rng)?
                }
            }
        };
        draws.write_csv(
            File::create(self.paths.posterior())?,
            noise.extra_dims() == 1,
        )?;
        fs::write(
            self.paths.inference_summary(),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(())
    }

    fn load_draws(&self) -> Result<PosteriorSamples> {
        let source = match (self.cfg.experiment.method, self.cfg.inference.algorithm) {
            (Method::Sgd, _) => SampleSource::Point,
            (_, Algorithm::Hmc) => SampleSource::Hmc,
            (_, Algorithm::Vi) => SampleSource::Vi,
        };
        PosteriorSamples::read_csv(BufReader::new(File::open(self.paths.posterior())?), source)
    }

    /// Predictive mixtures in original target units at standardized inputs `xs`.
    pub(crate) fn predict(&self, xs: &DenseMatrix) -> Result<Vec<PredictiveMixture>> {
        let model = self.model()?;
        let draws = self.load_draws()?;
        let mixtures = bma_predictive(&self.mlp, &model, &draws, xs, self.cfg.noise_model())?;
        to_original_units(&mixtures, &self.data.scaler)
    }

    fn eval(&self) -> Result<EvalReport> {
        let mixtures = self.predict(&self.data.test.features)?;
        let targets: Vec<f64> = self
            .data
            .test
            .targets
            .iter()
            .map(|&y| self.data.scaler.inverse_target(y))
            .collect();
        let report = EvalReport::evaluate(&mixtures, &targets, self.seed)?;
        fs::write(self.paths.eval(), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    fn run(&self, from: Stage) -> Result<TrialRecord> {
        fs::create_dir_all(self.paths.dir())?;
        let mut times = StageTimes::default();
        let timed = |stage: Stage, slot: &mut f64, f: &dyn Fn() -> Result<()>| -> Result<()> {
            if stage < from {
                return Ok(());
            }
            let t0 = Instant::now();
            self.wrap(stage, f())?;
            *slot = t0.elapsed().as_secs_f64();
            Ok(())
        };
        timed(Stage::Pretrain, &mut times.pretrain, &|| self.pretrain())?;
        timed(Stage::Subspace, &mut times.subspace, &|| self.subspace())?;
        timed(Stage::Inference, &mut times.inference, &|| self.inference())?;
        let t0 = Instant::now();
        let report = self.wrap(Stage::Eval, self.eval())?;
        times.eval = t0.elapsed().as_secs_f64();

        let (sigma0, subspace_dim) = self.wrap(Stage::Eval, self.projection_facts())?;
        let inference = self.wrap(
            Stage::Eval,
            fs::read_to_string(self.paths.inference_summary())
                .map_err(Error::from)
                .and_then(|t| serde_json::from_str(&t).map_err(Error::from)),
        )?;
        Ok(TrialRecord {
            seed: self.seed,
            rmse: report.rmse,
            avg_log_lik: report.avg_log_lik,
            coverage95: report.coverage95,
            times,
            sigma0,
            subspace_dim,
            inference,
        })
    }

    fn projection_facts(&self) -> Result<(Option<f64>, usize)> {
        let proj = load_projection(&self.paths.projection())?;
        let sigma0 =
            matches!(proj.method, SubspaceMethod::As | SubspaceMethod::Lis).then_some(proj.sigma0);
        Ok((sigma0, proj.dim()))
    }
}

/// Reconstructs a finished trial for prediction on new inputs.
pub struct TrialPredictor<'a> {
    trial: Trial<'a>,
}

impl<'a> TrialPredictor<'a> {
    pub fn open(cfg: &'a ExperimentConfig, out_dir: &Path, trial: usize) -> Result<Self> {
        let t = Trial::new(cfg, trial, out_dir)?;
        for p in [t.paths.posterior(), t.paths.projection()] {
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing run artifact {}", p.display()),
                )));
            }
        }
        Ok(Self { trial: t })
    }

    pub fn scaler(&self) -> &Scaler {
        &self.trial.data.scaler
    }

    pub fn train(&self) -> &Dataset {
        &self.trial.data.train
    }

    /// Mixtures in original units at inputs given in original units.
    pub fn predict_raw(&self, xs: &DenseMatrix) -> Result<Vec<PredictiveMixture>> {
        let scaled: Vec<Vec<f64>> = (0..xs.rows())
            .map(|i| self.scaler().transform_features(xs.row(i)))
            .collect();
        self.trial.predict(&DenseMatrix::from_rows(&scaled)?)
    }
}

fn input_hash(cfg: &ExperimentConfig, config_bytes: Option<&[u8]>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut lines = String::new();
    if let Some(b) = config_bytes {
        lines.push_str(&format!("config {}\n", blob_hash(b)));
    }
    if let Some(p) = cfg.data_path() {
        lines.push_str(&format!("data {}\n", blob_hash(&fs::read(p)?)));
    }
    Ok(hex::encode(Sha256::digest(lines.as_bytes())))
}

/// Runs every trial and writes `results.json` into the output directory.
/// `config_bytes` is the raw config file, hashed into the input hash.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    config_bytes: Option<&[u8]>,
) -> Result<ResultRecord> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let trials: Vec<TrialRecord> = (0..cfg.experiment.trials)
        .into_par_iter()
        .map(|i| {
            let t = Trial::new(cfg, i, &opts.out_dir).map_err(|e| Error::Stage {
                stage: "data",
                trial: i,
                source: Box::new(e),
            })?;
            t.run(opts.from)
        })
        .collect::<Result<_>>()?;

    let mut metadata = BTreeMap::new();
    metadata.insert("config".to_string(), serde_json::to_value(cfg)?);
    metadata.insert("label".to_string(), cfg.experiment.name.clone().into());
    metadata.insert(
        "log_likelihood".to_string(),
        "mean log predictive density of de-standardized test targets".into(),
    );
    metadata.insert("version".to_string(), env!("CARGO_PKG_VERSION").into());

    let record = ResultRecord {
        config_hash: cfg.hash(),
        input_hash: input_hash(cfg, config_bytes)?,
        method: cfg.experiment.method.label().to_string(),
        dataset: cfg.data.name(),
        aggregate: Aggregate::from_trials(&trials),
        trials,
        metadata,
    };
    record.save(&opts.out_dir.join("results.json"))?;
    Ok(record)
}
