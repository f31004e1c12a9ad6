use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{GradTarget, Mlp, OutputHead, Scratch};
use crate::subspace::SubspaceModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 32;

/// Factorized Gaussian over `R^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim("prior mean and std lengths differ"));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(
                "prior standard deviations must be finite and > 0",
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn isotropic(k: usize, std: f64) -> Result<Self> {
        Self::new(vec![0.0; k], vec![std; k])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| {
                let u = (z - m) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * u * u
            })
            .sum()
    }

    /// Adds `∇ log p(z)` into `grad`.
    pub fn add_score(&self, z: &[f64], grad: &mut [f64]) {
        for (((g, z), m), s) in grad.iter_mut().zip(z).zip(&self.mean).zip(&self.std) {
            *g -= (z - m) / (s * s);
        }
    }
}

/// Unnormalized log posterior `log p(D|z) + log p(z)` with its gradient.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    fn prior(&self) -> &DiagGaussian;

    /// `log p(D|z)` and its gradient.
    fn log_likelihood_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn log_likelihood(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood_grad(z)?.0)
    }

    fn log_density_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, mut g) = self.log_likelihood_grad(z)?;
        let prior = self.prior();
        prior.add_score(z, &mut g);
        let value = ll + prior.log_density(z);
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(z));
        }
        Ok((value, g))
    }

    fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density_grad(z)?.0)
    }
}

fn non_finite(z: &[f64]) -> Error {
    Error::NonFinite {
        message: "log posterior is not finite".into(),
        at: z.to_vec(),
    }
}

/// How the predictive variance of each observation is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseModel {
    /// From the network's variance output.
    Head,
    /// Shared `log σ` appended as the last coordinate, with a Gaussian prior.
    GlobalLogScale { prior_mean: f64, prior_std: f64 },
    /// Known variance.
    Fixed { variance: f64 },
}

impl NoiseModel {
    pub fn default_global() -> Self {
        NoiseModel::GlobalLogScale {
            prior_mean: 0.5f64.ln(),
            prior_std: 1.0,
        }
    }

    pub fn extra_dims(&self) -> usize {
        usize::from(matches!(self, NoiseModel::GlobalLogScale { .. }))
    }

    /// Observation variance for a draw, or `None` when the head supplies it.
    pub fn variance_for(&self, z: &[f64]) -> Option<f64> {
        match *self {
            NoiseModel::Head => None,
            NoiseModel::GlobalLogScale { .. } => Some((2.0 * z[z.len() - 1]).exp()),
            NoiseModel::Fixed { variance } => Some(variance),
        }
    }

    pub fn check_head(&self, head: OutputHead) -> Result<()> {
        match (self, head) {
            (NoiseModel::Head, OutputHead::MeanVariance) => Ok(()),
            (NoiseModel::Head, OutputHead::Scalar) => Err(Error::invalid(
                "the scalar head needs a global or fixed noise model",
            )),
            (NoiseModel::Fixed { variance }, OutputHead::Scalar) if !(*variance > 0.0) => {
                Err(Error::invalid("fixed noise variance must be > 0"))
            }
            (_, OutputHead::Scalar) => Ok(()),
            (_, OutputHead::MeanVariance) => Err(Error::invalid(
                "the mean-and-variance head supplies its own noise",
            )),
        }
    }
}

/// `p(z | D)` for the network restricted to an affine subspace.
#[derive(Debug)]
pub struct SubspacePosterior<'a> {
    mlp: &'a Mlp,
    model: &'a SubspaceModel,
    data: &'a Dataset,
    noise: NoiseModel,
    prior: DiagGaussian,
}

impl<'a> SubspacePosterior<'a> {
    pub fn new(
        mlp: &'a Mlp,
        model: &'a SubspaceModel,
        data: &'a Dataset,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.check_head(mlp.config().head)?;
        if model.anchor.len() != mlp.param_count() {
            return Err(Error::dim("subspace anchor does not match the network"));
        }
        if !data.is_empty() && data.input_dim() != mlp.input_dim() {
            return Err(Error::dim(
                "dataset features do not match the network input",
            ));
        }
        let mut std = model.prior_stds();
        let mut mean = vec![0.0; std.len()];
        if let NoiseModel::GlobalLogScale {
            prior_mean,
            prior_std,
        } = noise
        {
            mean.push(prior_mean);
            std.push(prior_std);
        }
        let prior = DiagGaussian::new(mean, std)?;
        Ok(Self {
            mlp,
            model,
            data,
            noise,
            prior,
        })
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn model(&self) -> &SubspaceModel {
        self.model
    }

    /// Log-likelihood over indices `range` plus the `θ`-gradient and, for a
    /// global noise scale, `Σ r²`.
    fn chunk_terms(
        &self,
        theta: &[f64],
        range: std::ops::Range<usize>,
        variance: Option<f64>,
    ) -> Result<(f64, Vec<f64>, f64)> {
        let mut grad = vec![0.0; theta.len()];
        let mut scratch = Scratch::default();
        let mut ll = 0.0;
        let mut sq = 0.0;
        for i in range {
            let (x, y) = (self.data.x(i), Some(self.data.y(i)));
            match variance {
                None => {
                    ll -= self.mlp.accumulate_target_grad(
                        theta,
                        x,
                        y,
                        GradTarget::GaussianNll,
                        -1.0,
                        &mut scratch,
                        &mut grad,
                    )?;
                }
                Some(v) => {
                    let r2 = self.mlp.accumulate_target_grad(
                        theta,
                        x,
                        y,
                        GradTarget::MseLoss,
                        -0.5 / v,
                        &mut scratch,
                        &mut grad,
                    )?;
                    sq += r2;
                    ll -= 0.5 * (2.0 * PI * v).ln() + r2 / (2.0 * v);
                }
            }
        }
        Ok((ll, grad, sq))
    }
}

impl TargetDensity for SubspacePosterior<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn prior(&self) -> &DiagGaussian {
        &self.prior
    }

    fn log_likelihood_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.dim() {
            return Err(Error::dim(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(z));
        }
        let k = self.model.dim();
        let theta = self.model.embed(&z[..k])?;
        let variance = self.noise.variance_for(z);
        let n = self.data.len();
        let parts: Vec<(f64, Vec<f64>, f64)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| self.chunk_terms(&theta, c * CHUNK..((c + 1) * CHUNK).min(n), variance))
            .collect::<Result<_>>()?;
        let mut ll = 0.0;
        let mut sq = 0.0;
        let mut g_theta = vec![0.0; theta.len()];
        for (l, g, s) in parts {
            ll += l;
            sq += s;
            g_theta.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let mut grad = self.model.pullback_gradient(&g_theta)?;
        if let NoiseModel::GlobalLogScale { .. } = self.noise {
            grad.push(-(n as f64) + sq / variance.expect("global scale has a variance"));
        }
        if !ll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(non_finite(z));
        }
        Ok((ll, grad))
    }
}

/// Independent Gaussian pseudo-observations `y_k ~ N(z_k, τ_k²)` under a
/// diagonal Gaussian prior; the posterior and evidence are closed form.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    prior: DiagGaussian,
    observations: Option<(Vec<f64>, Vec<f64>)>,
}

impl ConjugateGaussian {
    pub fn prior_only(prior: DiagGaussian) -> Self {
        Self {
            prior,
            observations: None,
        }
    }

    pub fn new(prior: DiagGaussian, values: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if values.len() != prior.dim() || variances.len() != prior.dim() {
            return Err(Error::dim("one observation per coordinate is required"));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("observation variances must be > 0"));
        }
        Ok(Self {
            prior,
            observations: Some((values, variances)),
        })
    }

    /// A target whose posterior is `N(mean, std²)` in one dimension, built
    /// from a standard normal prior and one observation.
    pub fn with_posterior_1d(mean: f64, std: f64) -> Result<Self> {
        let post_prec = 1.0 / (std * std);
        if !(post_prec > 1.0) {
            return Err(Error::invalid(
                "posterior must be narrower than the N(0, 1) prior",
            ));
        }
        let obs_var = 1.0 / (post_prec - 1.0);
        let obs = mean * post_prec * obs_var;
        Self::new(DiagGaussian::isotropic(1, 1.0)?, vec![obs], vec![obs_var])
    }

    /// Analytic posterior.
    pub fn posterior(&self) -> DiagGaussian {
        match &self.observations {
            None => self.prior.clone(),
            Some((y, tau2)) => {
                let (mean, std) = self
                    .prior
                    .mean
                    .iter()
                    .zip(&self.prior.std)
                    .zip(y.iter().zip(tau2))
                    .map(|((m, s), (y, t2))| {
                        let prec = 1.0 / (s * s) + 1.0 / t2;
                        ((m / (s * s) + y / t2) / prec, prec.recip().sqrt())
                    })
                    .unzip();
                DiagGaussian { mean, std }
            }
        }
    }

    /// `log ∫ p(y|z) p(z) dz`.
    pub fn log_evidence(&self) -> f64 {
        match &self.observations {
            None => 0.0,
            Some((y, tau2)) => y
                .iter()
                .zip(tau2)
                .zip(self.prior.mean.iter().zip(&self.prior.std))
                .map(|((y, t2), (m, s))| {
                    let v = t2 + s * s;
                    -0.5 * (LN_2PI + v.ln()) - (y - m).powi(2) / (2.0 * v)
                })
                .sum(),
        }
    }
}

impl TargetDensity for ConjugateGaussian {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn prior(&self) -> &DiagGaussian {
        &self.prior
    }

    fn log_likelihood_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.dim() {
            return Err(Error::dim("wrong dimension"));
        }
        match &self.observations {
            None => Ok((0.0, vec![0.0; z.len()])),
            Some((y, tau2)) => {
                let mut ll = 0.0;
                let grad = z
                    .iter()
                    .zip(y.iter().zip(tau2))
                    .map(|(z, (y, t2))| {
                        ll += -0.5 * (LN_2PI + t2.ln()) - (y - z).powi(2) / (2.0 * t2);
                        (y - z) / t2
                    })
                    .collect();
                Ok((ll, grad))
            }
        }
    }
}
