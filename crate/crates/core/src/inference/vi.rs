use serde::{Deserialize, Serialize};

use super::target::{DiagGaussian, TargetDensity};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Mean-field Gaussian `q(z) = Π N(μ_k, exp(2ρ_k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::dim("mean and log-std lengths differ"));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("variational parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|r| r.exp()).collect()
    }

    /// `μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(eps)
            .map(|((m, r), e)| m + r.exp() * e)
            .collect()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.standard_normal()).collect();
        self.reparameterize(&eps)
    }
}

/// `KL(q ‖ p)` for factorized Gaussians.
pub fn kl_diag_gaussians(q: &VariationalParams, prior: &DiagGaussian) -> Result<f64> {
    if q.dim() != prior.dim() {
        return Err(Error::dim("variational and prior dimensions differ"));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_std)
        .zip(prior.mean.iter().zip(&prior.std))
        .map(|((m, r), (m0, s0))| {
            let s2 = (2.0 * r).exp();
            s0.ln() - r + (s2 + (m - m0).powi(2)) / (2.0 * s0 * s0) - 0.5
        })
        .sum())
}

/// Monte Carlo estimate of `E_q[log p(D|z)] − KL(q ‖ p)`.
pub fn elbo_estimate(
    q: &VariationalParams,
    target: &dyn TargetDensity,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::invalid("need at least one Monte Carlo sample"));
    }
    let kl = kl_diag_gaussians(q, target.prior())?;
    let mut total = 0.0;
    for _ in 0..n_mc {
        let z = q.sample(rng);
        let ll = target.log_likelihood(&z)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite {
                message: "log-likelihood at a variational sample".into(),
                at: z,
            });
        }
        total += ll;
    }
    Ok(total / n_mc as f64 - kl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of the first; decay is geometric.
    pub final_lr_fraction: f64,
    /// Starting `log σ` for every coordinate.
    pub init_log_std: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1e-2,
            final_lr_fraction: 0.1,
            init_log_std: -3.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViFit {
    pub params: VariationalParams,
    /// Single-sample ELBO estimate at every step.
    pub elbo_trace: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    const EPS: f64 = 1e-8;

    fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
        }
    }

    /// Ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Maximizes the ELBO from `init_mean` with Adam, one reparameterized sample
/// per step and the KL term in closed form.
pub fn fit_vi(
    target: &dyn TargetDensity,
    init_mean: &[f64],
    cfg: &ViConfig,
    rng: &mut RngStream,
) -> Result<ViFit> {
    let k = target.dim();
    if init_mean.len() != k {
        return Err(Error::dim(format!(
            "initial mean has {} coordinates, target {k}",
            init_mean.len()
        )));
    }
    if cfg.steps == 0 || !(cfg.learning_rate > 0.0) || !(cfg.final_lr_fraction > 0.0) {
        return Err(Error::invalid(
            "VI needs steps >= 1 and positive learning rates",
        ));
    }
    let mut q = VariationalParams::new(init_mean.to_vec(), vec![cfg.init_log_std; k])?;
    let prior = target.prior().clone();
    let mut adam = Adam::new(2 * k, cfg.beta1, cfg.beta2);
    let mut flat = vec![0.0; 2 * k];
    let mut grad = vec![0.0; 2 * k];
    let decay = cfg
        .final_lr_fraction
        .powf(1.0 / (cfg.steps.max(2) - 1) as f64);
    let mut lr = cfg.learning_rate;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let eps: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
        let z = q.reparameterize(&eps);
        let (ll, g) = target
            .log_likelihood_grad(&z)
            .map_err(|_| Error::TrainingDiverged {
                step,
                last_finite: q.mean.clone(),
            })?;
        if !ll.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                step,
                last_finite: q.mean.clone(),
            });
        }
        trace.push(ll - kl_diag_gaussians(&q, &prior)?);
        for i in 0..k {
            let s = q.log_std[i].exp();
            let s0 = prior.std[i];
            grad[i] = g[i] - (q.mean[i] - prior.mean[i]) / (s0 * s0);
            grad[k + i] = g[i] * eps[i] * s + 1.0 - s * s / (s0 * s0);
        }
        flat[..k].copy_from_slice(&q.mean);
        flat[k..].copy_from_slice(&q.log_std);
        adam.step(&mut flat, &grad, lr);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                step,
                last_finite: q.mean.clone(),
            });
        }
        q.mean.copy_from_slice(&flat[..k]);
        q.log_std.copy_from_slice(&flat[k..]);
        lr *= decay;
    }
    Ok(ViFit {
        params: q,
        elbo_trace: trace,
    })
}
