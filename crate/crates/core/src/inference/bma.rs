use rayon::prelude::*;

use super::target::NoiseModel;
use super::PosteriorSamples;
use crate::error::{Error, Result};
use crate::network::{Mlp, ParamVector, Scratch};
use crate::numerics::DenseMatrix;
use crate::subspace::SubspaceModel;

/// Equal-weight Gaussian mixture at one test input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    /// `(μ_j, v_j)` per posterior draw.
    pub components: Vec<(f64, f64)>,
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveMixture {
    pub fn from_components(components: Vec<(f64, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        if components
            .iter()
            .any(|&(m, v)| !m.is_finite() || !(v >= 0.0))
        {
            return Err(Error::NumericDomain(
                "mixture components need finite means and v >= 0".into(),
            ));
        }
        let j = components.len() as f64;
        let mean = components.iter().map(|c| c.0).sum::<f64>() / j;
        let variance = components
            .iter()
            .map(|&(m, v)| v + (m - mean).powi(2))
            .sum::<f64>()
            / j;
        Ok(Self {
            components,
            mean,
            variance,
        })
    }

    /// Spread of the component means.
    pub fn epistemic_variance(&self) -> f64 {
        let j = self.components.len() as f64;
        self.components
            .iter()
            .map(|c| (c.0 - self.mean).powi(2))
            .sum::<f64>()
            / j
    }

    /// Maps standardized moments back to original units.
    pub fn rescaled(&self, shift: f64, scale: f64) -> Result<Self> {
        Self::from_components(
            self.components
                .iter()
                .map(|&(m, v)| (shift + scale * m, v * scale * scale))
                .collect(),
        )
    }
}

/// BMA predictive at each row of `xs`.
pub fn bma_predictive(
    mlp: &Mlp,
    model: &SubspaceModel,
    samples: &PosteriorSamples,
    xs: &DenseMatrix,
    noise: NoiseModel,
) -> Result<Vec<PredictiveMixture>> {
    noise.check_head(mlp.config().head)?;
    let k = model.dim();
    if samples.dim() != k + noise.extra_dims() {
        return Err(Error::dim(format!(
            "draws have {} columns, expected {}",
            samples.dim(),
            k + noise.extra_dims()
        )));
    }
    if xs.cols() != mlp.input_dim() {
        return Err(Error::dim("test inputs do not match the network"));
    }
    let thetas: Vec<(ParamVector, Option<f64>)> = (0..samples.len())
        .map(|j| {
            let z = samples.draws.row(j);
            Ok((model.embed(&z[..k])?, noise.variance_for(z)))
        })
        .collect::<Result<_>>()?;
    (0..xs.rows())
        .into_par_iter()
        .map(|i| {
            let mut scratch = Scratch::default();
            let comps = thetas
                .iter()
                .map(|(theta, var)| {
                    let out = mlp.forward_with(theta, xs.row(i), &mut scratch)?;
                    let v = var
                        .or(out.variance)
                        .expect("noise model checked against head");
                    Ok((out.mean, v))
                })
                .collect::<Result<Vec<_>>>()?;
            PredictiveMixture::from_components(comps)
        })
        .collect()
}

/// `θ̂₀ + P · mean(z_j)`; the noise coordinate, if any, is ignored.
pub fn averaged_weight_diagnostic(
    model: &SubspaceModel,
    samples: &PosteriorSamples,
) -> Result<ParamVector> {
    let k = model.dim();
    if samples.dim() < k || samples.is_empty() {
        return Err(Error::dim("draws do not cover the subspace"));
    }
    let j = samples.len() as f64;
    let mut mean = vec![0.0; k];
    for r in 0..samples.len() {
        mean.iter_mut()
            .zip(samples.draws.row(r))
            .for_each(|(m, z)| *m += z);
    }
    mean.iter_mut().for_each(|m| *m /= j);
    model.embed(&mean)
}
