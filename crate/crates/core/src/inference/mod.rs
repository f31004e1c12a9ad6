//! Posterior inference over subspace coordinates and Bayesian model averaging.
//!
//! Samplers only see a [`TargetDensity`]; the full-network baseline is the
//! same code with an identity [`crate::subspace::SubspaceModel`].

mod bma;
mod hmc;
mod target;
mod vi;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

pub use bma::{averaged_weight_diagnostic, bma_predictive, PredictiveMixture};
pub use hmc::{hamiltonian, hmc_run, leapfrog, HmcConfig, State};
pub use target::{ConjugateGaussian, DiagGaussian, NoiseModel, SubspacePosterior, TargetDensity};
pub use vi::{elbo_estimate, fit_vi, kl_diag_gaussians, VariationalParams, ViConfig, ViFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Hmc,
    Vi,
    /// A single point estimate.
    Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    /// One draw per row.
    pub draws: DenseMatrix,
    pub source: SampleSource,
    pub acceptance_rate: Option<f64>,
    pub step_size: Option<f64>,
}

impl PosteriorSamples {
    pub fn new(draws: DenseMatrix, source: SampleSource) -> Result<Self> {
        if draws.rows() == 0 {
            return Err(Error::invalid("posterior samples need at least one draw"));
        }
        if !draws.is_finite() {
            return Err(Error::invalid("posterior draws must be finite"));
        }
        Ok(Self {
            draws,
            source,
            acceptance_rate: None,
            step_size: None,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.draws.cols()
    }

    /// CSV with header `z_1,…,z_K` and an optional trailing `log_noise` column.
    pub fn write_csv(&self, w: impl Write, with_log_noise: bool) -> Result<()> {
        let k = self.dim() - usize::from(with_log_noise);
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=k).map(|i| format!("z_{i}")).collect();
        if with_log_noise {
            header.push("log_noise".into());
        }
        out.write_record(&header)?;
        for r in 0..self.len() {
            out.write_record(self.draws.row(r).iter().map(|v| format!("{v:.16e}")))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read, source: SampleSource) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        let cols = header.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            for (c, cell) in rec.iter().enumerate() {
                data.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 2,
                    column: header.get(c).unwrap_or_default().to_string(),
                    message: e.to_string(),
                })?);
            }
            rows += 1;
        }
        Self::new(DenseMatrix::from_vec(rows, cols, data)?, source)
    }
}

/// Where the `J` draws for model averaging come from.
#[derive(Debug, Clone, Copy)]
pub enum PosteriorSource<'a> {
    Hmc(&'a PosteriorSamples),
    Vi(&'a VariationalParams),
}

/// Even-stride indices `(i + 1)·⌊N/J⌋ − 1`, ending near the chain's tail.
pub fn thinning_indices(n: usize, j: usize) -> Result<Vec<usize>> {
    if j == 0 || j > n {
        return Err(Error::invalid(format!("cannot thin {n} draws to {j}")));
    }
    let stride = n / j;
    Ok((0..j).map(|i| (i + 1) * stride - 1).collect())
}

pub fn draw_posterior(
    source: PosteriorSource<'_>,
    j: usize,
    rng: &mut RngStream,
) -> Result<PosteriorSamples> {
    match source {
        PosteriorSource::Hmc(s) => {
            let idx = thinning_indices(s.len(), j)?;
            let rows: Vec<&[f64]> = idx.iter().map(|&i| s.draws.row(i)).collect();
            let mut out = PosteriorSamples::new(DenseMatrix::from_rows(&rows)?, SampleSource::Hmc)?;
            out.acceptance_rate = s.acceptance_rate;
            out.step_size = s.step_size;
            Ok(out)
        }
        PosteriorSource::Vi(q) => {
            if j == 0 {
                return Err(Error::invalid("need at least one draw"));
            }
            let rows: Vec<Vec<f64>> = (0..j).map(|_| q.sample(rng)).collect();
            PosteriorSamples::new(DenseMatrix::from_rows(&rows)?, SampleSource::Vi)
        }
    }
}

#[cfg(test)]
mod tests;
