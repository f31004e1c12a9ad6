//! Active-subspace construction and the affine map `θ = θ̂₀ + P z`.
//!
//! Gradient rows are drawn at perturbed copies of the anchor and random
//! training points; the projection keeps the leading eigenvectors of the
//! uncentered gradient covariance `Ĉ = (1/M) GᵀG`. When `n > M` the
//! eigenvectors are read off a thin SVD of `G/√M` so `Ĉ` is never formed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{GradTarget, Mlp, OutputHead, ParamVector, Scratch};
use crate::numerics::{apply_sign_convention, thin_svd, DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMethod {
    /// Output-informed: gradients of the predictive mean.
    As,
    /// Likelihood-informed: gradients of a data-misfit term.
    Lis,
    /// Principal directions of SGD iterate deviations.
    Pca,
    /// The whole parameter space (full-network baseline).
    Identity,
}

impl SubspaceMethod {
    fn code(self) -> u8 {
        match self {
            SubspaceMethod::As => 0,
            SubspaceMethod::Lis => 1,
            SubspaceMethod::Pca => 2,
            SubspaceMethod::Identity => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => SubspaceMethod::As,
            1 => SubspaceMethod::Lis,
            2 => SubspaceMethod::Pca,
            3 => SubspaceMethod::Identity,
            _ => return None,
        })
    }
}

/// Misfit used for likelihood-informed gradients with the mean-and-variance head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LisObjective {
    /// `(y − μ)² / v`
    #[default]
    StandardizedSqResidual,
    /// `½ ln(2πv) + (y − μ)² / (2v)`
    GaussianNll,
}

/// Which scalar function a gradient row differentiates.
pub fn gradient_target(
    method: SubspaceMethod,
    head: OutputHead,
    lis: LisObjective,
) -> Result<GradTarget> {
    match (method, head) {
        (SubspaceMethod::As, _) => Ok(GradTarget::OutputMean),
        (SubspaceMethod::Lis, OutputHead::Scalar) => Ok(GradTarget::MseLoss),
        (SubspaceMethod::Lis, OutputHead::MeanVariance) => Ok(match lis {
            LisObjective::StandardizedSqResidual => GradTarget::StandardizedSqResidual,
            LisObjective::GaussianNll => GradTarget::GaussianNll,
        }),
        (m, _) => Err(Error::invalid(format!(
            "{m:?} is not a gradient-based method"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct GradientMatrix {
    /// `M × n`; row `m` is `∇θ f(x_m)` at `θ_m`.
    pub g: DenseMatrix,
    pub method: SubspaceMethod,
    pub sigma0: f64,
    pub seed: u64,
}

/// Default perturbation scale: a tenth of the anchor's RMS weight.
pub fn default_sigma0(anchor: &[f64]) -> f64 {
    0.1 * ParamVector::new(anchor.to_vec()).rms()
}

/// Draws `M` gradient rows. Row `m` uses its own stream `(seed, m)`, so rows
/// can be computed concurrently without changing the result.
#[allow(clippy::too_many_arguments)]
pub fn sample_gradient_matrix(
    method: SubspaceMethod,
    lis: LisObjective,
    mlp: &Mlp,
    anchor: &[f64],
    sigma0: f64,
    m: usize,
    data: &Dataset,
    seed: u64,
) -> Result<GradientMatrix> {
    if m == 0 {
        return Err(Error::invalid("need at least one gradient sample"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(sigma0 >= 0.0) {
        return Err(Error::invalid(format!("sigma0 must be >= 0, got {sigma0}")));
    }
    if anchor.len() != mlp.param_count() {
        return Err(Error::dim("anchor length does not match the network"));
    }
    let target = gradient_target(method, mlp.config().head, lis)?;
    let n = anchor.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|row| -> Result<Vec<f64>> {
            let mut rng = RngStream::new(seed, row as u64);
            let i = rng.index(data.len());
            let theta: Vec<f64> = anchor
                .iter()
                .map(|&a| {
                    if sigma0 > 0.0 {
                        a + sigma0 * rng.standard_normal()
                    } else {
                        a
                    }
                })
                .collect();
            let mut grad = vec![0.0; n];
            let mut scratch = Scratch::default();
            mlp.accumulate_target_grad(
                &theta,
                data.x(i),
                Some(data.y(i)),
                target,
                1.0,
                &mut scratch,
                &mut grad,
            )?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    message: format!("gradient row {row}"),
                    at: theta,
                });
            }
            Ok(grad)
        })
        .collect::<Result<_>>()?;
    Ok(GradientMatrix {
        g: DenseMatrix::from_rows(&rows)?,
        method,
        sigma0,
        seed,
    })
}

/// `Ĉ = (1/M) GᵀG`. Materializes `n × n`; meant for small `n`.
pub fn empirical_covariance(g: &GradientMatrix) -> DenseMatrix {
    let m = g.g.rows() as f64;
    g.g.gram_cols().scaled(1.0 / m)
}

/// Column basis of a projection.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// `n × K` with orthonormal columns.
    Dense(DenseMatrix),
    /// `P = I_n`.
    Identity(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub basis: Basis,
    /// Leading eigenvalues `λ₁ ≥ … ≥ λ_K ≥ 0` of the analysed covariance.
    pub spectrum: Vec<f64>,
    pub method: SubspaceMethod,
    pub sigma0: f64,
    pub seed: u64,
}

impl Projection {
    pub fn identity(n: usize) -> Self {
        Self {
            basis: Basis::Identity(n),
            spectrum: vec![1.0; n],
            method: SubspaceMethod::Identity,
            sigma0: 0.0,
            seed: 0,
        }
    }

    /// Parameter-space dimension `n`.
    pub fn ambient_dim(&self) -> usize {
        match &self.basis {
            Basis::Dense(p) => p.rows(),
            Basis::Identity(n) => *n,
        }
    }

    /// Subspace dimension `K`.
    pub fn dim(&self) -> usize {
        match &self.basis {
            Basis::Dense(p) => p.cols(),
            Basis::Identity(n) => *n,
        }
    }

    /// Dense `n × K` copy of the basis.
    pub fn matrix(&self) -> DenseMatrix {
        match &self.basis {
            Basis::Dense(p) => p.clone(),
            Basis::Identity(n) => DenseMatrix::identity(*n),
        }
    }

    /// Writes `P z` added onto `out`.
    pub fn add_mapped(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if z.len() != self.dim() || out.len() != self.ambient_dim() {
            return Err(Error::dim(format!(
                "projection is {}x{}, got z of length {} and output of length {}",
                self.ambient_dim(),
                self.dim(),
                z.len(),
                out.len()
            )));
        }
        match &self.basis {
            Basis::Identity(_) => out.iter_mut().zip(z).for_each(|(o, zi)| *o += zi),
            Basis::Dense(p) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += crate::numerics::dot(p.row(i), z);
                }
            }
        }
        Ok(())
    }

    /// `Pᵀ g`.
    pub fn pull_back(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.ambient_dim() {
            return Err(Error::dim(format!(
                "gradient has length {}, projection expects {}",
                g.len(),
                self.ambient_dim()
            )));
        }
        match &self.basis {
            Basis::Identity(_) => Ok(g.to_vec()),
            Basis::Dense(p) => p.t_matvec(g),
        }
    }
}

fn check_rank(k: usize, m: usize, n: usize) -> Result<()> {
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!(
            "subspace dimension {k} must lie in 1..={} (M = {m}, n = {n})",
            m.min(n)
        )));
    }
    Ok(())
}

/// Top-`k` right singular vectors of `rows/√M`, i.e. top eigenvectors of `(1/M) rowsᵀ rows`.
fn leading_directions(rows: &DenseMatrix, k: usize) -> Result<(DenseMatrix, Vec<f64>)> {
    let (m, n) = rows.shape();
    check_rank(k, m, n)?;
    let svd = thin_svd(&rows.scaled(1.0 / (m as f64).sqrt()))?;
    let mut p = DenseMatrix::from_fn(n, k, |i, j| svd.vt[(j, i)]);
    apply_sign_convention(&mut p);
    let spectrum = svd.singular_values[..k].iter().map(|s| s * s).collect();
    Ok((p, spectrum))
}

pub fn projection_from_gradients(g: &GradientMatrix, k: usize) -> Result<Projection> {
    let (p, spectrum) = leading_directions(&g.g, k)?;
    Ok(Projection {
        basis: Basis::Dense(p),
        spectrum,
        method: g.method,
        sigma0: g.sigma0,
        seed: g.seed,
    })
}

/// Principal directions of iterate deviations (rows `θ_t − θ̄`), uncentered.
pub fn pca_projection_from_deviations(deviations: &DenseMatrix, k: usize) -> Result<Projection> {
    let (p, spectrum) = leading_directions(deviations, k)?;
    Ok(Projection {
        basis: Basis::Dense(p),
        spectrum,
        method: SubspaceMethod::Pca,
        sigma0: 0.0,
        seed: 0,
    })
}

/// Affine subspace `{θ̂₀ + P z}` with a Gaussian prior
/// `z_k ~ N(0, (σ̃ · s_k)²)`; the scales `s_k` default to 1.
#[derive(Debug, Clone)]
pub struct SubspaceModel {
    pub anchor: ParamVector,
    pub projection: Projection,
    pub prior_std: f64,
    coordinate_scales: Option<Vec<f64>>,
}

impl SubspaceModel {
    pub fn new(anchor: ParamVector, projection: Projection, prior_std: f64) -> Result<Self> {
        if anchor.len() != projection.ambient_dim() {
            return Err(Error::dim(format!(
                "anchor has length {}, projection rows {}",
                anchor.len(),
                projection.ambient_dim()
            )));
        }
        if !(prior_std > 0.0) {
            return Err(Error::invalid(format!(
                "prior std must be > 0, got {prior_std}"
            )));
        }
        Ok(Self {
            anchor,
            projection,
            prior_std,
            coordinate_scales: None,
        })
    }

    /// Per-coordinate prior scales, e.g. `√λ_k` to weight each direction by
    /// its share of the variance it was extracted from.
    pub fn with_coordinate_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        if scales.len() != self.dim() {
            return Err(Error::dim(format!(
                "{} scales for {} coordinates",
                scales.len(),
                self.dim()
            )));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("coordinate scales must be finite and > 0"));
        }
        self.coordinate_scales = Some(scales);
        Ok(self)
    }

    /// Prior standard deviation of every coordinate.
    pub fn prior_stds(&self) -> Vec<f64> {
        match &self.coordinate_scales {
            Some(s) => s.iter().map(|c| self.prior_std * c).collect(),
            None => vec![self.prior_std; self.dim()],
        }
    }

    /// Full-network model: `θ̂₀ = 0`, `P = I`.
    pub fn identity(n: usize, prior_std: f64) -> Result<Self> {
        Self::new(ParamVector::zeros(n), Projection::identity(n), prior_std)
    }

    pub fn dim(&self) -> usize {
        self.projection.dim()
    }

    pub fn embed(&self, z: &[f64]) -> Result<ParamVector> {
        let mut theta = self.anchor.to_vec();
        self.projection.add_mapped(z, &mut theta)?;
        Ok(ParamVector::new(theta))
    }

    pub fn pullback_gradient(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.projection.pull_back(g)
    }
}

const PROJECTION_MAGIC: &[u8; 8] = b"ASBNPROJ";
const FORMAT_VERSION: u32 = 1;

/// Layout (little endian): magic, version `u32`, `n u64`, `K u64`,
/// method `u8`, `σ₀ f64`, seed `u64`, then `P` row-major (`n·K` f64, omitted
/// for the identity basis) and the `K` spectrum values.
pub fn save_projection(path: &Path, proj: &Projection) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROJECTION_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(proj.ambient_dim() as u64).to_le_bytes())?;
    w.write_all(&(proj.dim() as u64).to_le_bytes())?;
    w.write_all(&[proj.method.code()])?;
    w.write_all(&proj.sigma0.to_le_bytes())?;
    w.write_all(&proj.seed.to_le_bytes())?;
    if let Basis::Dense(p) = &proj.basis {
        write_f64s(&mut w, p.as_slice())?;
    }
    write_f64s(&mut w, &proj.spectrum)?;
    w.flush()?;
    Ok(())
}

pub fn load_projection(path: &Path) -> Result<Projection> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PROJECTION_MAGIC {
        return Err(Error::format(path, "not a projection file"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let n = read_u64(&mut r)? as usize;
    let k = read_u64(&mut r)? as usize;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let method = SubspaceMethod::from_code(code[0])
        .ok_or_else(|| Error::format(path, format!("unknown method code {}", code[0])))?;
    let sigma0 = f64::from_le_bytes(read_array(&mut r)?);
    let seed = read_u64(&mut r)?;
    let basis = if method == SubspaceMethod::Identity {
        if n != k {
            return Err(Error::format(path, "identity projection must be square"));
        }
        Basis::Identity(n)
    } else {
        Basis::Dense(DenseMatrix::from_vec(n, k, read_f64s(&mut r, n * k)?)?)
    };
    let spectrum = read_f64s(&mut r, k)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(Projection {
        basis,
        spectrum,
        method,
        sigma0,
        seed,
    })
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}
