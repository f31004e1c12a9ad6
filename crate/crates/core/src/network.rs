//! Multilayer perceptron evaluated over a flat parameter vector.
//!
//! Parameters are laid out layer-major: for each layer the `out × in` weight
//! matrix (row-major) followed by its `out` biases, input layer first and the
//! output head last.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Added to the softplus of the raw variance output.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// One output: the predictive mean.
    Scalar,
    /// Two raw outputs: mean and a softplus-linked variance.
    MeanVariance,
}

impl OutputHead {
    pub fn outputs(self) -> usize {
        match self {
            OutputHead::Scalar => 1,
            OutputHead::MeanVariance => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head: OutputHead,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be >= 1"));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("hidden layer {i} has width 0")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer including the head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.head.outputs());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Flattened network weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Root mean square of the entries.
    pub fn rms(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        (self.0.iter().map(|v| v * v).sum::<f64>() / self.0.len() as f64).sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOutput {
    pub mean: f64,
    /// Present only for the mean-and-variance head.
    pub variance: Option<f64>,
}

/// Scalar functions of the network output whose parameter gradients we take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// `μ`
    OutputMean,
    /// `(y − μ)²`
    MseLoss,
    /// `½ ln(2πv) + (y − μ)² / (2v)`
    GaussianNll,
    /// `(y − μ)² / v`
    StandardizedSqResidual,
}

impl GradTarget {
    pub fn needs_label(self) -> bool {
        !matches!(self, GradTarget::OutputMean)
    }

    pub fn needs_variance(self) -> bool {
        matches!(
            self,
            GradTarget::GaussianNll | GradTarget::StandardizedSqResidual
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

/// Per-call buffers for forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (post-activation for hidden layers, raw for the head).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<LayerLayout>,
    n_params: usize,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut offset = 0;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerLayout {
                    fan_in,
                    fan_out,
                    weights: offset,
                    biases: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                l
            })
            .collect();
        Ok(Self {
            config,
            layers,
            n_params: offset,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut theta = vec![0.0; self.n_params];
        for l in &self.layers {
            let scale = 1.0 / (l.fan_in as f64).sqrt();
            for w in &mut theta[l.weights..l.biases] {
                *w = scale * rng.standard_normal();
            }
        }
        ParamVector(theta)
    }

    fn check(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(Error::dim(format!(
                "parameter vector has length {}, network needs {}",
                theta.len(),
                self.n_params
            )));
        }
        if x.len() != self.config.input_dim {
            return Err(Error::dim(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Runs the network and leaves intermediate activations in `scratch`.
    /// Returns the raw head outputs.
    pub fn forward_raw<'s>(
        &self,
        theta: &[f64],
        x: &[f64],
        scratch: &'s mut Scratch,
    ) -> Result<&'s [f64]> {
        self.check(theta, x)?;
        let n_layers = self.layers.len();
        scratch.acts.resize_with(n_layers + 1, Vec::new);
        scratch.acts[0].clear();
        scratch.acts[0].extend_from_slice(x);
        for (li, l) in self.layers.iter().enumerate() {
            let (prev, rest) = scratch.acts.split_at_mut(li + 1);
            let input = &prev[li];
            let out = &mut rest[0];
            out.clear();
            let w = &theta[l.weights..l.biases];
            let b = &theta[l.biases..l.biases + l.fan_out];
            for o in 0..l.fan_out {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    z += wi * xi;
                }
                out.push(z);
            }
            if li + 1 < n_layers {
                match self.config.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
        }
        Ok(&scratch.acts[n_layers])
    }

    pub fn output_from_raw(&self, raw: &[f64]) -> NetOutput {
        match self.config.head {
            OutputHead::Scalar => NetOutput {
                mean: raw[0],
                variance: None,
            },
            OutputHead::MeanVariance => NetOutput {
                mean: raw[0],
                variance: Some(softplus(raw[1]) + VARIANCE_FLOOR),
            },
        }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<NetOutput> {
        let mut scratch = Scratch::default();
        self.forward_with(theta, x, &mut scratch)
    }

    pub fn forward_with(
        &self,
        theta: &[f64],
        x: &[f64],
        scratch: &mut Scratch,
    ) -> Result<NetOutput> {
        let raw = self.forward_raw(theta, x, scratch)?;
        Ok(self.output_from_raw(raw))
    }

    /// Accumulates `scale · ∂(d_mean·μ + d_var·v)/∂θ` into `grad`, using the
    /// activations left by the last [`Mlp::forward_raw`] call on `scratch`.
    pub fn backward_accumulate(
        &self,
        theta: &[f64],
        scratch: &mut Scratch,
        d_mean: f64,
        d_var: f64,
        grad: &mut [f64],
    ) {
        let n_layers = self.layers.len();
        debug_assert_eq!(grad.len(), self.n_params);
        debug_assert_eq!(scratch.acts.len(), n_layers + 1);

        let Scratch {
            acts,
            delta,
            delta_prev,
        } = scratch;
        delta.clear();
        delta.push(d_mean);
        if self.config.head == OutputHead::MeanVariance {
            let raw_var = acts[n_layers][1];
            delta.push(d_var * sigmoid(raw_var));
        }

        for li in (0..n_layers).rev() {
            let l = self.layers[li];
            let input = &acts[li];
            {
                let (gw, gb) =
                    grad[l.weights..l.biases + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
                for o in 0..l.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * l.fan_in..(o + 1) * l.fan_in];
                    for (g, xi) in row.iter_mut().zip(input.iter()) {
                        *g += d * xi;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let w = &theta[l.weights..l.biases];
            delta_prev.clear();
            delta_prev.resize(l.fan_in, 0.0);
            for o in 0..l.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                for (dp, wi) in delta_prev.iter_mut().zip(row) {
                    *dp += d * wi;
                }
            }
            // `input` holds the activations of layer li - 1.
            match self.config.activation {
                Activation::Tanh => {
                    for (dp, a) in delta_prev.iter_mut().zip(input.iter()) {
                        *dp *= 1.0 - a * a;
                    }
                }
                Activation::Relu => {
                    for (dp, a) in delta_prev.iter_mut().zip(input.iter()) {
                        if *a <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                }
            }
            std::mem::swap(delta, delta_prev);
        }
    }

    pub fn scalar_target(
        &self,
        theta: &[f64],
        x: &[f64],
        y: Option<f64>,
        target: GradTarget,
    ) -> Result<f64> {
        let out = self.forward(theta, x)?;
        Ok(target_value_and_partials(out, y, target)?.0)
    }

    /// Exact gradient of [`Mlp::scalar_target`] with respect to every parameter.
    pub fn backprop_param_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: Option<f64>,
        target: GradTarget,
    ) -> Result<Vec<f64>> {
        let mut scratch = Scratch::default();
        let mut grad = vec![0.0; self.n_params];
        self.accumulate_target_grad(theta, x, y, target, 1.0, &mut scratch, &mut grad)?;
        Ok(grad)
    }

    /// Adds `weight · ∇θ f` into `grad` and returns `f`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_target_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: Option<f64>,
        target: GradTarget,
        weight: f64,
        scratch: &mut Scratch,
        grad: &mut [f64],
    ) -> Result<f64> {
        let raw = self.forward_raw(theta, x, scratch)?;
        let out = self.output_from_raw(raw);
        let (value, d_mean, d_var) = target_value_and_partials(out, y, target)?;
        self.backward_accumulate(theta, scratch, weight * d_mean, weight * d_var, grad);
        Ok(value)
    }
}

/// Value of `target` at the network output together with its partial
/// derivatives with respect to the mean and the variance.
pub fn target_value_and_partials(
    out: NetOutput,
    y: Option<f64>,
    target: GradTarget,
) -> Result<(f64, f64, f64)> {
    if target == GradTarget::OutputMean {
        return Ok((out.mean, 1.0, 0.0));
    }
    let y = y.ok_or_else(|| Error::invalid(format!("{target:?} needs a label")))?;
    let r = y - out.mean;
    if target == GradTarget::MseLoss {
        return Ok((r * r, -2.0 * r, 0.0));
    }
    let v = out
        .variance
        .ok_or_else(|| Error::invalid(format!("{target:?} needs the mean-and-variance head")))?;
    if !(v > 0.0) {
        return Err(Error::NumericDomain(format!(
            "variance must be > 0, got {v}"
        )));
    }
    Ok(match target {
        GradTarget::GaussianNll => (
            0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v),
            -r / v,
            0.5 / v - r * r / (2.0 * v * v),
        ),
        GradTarget::StandardizedSqResidual => (r * r / v, -2.0 * r / v, -r * r / (v * v)),
        GradTarget::OutputMean | GradTarget::MseLoss => unreachable!(),
    })
}
