use serde::{Deserialize, Serialize};

use super::target::TargetDensity;
use super::{PosteriorSamples, SampleSource};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    /// Fixed initial step size; found heuristically when absent.
    pub step_size: Option<f64>,
    /// Each iteration scales the step size by a uniform factor in `[1 − j, 1 + j]`.
    pub jitter: f64,
    /// Adapt a diagonal mass matrix in windows during warmup.
    pub adapt_mass: bool,
    pub max_consecutive_rejections: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            warmup: 1000,
            samples: 5000,
            target_accept: 0.8,
            step_size: None,
            jitter: 0.1,
            adapt_mass: true,
            max_consecutive_rejections: 500,
        }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 {
            return Err(Error::invalid("leapfrog steps must be >= 1"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("HMC needs at least one draw"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("jitter must lie in [0, 1)"));
        }
        if matches!(self.step_size, Some(e) if !(e >= 0.0 && e.is_finite())) {
            return Err(Error::invalid("step size must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Phase-space point with cached log density and gradient.
#[derive(Debug, Clone)]
pub struct State {
    pub z: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl State {
    pub fn at(target: &dyn TargetDensity, z: Vec<f64>) -> Result<Self> {
        let (log_density, grad) = target.log_density_grad(&z)?;
        Ok(Self {
            z,
            log_density,
            grad,
        })
    }
}

/// `H = −log π(z) + ½ pᵀ M⁻¹ p`.
pub fn hamiltonian(log_density: f64, p: &[f64], inv_mass: &[f64]) -> f64 {
    -log_density + 0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// `steps` leapfrog steps of size `eps`; returns the end state and momentum.
pub fn leapfrog(
    target: &dyn TargetDensity,
    start: &State,
    p0: &[f64],
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
) -> Result<(State, Vec<f64>)> {
    if eps == 0.0 {
        return Ok((start.clone(), p0.to_vec()));
    }
    let mut z = start.z.clone();
    let mut p = p0.to_vec();
    let mut grad = start.grad.clone();
    let mut log_density = start.log_density;
    for _ in 0..steps {
        p.iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p += 0.5 * eps * g);
        z.iter_mut()
            .zip(&p)
            .zip(inv_mass)
            .for_each(|((z, p), m)| *z += eps * m * p);
        (log_density, grad) = target.log_density_grad(&z)?;
        p.iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p += 0.5 * eps * g);
    }
    Ok((
        State {
            z,
            log_density,
            grad,
        },
        p,
    ))
}

fn draw_momentum(inv_mass: &[f64], rng: &mut RngStream) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|m| rng.standard_normal() / m.sqrt())
        .collect()
}

/// Metropolis acceptance probability of one trajectory; 0 when the
/// trajectory left the region where the density is finite.
fn transition(
    target: &dyn TargetDensity,
    current: &State,
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
    rng: &mut RngStream,
) -> (f64, Option<State>) {
    let p0 = draw_momentum(inv_mass, rng);
    let h0 = hamiltonian(current.log_density, &p0, inv_mass);
    match leapfrog(target, current, &p0, eps, steps, inv_mass) {
        Ok((proposal, p1)) => {
            let h1 = hamiltonian(proposal.log_density, &p1, inv_mass);
            let a = if h1.is_finite() {
                (h0 - h1).exp().min(1.0)
            } else {
                0.0
            };
            (a, Some(proposal))
        }
        Err(_) => (0.0, None),
    }
}

fn find_reasonable_step(
    target: &dyn TargetDensity,
    state: &State,
    inv_mass: &[f64],
    rng: &mut RngStream,
) -> f64 {
    let mut eps = 1.0;
    let p0 = draw_momentum(inv_mass, rng);
    let h0 = hamiltonian(state.log_density, &p0, inv_mass);
    let accept = |eps: f64| match leapfrog(target, state, &p0, eps, 1, inv_mass) {
        Ok((s, p)) => {
            let d = h0 - hamiltonian(s.log_density, &p, inv_mass);
            if d.is_finite() {
                d
            } else {
                f64::NEG_INFINITY
            }
        }
        Err(_) => f64::NEG_INFINITY,
    };
    let ln_half = 0.5f64.ln();
    let direction = if accept(eps) > ln_half { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let d = accept(eps);
        if direction * d <= direction * ln_half {
            break;
        }
        eps *= 2f64.powf(direction);
    }
    eps
}

/// Dual averaging of the log step size toward a target acceptance rate.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Warmup iterations after which the mass matrix is re-estimated, using an
/// initial fast phase, doubling slow windows, and a terminal fast phase.
/// Returns the first collected iteration and the window end points.
pub(crate) fn mass_windows(warmup: usize) -> Option<(usize, Vec<usize>)> {
    let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
    if warmup < 20 {
        return None;
    }
    if init + term + base > warmup {
        init = (0.15 * warmup as f64) as usize;
        term = (0.1 * warmup as f64) as usize;
        base = warmup - init - term;
    }
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    Some((init, ends))
}

/// Metropolis-corrected HMC with dual-averaged step size and windowed
/// diagonal mass adaptation during warmup.
pub fn hmc_run(
    target: &dyn TargetDensity,
    init: &[f64],
    cfg: &HmcConfig,
    rng: &mut RngStream,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let k = target.dim();
    if init.len() != k {
        return Err(Error::dim(format!(
            "initial point has {} coordinates, target {k}",
            init.len()
        )));
    }
    let mut state = State::at(target, init.to_vec())?;
    let mut inv_mass = vec![1.0; k];
    let mut eps = match cfg.step_size {
        Some(e) => e,
        None => find_reasonable_step(target, &state, &inv_mass, rng),
    };
    let mut adapter = DualAveraging::new(eps, cfg.target_accept);
    let (window_start, windows) = match cfg.adapt_mass.then(|| mass_windows(cfg.warmup)).flatten() {
        Some((start, ends)) => (start, ends),
        None => (usize::MAX, Vec::new()),
    };
    let mut window_draws: Vec<Vec<f64>> = Vec::new();
    let mut next_window = 0usize;

    let mut draws = Vec::with_capacity(cfg.samples * k);
    let mut accept_sum = 0.0;
    let mut rejections = 0usize;

    for iter in 0..cfg.warmup + cfg.samples {
        let warming = iter < cfg.warmup;
        let this_eps = if cfg.jitter > 0.0 && eps > 0.0 {
            eps * (1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0))
        } else {
            eps
        };
        let (a, proposal) =
            transition(target, &state, this_eps, cfg.leapfrog_steps, &inv_mass, rng);
        let accepted = match proposal {
            Some(p) if rng.uniform() < a => {
                state = p;
                true
            }
            _ => false,
        };
        if accepted || eps == 0.0 {
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= cfg.max_consecutive_rejections {
                return Err(Error::SamplerStuck {
                    consecutive: rejections,
                });
            }
        }

        if warming {
            eps = adapter.update(a);
            if iter >= window_start && next_window < windows.len() {
                window_draws.push(state.z.clone());
                if iter + 1 == windows[next_window] {
                    inv_mass = regularized_variance(&window_draws);
                    window_draws.clear();
                    next_window += 1;
                    eps = find_reasonable_step(target, &state, &inv_mass, rng);
                    adapter = DualAveraging::new(eps, cfg.target_accept);
                }
            }
            if iter + 1 == cfg.warmup {
                eps = adapter.final_step();
            }
        } else {
            accept_sum += a;
            draws.extend_from_slice(&state.z);
        }
    }

    Ok(PosteriorSamples {
        draws: DenseMatrix::from_vec(cfg.samples, k, draws)?,
        source: SampleSource::Hmc,
        acceptance_rate: Some(accept_sum / cfg.samples as f64),
        step_size: Some(eps),
    })
}

fn regularized_variance(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    let k = draws[0].len();
    (0..k)
        .map(|j| {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        })
        .collect()
}
