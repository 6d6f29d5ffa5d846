//! Euler–Maruyama paths of the multiscale, homogenized and
//! interacting-particle dynamics, and their subsampling into observations.
//!
//! Randomness comes from `ChaCha8Rng` seeded with a 64-bit seed; standard
//! normals are drawn with the ziggurat sampler of `rand_distr`, one draw per
//! coordinate per step in coordinate order. Replication seeds are derived
//! from `(master_seed, indices...)` with [`derive_seed`], so a replication's
//! path does not depend on which worker runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filterbank;
use crate::homogenize::HomogenizedModel;
use crate::potentials::{FastPotential, MultiscaleModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("invalid simulation setting: {0}")]
    InvalidSetting(String),
    #[error("state became non-finite at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64 },
    #[error("observation spacing {delta} is not a multiple of the step {h}")]
    NonCommensurate { delta: f64, h: f64 },
    #[error("invalid observation set: {0}")]
    InvalidObservations(String),
}

pub type Result<T> = std::result::Result<T, SimulateError>;

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the substream indexed by `indices` under `master`.
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(mix64(master), |acc, &i| mix64(acc ^ mix64(i)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default fine step `eps^3`.
pub fn default_step(epsilon: f64) -> f64 {
    epsilon.powi(3)
}

/// Largest step `<= h_max` that divides `delta` evenly.
pub fn commensurate_step(delta: f64, h_max: f64) -> f64 {
    let k = (delta / h_max * (1.0 - 1e-12)).ceil().max(1.0);
    delta / k
}

/// Time horizon, fine step, seed and initial state of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub t_end: f64,
    pub h: f64,
    pub seed: u64,
    pub x0: f64,
}

impl SimSpec {
    pub fn new(t_end: f64, h: f64, seed: u64) -> Self {
        Self { t_end, h, seed, x0: 0.0 }
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    pub fn n_steps(&self) -> Result<usize> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(SimulateError::InvalidSetting(format!("step must be positive, got {}", self.h)));
        }
        if !(self.t_end >= self.h && self.t_end.is_finite()) {
            return Err(SimulateError::InvalidSetting(format!(
                "horizon {} shorter than one step {}",
                self.t_end, self.h
            )));
        }
        let r = self.t_end / self.h;
        let n = if (r - r.round()).abs() <= 1e-9 * r.max(1.0) { r.round() } else { r.floor() };
        Ok(n as usize)
    }
}

/// Path sampled every `step` from `t0 = 0`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    values: Vec<f64>,
    dim: usize,
    step: f64,
    seed: u64,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of stored states (steps + 1).
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.step
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Observations `X~_n` at spacing `delta`, row-major with `dim` columns,
/// optionally paired with filtered values `Z~_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    x: Vec<f64>,
    dim: usize,
    delta: f64,
    z: Option<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(x: Vec<f64>, dim: usize, delta: f64, z: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 || x.is_empty() || !x.len().is_multiple_of(dim) {
            return Err(SimulateError::InvalidObservations(format!(
                "{} values do not form rows of width {dim}",
                x.len()
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(SimulateError::InvalidObservations(format!("delta must be positive, got {delta}")));
        }
        if let Some(z) = &z {
            if z.len() != x.len() {
                return Err(SimulateError::InvalidObservations("z and x lengths differ".into()));
            }
            if z[..dim].iter().any(|&v| v != 0.0) {
                return Err(SimulateError::InvalidObservations("filtered series must start at 0".into()));
            }
        }
        Ok(Self { x, dim, delta, z })
    }

    pub fn scalar(x: Vec<f64>, delta: f64) -> Result<Self> {
        Self::new(x, 1, delta, None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of observations `N + 1`.
    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Number of increments `N`.
    pub fn n_intervals(&self) -> usize {
        self.len() - 1
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> Option<&[f64]> {
        self.z.as_deref()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.x[n * self.dim..(n + 1) * self.dim]
    }

    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.x.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Attach `Z~` computed with the exponential filter, coordinate-wise.
    pub fn with_filter(mut self) -> Self {
        let mut z = vec![0.0; self.x.len()];
        for i in 0..self.dim {
            let zi = filterbank::filter_recurrent(&self.coordinate(i), self.delta);
            for (n, v) in zi.into_iter().enumerate() {
                z[n * self.dim + i] = v;
            }
        }
        self.z = Some(z);
        self
    }

    pub fn without_filter(mut self) -> Self {
        self.z = None;
        self
    }

    /// The first `n_intervals + 1` observations.
    pub fn prefix(&self, n_intervals: usize) -> Result<Self> {
        let n = n_intervals + 1;
        if n > self.len() {
            return Err(SimulateError::InvalidObservations(format!(
                "prefix of {n_intervals} intervals requested from {} available",
                self.n_intervals()
            )));
        }
        Ok(Self {
            x: self.x[..n * self.dim].to_vec(),
            dim: self.dim,
            delta: self.delta,
            z: self.z.as_ref().map(|z| z[..n * self.dim].to_vec()),
        })
    }

    /// Row sums `S_n = sum_i X_i` (and of `Z`) as a scalar set.
    pub fn coordinate_sum(&self) -> Self {
        let sum = |v: &[f64]| -> Vec<f64> { v.chunks(self.dim).map(|r| r.iter().sum()).collect() };
        Self {
            x: sum(&self.x),
            dim: 1,
            delta: self.delta,
            z: self.z.as_deref().map(sum),
        }
    }

    /// `max_n max(|X~_n|, |Z~_n|)`.
    pub fn max_abs(&self) -> f64 {
        let mx = self.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mz = self.z.as_ref().map_or(0.0, |z| z.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        mx.max(mz)
    }

    pub fn all_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.z.as_ref().is_none_or(|z| z.iter().all(|v| v.is_finite()))
    }
}

/// Explicit Euler–Maruyama for `dX = b(X) dt + sqrt(2 sigma) dW`.
///
/// `noise` fills a buffer with standard normals for each step and `observe`
/// sees the state after `k` steps for `k = 0..=n_steps`.
pub fn integrate<D, N, O>(
    x0: &[f64],
    mut drift: D,
    sigma: f64,
    h: f64,
    n_steps: usize,
    mut noise: N,
    mut observe: O,
) -> Result<()>
where
    D: FnMut(&[f64], &mut [f64]),
    N: FnMut(&mut [f64]),
    O: FnMut(usize, &[f64]),
{
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(SimulateError::InvalidSetting(format!("diffusion must be >= 0, got {sigma}")));
    }
    let dim = x0.len();
    let scale = (2.0 * sigma * h).sqrt();
    let mut x = x0.to_vec();
    let mut b = vec![0.0; dim];
    let mut xi = vec![0.0; dim];
    observe(0, &x);
    for k in 1..=n_steps {
        drift(&x, &mut b);
        noise(&mut xi);
        let mut finite = true;
        for i in 0..dim {
            x[i] += h * b[i] + scale * xi[i];
            finite &= x[i].is_finite();
        }
        if !finite {
            return Err(SimulateError::BlowUp { step: k, time: k as f64 * h });
        }
        observe(k, &x);
    }
    Ok(())
}

fn seeded_noise(seed: u64) -> impl FnMut(&mut [f64]) {
    let mut rng = rng_from_seed(seed);
    move |buf: &mut [f64]| {
        for v in buf.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
}

fn run_full<D>(x0: Vec<f64>, drift: D, sigma: f64, spec: &SimSpec) -> Result<Trajectory>
where
    D: FnMut(&[f64], &mut [f64]),
{
    let n = spec.n_steps()?;
    let dim = x0.len();
    let mut values = Vec::with_capacity((n + 1) * dim);
    integrate(&x0, drift, sigma, spec.h, n, seeded_noise(spec.seed), |_, x| values.extend_from_slice(x))?;
    Ok(Trajectory { values, dim, step: spec.h, seed: spec.seed })
}

fn stride(delta: f64, h: f64) -> Result<usize> {
    if !(delta > 0.0) || delta < h * (1.0 - 1e-9) {
        return Err(SimulateError::NonCommensurate { delta, h });
    }
    let r = delta / h;
    if (r - r.round()).abs() > 1e-9 * r.max(1.0) {
        return Err(SimulateError::NonCommensurate { delta, h });
    }
    Ok(r.round() as usize)
}

fn run_observed<D>(x0: Vec<f64>, drift: D, sigma: f64, spec: &SimSpec, delta: f64) -> Result<ObservationSet>
where
    D: FnMut(&[f64], &mut [f64]),
{
    let k = stride(delta, spec.h)?;
    let n = spec.n_steps()?;
    let dim = x0.len();
    let mut x = Vec::with_capacity((n / k + 1) * dim);
    integrate(&x0, drift, sigma, spec.h, (n / k) * k, seeded_noise(spec.seed), |step, s| {
        if step % k == 0 {
            x.extend_from_slice(s);
        }
    })?;
    ObservationSet::new(x, dim, delta, None)
}

fn multiscale_drift(model: &MultiscaleModel) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    move |x, b| b[0] = model.eval_drift_slow(x[0]) + model.eval_drift_fast(x[0])
}

fn homogenized_drift(model: &HomogenizedModel) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    move |x, b| b[0] = model.drift(x[0])
}

pub fn simulate_multiscale(model: &MultiscaleModel, spec: &SimSpec) -> Result<Trajectory> {
    run_full(vec![spec.x0], multiscale_drift(model), model.sigma(), spec)
}

/// Streaming variant: keeps only every `delta / h`-th state.
pub fn simulate_multiscale_observed(model: &MultiscaleModel, spec: &SimSpec, delta: f64) -> Result<ObservationSet> {
    run_observed(vec![spec.x0], multiscale_drift(model), model.sigma(), spec, delta)
}

pub fn simulate_homogenized(model: &HomogenizedModel, spec: &SimSpec) -> Result<Trajectory> {
    run_full(vec![spec.x0], homogenized_drift(model), model.sigma(), spec)
}

pub fn simulate_homogenized_observed(
    model: &HomogenizedModel,
    spec: &SimSpec,
    delta: f64,
) -> Result<ObservationSet> {
    run_observed(vec![spec.x0], homogenized_drift(model), model.sigma(), spec, delta)
}

/// `d` particles in a two-scale confining potential with mean-field
/// attraction of strength `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleModel {
    pub alpha: f64,
    pub theta: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub fast: FastPotential,
    pub d: usize,
}

impl ParticleModel {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(SimulateError::InvalidSetting(format!("need at least 2 particles, got {}", self.d)));
        }
        if !(self.sigma > 0.0) || !(self.epsilon > 0.0) {
            return Err(SimulateError::InvalidSetting("sigma and epsilon must be positive".into()));
        }
        Ok(())
    }

    /// `b_i(x) = -alpha x_i - p'(x_i/eps)/eps - (theta/d) sum_j (x_i - x_j)`.
    pub fn drift(&self, x: &[f64], b: &mut [f64]) {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        for (bi, &xi) in b.iter_mut().zip(x) {
            *bi = -self.alpha * xi - self.fast.derivative(xi / self.epsilon) / self.epsilon - self.theta * (xi - mean);
        }
    }
}

pub fn simulate_particles(model: &ParticleModel, spec: &SimSpec) -> Result<Trajectory> {
    model.validate()?;
    run_full(vec![spec.x0; model.d], |x, b| model.drift(x, b), model.sigma, spec)
}

pub fn simulate_particles_observed(model: &ParticleModel, spec: &SimSpec, delta: f64) -> Result<ObservationSet> {
    model.validate()?;
    run_observed(vec![spec.x0; model.d], |x, b| model.drift(x, b), model.sigma, spec, delta)
}

/// `X~_n = X_{n delta/h}` for `n = 0..=floor(T/delta)`.
pub fn subsample(traj: &Trajectory, delta: f64) -> Result<ObservationSet> {
    let k = stride(delta, traj.step)?;
    let dim = traj.dim;
    let x: Vec<f64> = (0..traj.len()).step_by(k).flat_map(|i| traj.state(i).iter().copied()).collect();
    ObservationSet::new(x, dim, delta, None)
}
