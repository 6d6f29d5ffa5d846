//! Effective coefficients of the homogenized equation.
//!
//! In one dimension the cell problem has the closed-form derivative
//! `Phi'(y) = L e^{p(y)/sigma} / C_hat - 1`, which gives
//! `K = L^2 / (C_sigma * C_hat_sigma)`. Both partition constants are
//! composite-Simpson quadratures over one period.

use serde::Serialize;
use thiserror::Error;

use crate::potentials::{FastPotential, MultiscaleModel, SlowPotential};

pub const DEFAULT_N_QUAD: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("number of Simpson panels must be even and at least 16, got {0}")]
    BadPanelCount(usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
}

/// Composite Simpson's rule on `[a, b]` with `n` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    debug_assert!(n.is_multiple_of(2) && n > 0);
    let h = (b - a) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for k in 1..n {
        let v = f(a + k as f64 * h);
        if k % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even)
}

fn check(sigma: f64, n_quad: usize) -> Result<(), QuadratureError> {
    if !n_quad.is_multiple_of(2) || n_quad < 16 {
        return Err(QuadratureError::BadPanelCount(n_quad));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(QuadratureError::BadSigma(sigma));
    }
    Ok(())
}

/// `(C_sigma, C_hat_sigma) = (int_0^L e^{-p/sigma}, int_0^L e^{p/sigma})`.
pub fn compute_partition_constants(
    p: &FastPotential,
    sigma: f64,
    n_quad: usize,
) -> Result<(f64, f64), QuadratureError> {
    check(sigma, n_quad)?;
    let l = p.period();
    if p.is_zero() {
        return Ok((l, l));
    }
    let c = simpson(|y| (-p.value(y) / sigma).exp(), 0.0, l, n_quad);
    let c_hat = simpson(|y| (p.value(y) / sigma).exp(), 0.0, l, n_quad);
    Ok((c, c_hat))
}

/// `K = L^2 / (C_sigma C_hat_sigma)`.
pub fn compute_k(p: &FastPotential, sigma: f64, n_quad: usize) -> Result<f64, QuadratureError> {
    let (c, c_hat) = compute_partition_constants(p, sigma, n_quad)?;
    let l = p.period();
    Ok(if p.is_zero() { 1.0 } else { (l * l / (c * c_hat)).min(1.0) })
}

/// Cell-problem quantities for a fast potential at diffusion `sigma`.
#[derive(Debug, Clone, Serialize)]
pub struct HomogenizationResult {
    #[serde(rename = "K")]
    pub k: f64,
    pub c_sigma: f64,
    pub c_hat_sigma: f64,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub sigma_eff: f64,
    #[serde(skip)]
    fast: FastPotential,
    #[serde(skip)]
    sigma: f64,
}

impl HomogenizationResult {
    /// Density of `mu`: `e^{-p(y)/sigma} / C_sigma`.
    pub fn mu_weight(&self, y: f64) -> f64 {
        (-self.fast.value(y) / self.sigma).exp() / self.c_sigma
    }

    /// `Phi'(y) = L e^{p(y)/sigma} / C_hat_sigma - 1`.
    pub fn eval_phi_prime(&self, y: f64) -> f64 {
        self.fast.period() * (self.fast.value(y) / self.sigma).exp() / self.c_hat_sigma - 1.0
    }

    /// `int (1 + Phi')^power dmu` over one period.
    pub fn k_by_integral(&self, n_quad: usize, power: i32) -> f64 {
        simpson(
            |y| (1.0 + self.eval_phi_prime(y)).powi(power) * self.mu_weight(y),
            0.0,
            self.fast.period(),
            n_quad,
        )
    }
}

pub fn cell_problem(
    p: &FastPotential,
    sigma: f64,
    n_quad: usize,
) -> Result<HomogenizationResult, QuadratureError> {
    let (c, c_hat) = compute_partition_constants(p, sigma, n_quad)?;
    let k = compute_k(p, sigma, n_quad)?;
    Ok(HomogenizationResult {
        k,
        c_sigma: c,
        c_hat_sigma: c_hat,
        a: Vec::new(),
        sigma_eff: k * sigma,
        fast: *p,
        sigma,
    })
}

/// `Phi'(y)` for a given fast potential, recomputing `C_hat_sigma`.
pub fn eval_phi_prime(p: &FastPotential, sigma: f64, y: f64) -> Result<f64, QuadratureError> {
    Ok(cell_problem(p, sigma, DEFAULT_N_QUAD)?.eval_phi_prime(y))
}

/// `dX = -A . V'(X) dt + sqrt(2 Sigma) dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedModel {
    a: Vec<f64>,
    sigma: f64,
    slow: SlowPotential,
}

impl HomogenizedModel {
    pub fn new(a: Vec<f64>, sigma: f64, slow: SlowPotential) -> Result<Self, crate::ModelError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(crate::ModelError::InvalidParameter(format!(
                "Sigma must be positive, got {sigma}"
            )));
        }
        if a.len() != slow.dim() {
            return Err(crate::ModelError::InvalidParameter(format!(
                "A has {} entries but V has {} components",
                a.len(),
                slow.dim()
            )));
        }
        Ok(Self { a, sigma, slow })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn slow(&self) -> &SlowPotential {
        &self.slow
    }

    #[inline]
    pub fn drift(&self, x: f64) -> f64 {
        -self.slow.dot_first(&self.a, x)
    }
}

/// `A = K alpha`, `Sigma = K sigma`.
pub fn homogenize_model(
    model: &MultiscaleModel,
    n_quad: usize,
) -> Result<(HomogenizedModel, HomogenizationResult), QuadratureError> {
    let mut res = cell_problem(model.fast(), model.sigma(), n_quad)?;
    res.a = model.alpha().iter().map(|a| res.k * a).collect();
    let hm = HomogenizedModel {
        a: res.a.clone(),
        sigma: res.sigma_eff,
        slow: model.slow().clone(),
    };
    Ok((hm, res))
}
