//! Eigenpairs of the generator `L_a u = -a . V' u' + Sigma u''`.
//!
//! The weighted variational problem on a truncated interval `[-R, R]` is
//! discretized with continuous P1 elements, giving the tridiagonal
//! generalized problem `S theta = lambda M theta` with
//! `S_ik = Sigma int psi_i' psi_k' rho`, `M_ik = int psi_i psi_k rho` and
//! `rho` the invariant density of the generator. All nodes are unknowns
//! (natural boundary conditions). Each eigenvector is normalized to
//! `theta^T M theta = 1` and signed so that its value at `+R` is positive.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::potentials::{Polynomial, SlowPotential};
use crate::simulate::ObservationSet;

pub const DEFAULT_H: f64 = 0.05;
pub const DEFAULT_R_FLOOR: f64 = 1.7;
pub const DEFAULT_PANELS_PER_ELEMENT: usize = 2;

/// Log-weights below this (relative to the maximum) are clamped so that the
/// mass matrix stays positive definite.
const LOG_WEIGHT_FLOOR: f64 = -700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mass matrix is not positive definite")]
    MassNotDefinite,
    #[error("only {found} eigenvalues above the zero threshold, {wanted} requested")]
    TooFewEigenvalues { found: usize, wanted: usize },
    #[error("eigenvalues {0} and {1} are not strictly increasing")]
    NotStrict(f64, f64),
    #[error("relative residual {residual:e} of eigenpair {j} exceeds tolerance")]
    Residual { j: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Uniform partition of `[-R, R]` into `n_elems` elements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mesh {
    #[serde(rename = "R")]
    pub r: f64,
    pub n_elems: usize,
    pub h: f64,
    #[serde(skip)]
    nodes: Vec<f64>,
}

impl Mesh {
    pub fn uniform(r: f64, n_elems: usize) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || n_elems == 0 {
            return Err(SpectralError::InvalidMesh(format!("R = {r}, N_h = {n_elems}")));
        }
        let h = 2.0 * r / n_elems as f64;
        let mut nodes: Vec<f64> = (0..=n_elems).map(|i| -r + i as f64 * h).collect();
        nodes[n_elems] = r;
        Ok(Self { r, n_elems, h, nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.n_elems + 1
    }

    /// Element index containing `x` (clamped) and the local coordinate in `[0, 1]`.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let t = (x + self.r) / self.h;
        let mut i = (t.floor().max(0.0) as usize).min(self.n_elems - 1);
        if i + 1 < self.n_elems && x >= self.nodes[i + 1] {
            i += 1;
        }
        let frac = ((x - self.nodes[i]) / self.h).clamp(0.0, 1.0);
        (i, frac)
    }
}

/// Truncation radius `R = max(R_bar + 0.1, R_floor)` with `R_bar` the largest
/// absolute observed value (of `X~` and `Z~`), and `N_h = ceil(2R / h_target)`.
pub fn build_mesh(observations: Option<&ObservationSet>, h_target: f64, r_floor: f64) -> Result<Mesh> {
    if !(h_target > 0.0) || !(r_floor > 0.0) {
        return Err(SpectralError::InvalidMesh(format!("h = {h_target}, R_floor = {r_floor}")));
    }
    let r_bar = match observations {
        Some(obs) => {
            if !obs.all_finite() {
                return Err(SpectralError::InvalidMesh("observations contain non-finite values".into()));
            }
            obs.max_abs()
        }
        None => 0.0,
    };
    let r = (r_bar + 0.1).max(r_floor);
    let n = (2.0 * r / h_target * (1.0 - 1e-12)).ceil() as usize;
    Mesh::uniform(r, n.max(1))
}

/// Tridiagonal stiffness and mass matrices for one parameter value.
#[derive(Debug, Clone)]
pub struct WeightedMatrices {
    pub mesh: Mesh,
    pub s_diag: Vec<f64>,
    pub s_off: Vec<f64>,
    pub m_diag: Vec<f64>,
    pub m_off: Vec<f64>,
    pub sigma: f64,
    a: Vec<f64>,
    log_shift: f64,
    mass: f64,
    combined: Polynomial,
}

impl WeightedMatrices {
    /// The invariant density used in assembly, normalized to unit mass on the mesh.
    pub fn weight(&self, x: f64) -> f64 {
        let lw = (-self.combined.eval(x) / self.sigma - self.log_shift).max(LOG_WEIGHT_FLOOR);
        lw.exp() / self.mass
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn dense_stiffness(&self) -> DMatrix<f64> {
        tridiag_dense(&self.s_diag, &self.s_off)
    }

    pub fn dense_mass(&self) -> DMatrix<f64> {
        tridiag_dense(&self.m_diag, &self.m_off)
    }

    /// Both matrices multiplied by `c > 0`; the generalized eigenvalues are unchanged.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut w = self.clone();
        for v in w.s_diag.iter_mut().chain(w.s_off.iter_mut()).chain(w.m_diag.iter_mut()).chain(w.m_off.iter_mut()) {
            *v *= c;
        }
        w.mass /= c;
        w
    }

    fn apply(diag: &[f64], off: &[f64], v: &[f64]) -> Vec<f64> {
        let n = diag.len();
        (0..n)
            .map(|i| {
                let mut s = diag[i] * v[i];
                if i > 0 {
                    s += off[i - 1] * v[i - 1];
                }
                if i + 1 < n {
                    s += off[i] * v[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn apply_stiffness(&self, v: &[f64]) -> Vec<f64> {
        Self::apply(&self.s_diag, &self.s_off, v)
    }

    pub fn apply_mass(&self, v: &[f64]) -> Vec<f64> {
        Self::apply(&self.m_diag, &self.m_off, v)
    }
}

fn tridiag_dense(diag: &[f64], off: &[f64]) -> DMatrix<f64> {
    let n = diag.len();
    DMatrix::from_fn(n, n, |i, k| {
        if i == k {
            diag[i]
        } else if i + 1 == k {
            off[i]
        } else if k + 1 == i {
            off[k]
        } else {
            0.0
        }
    })
}

fn simpson_weights(panels: usize) -> Vec<f64> {
    (0..=panels)
        .map(|k| {
            let w = if k == 0 || k == panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w / (3.0 * panels as f64)
        })
        .collect()
}

/// Elementwise P1 assembly with composite Simpson on `panels` subintervals
/// per element, for the density `e^{-a . V(x) / Sigma}`.
pub fn assemble(mesh: &Mesh, a: &[f64], sigma: f64, slow: &SlowPotential, panels: usize) -> Result<WeightedMatrices> {
    if a.len() != slow.dim() {
        return Err(SpectralError::InvalidRequest(format!(
            "parameter has {} entries, potential has {} components",
            a.len(),
            slow.dim()
        )));
    }
    if !(sigma > 0.0) {
        return Err(SpectralError::InvalidRequest(format!("Sigma must be positive, got {sigma}")));
    }
    if panels < 2 || !panels.is_multiple_of(2) {
        return Err(SpectralError::InvalidRequest(format!("Simpson panels per element must be even, got {panels}")));
    }
    let combined = slow.combined(a);
    let qw = simpson_weights(panels);
    let n = mesh.n_nodes();
    let local: Vec<f64> = (0..=panels).map(|k| k as f64 / panels as f64).collect();

    let mut log_w = Vec::with_capacity(mesh.n_elems * (panels + 1));
    for e in 0..mesh.n_elems {
        let x0 = mesh.nodes[e];
        for &t in &local {
            log_w.push(-combined.eval(x0 + t * mesh.h) / sigma);
        }
    }
    let log_shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !log_shift.is_finite() {
        return Err(SpectralError::InvalidRequest("weight is not finite on the mesh".into()));
    }

    let mut s_diag = vec![0.0; n];
    let mut s_off = vec![0.0; n - 1];
    let mut m_diag = vec![0.0; n];
    let mut m_off = vec![0.0; n - 1];
    let h = mesh.h;
    for e in 0..mesh.n_elems {
        let (mut i_w, mut i_ll, mut i_lr, mut i_rr) = (0.0, 0.0, 0.0, 0.0);
        for (k, &t) in local.iter().enumerate() {
            let w = (log_w[e * (panels + 1) + k] - log_shift).max(LOG_WEIGHT_FLOOR).exp() * qw[k];
            let (l, r) = (1.0 - t, t);
            i_w += w;
            i_ll += w * l * l;
            i_lr += w * l * r;
            i_rr += w * r * r;
        }
        // integrals over the element are h * (reference-element quadrature)
        let stiff = sigma * i_w / h;
        s_diag[e] += stiff;
        s_diag[e + 1] += stiff;
        s_off[e] -= stiff;
        m_diag[e] += h * i_ll;
        m_diag[e + 1] += h * i_rr;
        m_off[e] += h * i_lr;
    }
    let mass: f64 = m_diag.iter().sum::<f64>() + 2.0 * m_off.iter().sum::<f64>();
    for v in s_diag.iter_mut().chain(s_off.iter_mut()).chain(m_diag.iter_mut()).chain(m_off.iter_mut()) {
        *v /= mass;
    }
    Ok(WeightedMatrices {
        mesh: mesh.clone(),
        s_diag,
        s_off,
        m_diag,
        m_off,
        sigma,
        a: a.to_vec(),
        log_shift,
        mass,
        combined,
    })
}

/// Access to the first `J` nontrivial eigenpairs, indexed from 1.
pub trait EigenBasis {
    fn n_pairs(&self) -> usize;
    fn lambda(&self, j: usize) -> f64;
    fn eval(&self, j: usize, x: f64) -> f64;
}

/// First `J` nontrivial eigenpairs from the finite-element problem.
#[derive(Debug)]
pub struct SpectralBasis {
    pub mesh: Mesh,
    pub a: Vec<f64>,
    pub sigma: f64,
    lambdas: Vec<f64>,
    thetas: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    clamped: AtomicUsize,
}

impl Clone for SpectralBasis {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            a: self.a.clone(),
            sigma: self.sigma,
            lambdas: self.lambdas.clone(),
            thetas: self.thetas.clone(),
            residuals: self.residuals.clone(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl SpectralBasis {
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Nodal coefficients of eigenvector `j` (1-based).
    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j - 1]
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Number of evaluations that fell outside `[-R, R]` and were clamped.
    pub fn clamped_evaluations(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// P1 interpolant of eigenvector `j` at `x`; constant beyond `+-R`.
    pub fn eval_eigenfunction(&self, j: usize, x: f64) -> f64 {
        if x.abs() > self.mesh.r
            && self.clamped.fetch_add(1, Ordering::Relaxed) == 0 {
                log::warn!("eigenfunction evaluated at {x} outside [-{r}, {r}]; clamping", r = self.mesh.r);
            }
        let th = &self.thetas[j - 1];
        let (i, t) = self.mesh.locate(x);
        th[i] + t * (th[i + 1] - th[i])
    }
}

impl EigenBasis for SpectralBasis {
    fn n_pairs(&self) -> usize {
        self.lambdas.len()
    }

    fn lambda(&self, j: usize) -> f64 {
        self.lambdas[j - 1]
    }

    fn eval(&self, j: usize, x: f64) -> f64 {
        self.eval_eigenfunction(j, x)
    }
}

/// Relative residual tolerance for `||S theta - lambda M theta|| / ||M theta||`.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// The `J` smallest eigenpairs above `tau0 = 1e-8 * lambda_max`.
///
/// The problem is symmetrically scaled by `diag(M)^{-1/2}`, reduced to
/// standard form with the Cholesky factor of the scaled mass matrix and
/// solved densely.
pub fn solve_eigenpairs(w: &WeightedMatrices, j_count: usize) -> Result<SpectralBasis> {
    let n = w.mesh.n_nodes();
    if j_count == 0 || j_count + 1 > w.mesh.n_elems {
        return Err(SpectralError::InvalidRequest(format!(
            "need 1 <= J and J + 1 <= N_h, got J = {j_count}, N_h = {}",
            w.mesh.n_elems
        )));
    }
    if w.m_diag.iter().any(|&d| !(d > 0.0)) {
        return Err(SpectralError::MassNotDefinite);
    }
    let d: Vec<f64> = w.m_diag.iter().map(|m| 1.0 / m.sqrt()).collect();
    let scaled_off = |off: &[f64]| -> Vec<f64> { (0..n - 1).map(|i| off[i] * d[i] * d[i + 1]) .collect() };
    let s_diag: Vec<f64> = (0..n).map(|i| w.s_diag[i] * d[i] * d[i]).collect();
    let m_scaled = tridiag_dense(&vec![1.0; n], &scaled_off(&w.m_off));
    let s_scaled = tridiag_dense(&s_diag, &scaled_off(&w.s_off));

    let chol = m_scaled.cholesky().ok_or(SpectralError::MassNotDefinite)?;
    let l = chol.l();
    let x = l.solve_lower_triangular(&s_scaled).ok_or(SpectralError::MassNotDefinite)?;
    let b = l.solve_lower_triangular(&x.transpose()).ok_or(SpectralError::MassNotDefinite)?;
    let b = (&b + b.transpose()) * 0.5;
    let eig = SymmetricEigen::new(b);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &k| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[k]));
    let lambda_max = eig.eigenvalues[order[n - 1]].abs();
    let tau0 = 1e-8 * lambda_max;
    let selected: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > tau0).take(j_count).collect();
    if selected.len() < j_count {
        return Err(SpectralError::TooFewEigenvalues { found: selected.len(), wanted: j_count });
    }

    let lt = l.transpose();
    let mut lambdas = Vec::with_capacity(j_count);
    let mut thetas = Vec::with_capacity(j_count);
    let mut residuals = Vec::with_capacity(j_count);
    for (jj, &idx) in selected.iter().enumerate() {
        let lambda = eig.eigenvalues[idx];
        if let Some(&prev) = lambdas.last() {
            if !(lambda > prev) {
                return Err(SpectralError::NotStrict(prev, lambda));
            }
        }
        let y: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let t = lt.solve_upper_triangular(&y).ok_or(SpectralError::MassNotDefinite)?;
        let mut theta: Vec<f64> = t.iter().zip(&d).map(|(v, di)| v * di).collect();

        let m_theta = w.apply_mass(&theta);
        let norm = theta.iter().zip(&m_theta).map(|(a, b)| a * b).sum::<f64>().sqrt();
        let sign = if theta[n - 1] < 0.0 { -1.0 } else { 1.0 };
        theta.iter_mut().for_each(|v| *v *= sign / norm);

        let s_theta = w.apply_stiffness(&theta);
        let m_theta = w.apply_mass(&theta);
        let res = s_theta.iter().zip(&m_theta).map(|(s, m)| (s - lambda * m).powi(2)).sum::<f64>().sqrt();
        let mn = m_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = res / mn;
        if !(rel <= RESIDUAL_TOL) {
            return Err(SpectralError::Residual { j: jj + 1, residual: rel });
        }
        lambdas.push(lambda);
        thetas.push(theta);
        residuals.push(rel);
    }

    Ok(SpectralBasis {
        mesh: w.mesh.clone(),
        a: w.a.clone(),
        sigma: w.sigma,
        lambdas,
        thetas,
        residuals,
        clamped: AtomicUsize::new(0),
    })
}

/// Closed-form eigensystem of the Ornstein–Uhlenbeck generator
/// `-a x u' + Sigma u''`: `lambda_j = j a` and the monic polynomials
/// `phi_{j+1} = x phi_j - j (Sigma/a) phi_{j-1}`, `phi_0 = 1`, `phi_1 = x`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuEigensystem {
    pub a: f64,
    pub sigma: f64,
    polys: Vec<Polynomial>,
}

pub fn ou_eigen_analytic(a: f64, sigma: f64, j_count: usize) -> Result<OuEigensystem> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(SpectralError::InvalidRequest(format!("OU drift must be positive, got {a}")));
    }
    if !(sigma > 0.0) {
        return Err(SpectralError::InvalidRequest(format!("Sigma must be positive, got {sigma}")));
    }
    let ratio = sigma / a;
    let x = Polynomial::monomial(1, 1.0);
    let mut polys = vec![Polynomial::new(vec![1.0]), x.clone()];
    for j in 1..j_count.max(1) {
        let next = x.mul(&polys[j]).sub(&polys[j - 1].scale(j as f64 * ratio));
        polys.push(next);
    }
    polys.truncate(j_count.max(1) + 1);
    Ok(OuEigensystem { a, sigma, polys })
}

impl OuEigensystem {
    /// `phi_j` for `j = 0..=J`.
    pub fn phi(&self, j: usize) -> &Polynomial {
        &self.polys[j]
    }

    /// `E[phi_j(X)^2]` under the invariant law `N(0, Sigma/a)`: `j! (Sigma/a)^j`.
    pub fn norm_sq(&self, j: usize) -> f64 {
        (1..=j).map(|k| k as f64).product::<f64>() * (self.sigma / self.a).powi(j as i32)
    }
}

impl EigenBasis for OuEigensystem {
    fn n_pairs(&self) -> usize {
        self.polys.len() - 1
    }

    fn lambda(&self, j: usize) -> f64 {
        j as f64 * self.a
    }

    fn eval(&self, j: usize, x: f64) -> f64 {
        self.polys[j].eval(x)
    }
}
