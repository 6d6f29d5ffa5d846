//! Martingale estimating functions built from generator eigenpairs.
//!
//! For observations `X~_0..X~_N` at spacing `delta` the score is
//!
//! ```text
//! G(a) = (1/delta) sum_{n<N} sum_{j<=J} beta_j(W_n) (phi_j(X~_{n+1}; a) - e^{-lambda_j(a) delta} phi_j(X~_n; a))
//! ```
//!
//! with `W_n = X~_n` (unfiltered) or the filtered value `Z~_n`. The
//! estimator is a root of `G`, found by damped Newton on a
//! finite-difference Jacobian with a Nelder–Mead fallback on `|G|^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::potentials::{Polynomial, SlowPotential};
use crate::simulate::ObservationSet;
use crate::spectral::{
    self, assemble, build_mesh, ou_eigen_analytic, solve_eigenpairs, EigenBasis, Mesh, SpectralError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("estimator undefined for this sample: {0}")]
    Undefined(String),
    #[error("parameter {0:?} is outside the admissible set")]
    Domain(Vec<f64>),
    #[error("observations have {0} coordinates; a scalar series is required")]
    NotScalar(usize),
    #[error("filtered estimator requested but observations carry no filtered values")]
    MissingFilter,
    #[error("invalid beta family: {0}")]
    InvalidBeta(String),
    #[error("invalid estimator setting: {0}")]
    InvalidSetting(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type Result<T> = std::result::Result<T, EstimateError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaKind {
    Identity,
    Monomial(u32),
    Monomials(Vec<u32>),
    Custom,
}

/// Functions `beta_j: R -> R^m`, `j = 1..=J`, all polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaFamily {
    kind: BetaKind,
    funcs: Vec<Vec<Polynomial>>,
}

impl BetaFamily {
    /// The same vector-valued map for every `j`.
    pub fn repeated(kind: BetaKind, components: Vec<Polynomial>, j_count: usize) -> Result<Self> {
        if components.is_empty() || j_count == 0 {
            return Err(EstimateError::InvalidBeta("need at least one component and J >= 1".into()));
        }
        Ok(Self { kind, funcs: vec![components; j_count] })
    }

    pub fn identity(j_count: usize) -> Self {
        Self::repeated(BetaKind::Identity, vec![Polynomial::monomial(1, 1.0)], j_count).unwrap()
    }

    pub fn monomial(power: u32, j_count: usize) -> Self {
        Self::repeated(BetaKind::Monomial(power), vec![Polynomial::monomial(power as usize, 1.0)], j_count).unwrap()
    }

    pub fn monomials(powers: &[u32], j_count: usize) -> Result<Self> {
        let comps = powers.iter().map(|&p| Polynomial::monomial(p as usize, 1.0)).collect();
        Self::repeated(BetaKind::Monomials(powers.to_vec()), comps, j_count)
    }

    pub fn custom(funcs: Vec<Vec<Polynomial>>) -> Result<Self> {
        let m = funcs.first().map_or(0, Vec::len);
        if m == 0 || funcs.iter().any(|f| f.len() != m) {
            return Err(EstimateError::InvalidBeta("every beta_j needs the same number of components".into()));
        }
        Ok(Self { kind: BetaKind::Custom, funcs })
    }

    /// Parses `identity`, `mono:k`, `list:x^3,x` or `poly:[c0,..];poly:[..]`.
    pub fn parse(spec: &str, j_count: usize) -> Result<Self> {
        let spec = spec.trim();
        if spec == "identity" {
            return Ok(Self::identity(j_count));
        }
        if let Some(k) = spec.strip_prefix("mono:") {
            let k = k.trim().parse().map_err(|_| EstimateError::InvalidBeta(spec.into()))?;
            return Ok(Self::monomial(k, j_count));
        }
        if let Some(list) = spec.strip_prefix("list:") {
            let powers = list
                .trim_matches('"')
                .split(',')
                .map(|t| parse_monomial(t.trim()).ok_or_else(|| EstimateError::InvalidBeta(spec.into())))
                .collect::<Result<Vec<u32>>>()?;
            return Self::monomials(&powers, j_count);
        }
        if spec.starts_with("poly:") {
            let v: SlowPotential = spec.parse().map_err(|_| EstimateError::InvalidBeta(spec.into()))?;
            let comps = v.components().iter().map(|c| c.polynomial().clone()).collect();
            return Self::repeated(BetaKind::Custom, comps, j_count);
        }
        Err(EstimateError::InvalidBeta(spec.into()))
    }

    pub fn kind(&self) -> &BetaKind {
        &self.kind
    }

    pub fn j_count(&self) -> usize {
        self.funcs.len()
    }

    /// Output dimension `m`.
    pub fn dim(&self) -> usize {
        self.funcs[0].len()
    }

    /// Every `beta_j` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kind: BetaKind::Custom,
            funcs: self.funcs.iter().map(|f| f.iter().map(|p| p.scale(c)).collect()).collect(),
        }
    }

    /// `beta_j(z)` written into `out` (`j` is 1-based).
    #[inline]
    pub fn eval_into(&self, j: usize, z: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.funcs[j - 1]) {
            *o = p.eval(z);
        }
    }

    pub fn eval(&self, j: usize, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(j, z, &mut out);
        out
    }
}

fn parse_monomial(t: &str) -> Option<u32> {
    match t {
        "1" => Some(0),
        "x" | "z" => Some(1),
        _ => t.strip_prefix("x^").or_else(|| t.strip_prefix("z^")).and_then(|k| k.parse().ok()),
    }
}

/// `g_j(x, y, z; a) = beta_j(z) (phi_j(y) - e^{-lambda_j delta} phi_j(x))`.
pub fn score_g<B: EigenBasis + ?Sized>(
    x: f64,
    y: f64,
    z: f64,
    basis: &B,
    beta: &BetaFamily,
    j: usize,
    delta: f64,
) -> Vec<f64> {
    let bracket = basis.eval(j, y) - (-basis.lambda(j) * delta).exp() * basis.eval(j, x);
    beta.eval(j, z).into_iter().map(|b| b * bracket).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMode {
    /// Analytic OU eigensystem for the scalar quadratic potential, FEM otherwise.
    #[default]
    Auto,
    Fem,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FemSettings {
    pub h: f64,
    pub r_floor: f64,
    pub panels_per_element: usize,
}

impl Default for FemSettings {
    fn default() -> Self {
        Self {
            h: spectral::DEFAULT_H,
            r_floor: spectral::DEFAULT_R_FLOOR,
            panels_per_element: spectral::DEFAULT_PANELS_PER_ELEMENT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreSettings {
    pub slow: SlowPotential,
    /// Known effective diffusion coefficient.
    pub sigma: f64,
    pub beta: BetaFamily,
    pub use_filter: bool,
    pub basis: BasisMode,
    pub fem: FemSettings,
}

impl ScoreSettings {
    pub fn new(slow: SlowPotential, sigma: f64, beta: BetaFamily) -> Self {
        Self { slow, sigma, beta, use_filter: false, basis: BasisMode::Auto, fem: FemSettings::default() }
    }

    pub fn filtered(mut self, on: bool) -> Self {
        self.use_filter = on;
        self
    }

    pub fn basis(mut self, mode: BasisMode) -> Self {
        self.basis = mode;
        self
    }

    pub fn fem(mut self, fem: FemSettings) -> Self {
        self.fem = fem;
        self
    }
}

/// Observations, eigen-basis settings and precomputed `beta_j(W_n)` for
/// repeated score evaluation. The mesh is built once from the data.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    x: Vec<f64>,
    delta: f64,
    settings: ScoreSettings,
    mesh: Mesh,
    /// `beta_vals[((j-1) * N + n) * m + k]`
    beta_vals: Vec<f64>,
}

/// Eigenpairs at one parameter value, from either route.
pub enum Basis {
    Fem(spectral::SpectralBasis),
    Analytic(spectral::OuEigensystem),
}

impl EigenBasis for Basis {
    fn n_pairs(&self) -> usize {
        match self {
            Basis::Fem(b) => b.n_pairs(),
            Basis::Analytic(b) => b.n_pairs(),
        }
    }

    fn lambda(&self, j: usize) -> f64 {
        match self {
            Basis::Fem(b) => b.lambda(j),
            Basis::Analytic(b) => b.lambda(j),
        }
    }

    fn eval(&self, j: usize, x: f64) -> f64 {
        match self {
            Basis::Fem(b) => b.eval(j, x),
            Basis::Analytic(b) => b.eval(j, x),
        }
    }
}

impl ScoreContext {
    pub fn new(obs: &ObservationSet, settings: ScoreSettings) -> Result<Self> {
        if obs.dim() != 1 {
            return Err(EstimateError::NotScalar(obs.dim()));
        }
        if obs.n_intervals() == 0 {
            return Err(EstimateError::InvalidSetting("need at least two observations".into()));
        }
        if !(settings.sigma > 0.0) {
            return Err(EstimateError::InvalidSetting(format!("Sigma must be positive, got {}", settings.sigma)));
        }
        let m = settings.slow.dim();
        if settings.beta.dim() != m {
            return Err(EstimateError::InvalidBeta(format!(
                "beta has {} components but the drift has {m}",
                settings.beta.dim()
            )));
        }
        if settings.basis == BasisMode::Analytic && !settings.slow.is_quadratic_scalar() {
            return Err(EstimateError::InvalidSetting("analytic basis needs V = x^2/2".into()));
        }
        let weights_src: &[f64] = if settings.use_filter {
            obs.z().ok_or(EstimateError::MissingFilter)?
        } else {
            obs.x()
        };
        let mesh = build_mesh(Some(obs), settings.fem.h, settings.fem.r_floor)?;
        let n = obs.n_intervals();
        let j_count = settings.beta.j_count();
        let mut beta_vals = vec![0.0; j_count * n * m];
        for j in 1..=j_count {
            for (i, &w) in weights_src[..n].iter().enumerate() {
                let off = ((j - 1) * n + i) * m;
                settings.beta.eval_into(j, w, &mut beta_vals[off..off + m]);
            }
        }
        Ok(Self { x: obs.x().to_vec(), delta: obs.delta(), settings, mesh, beta_vals })
    }

    pub fn settings(&self) -> &ScoreSettings {
        &self.settings
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn j_count(&self) -> usize {
        self.settings.beta.j_count()
    }

    pub fn dim(&self) -> usize {
        self.settings.slow.dim()
    }

    pub fn n_intervals(&self) -> usize {
        self.x.len() - 1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn uses_analytic_basis(&self) -> bool {
        match self.settings.basis {
            BasisMode::Analytic => true,
            BasisMode::Fem => false,
            BasisMode::Auto => self.settings.slow.is_quadratic_scalar(),
        }
    }

    pub fn is_admissible(&self, a: &[f64]) -> bool {
        self.settings.slow.is_confining(a)
    }

    /// Eigenpairs at `a` on the context's mesh.
    pub fn basis_at(&self, a: &[f64]) -> Result<Basis> {
        if !self.is_admissible(a) {
            return Err(EstimateError::Domain(a.to_vec()));
        }
        let j = self.j_count();
        if self.uses_analytic_basis() {
            return Ok(Basis::Analytic(ou_eigen_analytic(a[0], self.settings.sigma, j)?));
        }
        let fem = &self.settings.fem;
        let w = assemble(&self.mesh, a, self.settings.sigma, &self.settings.slow, fem.panels_per_element)?;
        Ok(Basis::Fem(solve_eigenpairs(&w, j)?))
    }

    /// The score vector `G(a)`.
    pub fn score(&self, a: &[f64]) -> Result<Vec<f64>> {
        let basis = self.basis_at(a)?;
        Ok(self.score_with(&basis))
    }

    pub fn score_with<B: EigenBasis + ?Sized>(&self, basis: &B) -> Vec<f64> {
        let m = self.dim();
        let n = self.n_intervals();
        let mut g = vec![0.0; m];
        let mut phi = vec![0.0; n + 1];
        for j in 1..=self.j_count() {
            let q = (-basis.lambda(j) * self.delta).exp();
            for (p, &x) in phi.iter_mut().zip(&self.x) {
                *p = basis.eval(j, x);
            }
            let base = (j - 1) * n * m;
            for i in 0..n {
                let bracket = phi[i + 1] - q * phi[i];
                let b = &self.beta_vals[base + i * m..base + (i + 1) * m];
                for k in 0..m {
                    g[k] += b[k] * bracket;
                }
            }
        }
        g.iter_mut().for_each(|v| *v /= self.delta);
        g
    }

    /// `|G(a)| / N`.
    pub fn score_norm(&self, a: &[f64]) -> Result<f64> {
        Ok(norm(&self.score(a)?) / self.n_intervals() as f64)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn score_big_g(ctx: &ScoreContext, a: &[f64]) -> Result<Vec<f64>> {
    ctx.score(a)
}

/// Central-difference Jacobian, `jac[r][c] = dG_r / da_c`, step
/// `rel_step * max(|a_c|, 1)`.
pub fn jacobian_fd(ctx: &ScoreContext, a: &[f64], rel_step: f64) -> Result<Vec<Vec<f64>>> {
    let m = a.len();
    let mut jac = vec![vec![0.0; m]; m];
    for c in 0..m {
        let s = rel_step * a[c].abs().max(1.0);
        let mut ap = a.to_vec();
        let mut am = a.to_vec();
        ap[c] += s;
        am[c] -= s;
        let gp = ctx.score(&ap)?;
        let gm = ctx.score(&am)?;
        for r in 0..m {
            jac[r][c] = (gp[r] - gm[r]) / (2.0 * s);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    Newton,
    Minimization,
    MultiStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub a_hat: Vec<f64>,
    /// `|G(a_hat)| / N`
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_at_solution: Vec<f64>,
    pub path: SolverPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Tolerance on `|G| / N`.
    pub tol_score: f64,
    pub max_iter: usize,
    pub rel_step: f64,
    pub multi_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol_score: 1e-8, max_iter: 100, rel_step: 1e-5, multi_start: true }
    }
}

struct Iterate {
    a: Vec<f64>,
    g: Vec<f64>,
    gn: f64,
}

enum NewtonOutcome {
    Converged(Iterate, usize),
    Stalled(Iterate, usize),
}

fn newton(ctx: &ScoreContext, a0: &[f64], opts: &SolverOptions) -> Result<NewtonOutcome> {
    let n = ctx.n_intervals() as f64;
    let g = ctx.score(a0)?;
    let mut cur = Iterate { a: a0.to_vec(), gn: norm(&g) / n, g };
    let m = a0.len();
    for it in 1..=opts.max_iter {
        let jac = jacobian_fd(ctx, &cur.a, opts.rel_step);
        let Ok(jac) = jac else { return Ok(NewtonOutcome::Stalled(cur, it)) };
        let jm = DMatrix::from_fn(m, m, |r, c| jac[r][c]);
        let rhs = DVector::from_iterator(m, cur.g.iter().map(|v| -v));
        let step = match jm.lu().solve(&rhs) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => return Ok(NewtonOutcome::Stalled(cur, it)),
        };
        let mut t = 1.0;
        let mut next = None;
        while t >= 1.0 / 1024.0 {
            let cand: Vec<f64> = cur.a.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if ctx.is_admissible(&cand) {
                if let Ok(g) = ctx.score(&cand) {
                    let gn = norm(&g) / n;
                    if gn < cur.gn {
                        next = Some((Iterate { a: cand, g, gn }, t));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((nxt, t)) = next else {
            return Ok(if cur.gn <= opts.tol_score {
                NewtonOutcome::Converged(cur, it)
            } else {
                NewtonOutcome::Stalled(cur, it)
            });
        };
        let step_len = t * step.norm();
        cur = nxt;
        if cur.gn <= opts.tol_score && step_len <= 1e-10 * (1.0 + norm(&cur.a)) {
            return Ok(NewtonOutcome::Converged(cur, it));
        }
        if cur.gn == 0.0 {
            return Ok(NewtonOutcome::Converged(cur, it));
        }
    }
    Ok(if cur.gn <= opts.tol_score {
        NewtonOutcome::Converged(cur, opts.max_iter)
    } else {
        NewtonOutcome::Stalled(cur, opts.max_iter)
    })
}

/// Nelder–Mead on `|G(a)|^2 / N^2`; inadmissible or failing points score +inf.
fn minimize(ctx: &ScoreContext, a0: &[f64], max_evals: usize) -> (Vec<f64>, usize) {
    let m = a0.len();
    let f = |a: &[f64]| -> f64 {
        match ctx.score_norm(a) {
            Ok(v) if v.is_finite() => v * v,
            _ => f64::INFINITY,
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m + 1);
    simplex.push((a0.to_vec(), f(a0)));
    for k in 0..m {
        let mut p = a0.to_vec();
        p[k] += 0.1 * a0[k].abs().max(0.5);
        let v = f(&p);
        simplex.push((p, v));
    }
    let mut evals = m + 1;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[m].1;
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < 1e-12 || (worst.is_finite() && worst - best <= 1e-30) {
            break;
        }
        let centroid: Vec<f64> =
            (0..m).map(|k| simplex[..m].iter().map(|(p, _)| p[k]).sum::<f64>() / m as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..m).map(|k| centroid[k] + t * (simplex[m].0[k] - centroid[k])).collect() };
        let refl = along(-1.0);
        let fr = f(&refl);
        evals += 1;
        if fr < best {
            let exp = along(-2.0);
            let fe = f(&exp);
            evals += 1;
            simplex[m] = if fe < fr { (exp, fe) } else { (refl, fr) };
        } else if fr < simplex[m - 1].1 {
            simplex[m] = (refl, fr);
        } else {
            let con = if fr < worst { along(-0.5) } else { along(0.5) };
            let fc = f(&con);
            evals += 1;
            if fc < worst.min(fr) {
                simplex[m] = (con, fc);
            } else {
                let b = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = s.0.iter().zip(&b).map(|(x, y)| y + 0.5 * (x - y)).collect();
                    *s = (p.clone(), f(&p));
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex.swap_remove(0).0, evals)
}

fn finish(ctx: &ScoreContext, a: Vec<f64>, iterations: usize, path: SolverPath, tol: f64) -> Result<EstimatorResult> {
    let basis = ctx.basis_at(&a)?;
    let score_norm = norm(&ctx.score_with(&basis)) / ctx.n_intervals() as f64;
    let lambda_at_solution = (1..=ctx.j_count()).map(|j| basis.lambda(j)).collect();
    Ok(EstimatorResult { a_hat: a, score_norm, iterations, converged: score_norm <= tol, lambda_at_solution, path })
}

fn single_start(ctx: &ScoreContext, a0: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, f64, usize, SolverPath)> {
    let (it, iters) = match newton(ctx, a0, opts)? {
        NewtonOutcome::Converged(it, k) => return Ok((it.a, it.gn, k, SolverPath::Newton)),
        NewtonOutcome::Stalled(it, k) => (it, k),
    };
    let (a_min, evals) = minimize(ctx, &it.a, 200 * (1 + a0.len()));
    let mut total = iters + evals;
    // polish the minimizer with Newton so a root is located to full precision
    let (a, gn) = match newton(ctx, &a_min, opts) {
        Ok(NewtonOutcome::Converged(p, k)) | Ok(NewtonOutcome::Stalled(p, k)) => {
            total += k;
            (p.a, p.gn)
        }
        Err(_) => {
            let gn = ctx.score_norm(&a_min).unwrap_or(f64::INFINITY);
            (a_min, gn)
        }
    };
    let (a, gn) = if gn <= it.gn { (a, gn) } else { (it.a, it.gn) };
    Ok((a, gn, total, SolverPath::Minimization))
}

/// Root of the score starting from `a0`.
///
/// A result with `converged == false` carries the best iterate found.
pub fn solve_estimator(ctx: &ScoreContext, a0: &[f64], opts: &SolverOptions) -> Result<EstimatorResult> {
    if a0.len() != ctx.dim() {
        return Err(EstimateError::InvalidSetting(format!(
            "start has {} entries, drift has {}",
            a0.len(),
            ctx.dim()
        )));
    }
    if !ctx.is_admissible(a0) {
        return Err(EstimateError::Domain(a0.to_vec()));
    }
    let (mut a, mut gn, mut iters, mut path) = single_start(ctx, a0, opts)?;
    if gn > opts.tol_score && opts.multi_start {
        for factor in [0.5, 2.0, 1.5] {
            let start: Vec<f64> = a0.iter().map(|v| v * factor).collect();
            if !ctx.is_admissible(&start) {
                continue;
            }
            if let Ok((a2, gn2, it2, _)) = single_start(ctx, &start, opts) {
                iters += it2;
                if gn2 < gn {
                    a = a2;
                    gn = gn2;
                    path = SolverPath::MultiStart;
                }
            }
            if gn <= opts.tol_score {
                break;
            }
        }
    }
    finish(ctx, a, iters, path, opts.tol_score)
}

fn scalar_series(obs: &ObservationSet) -> Result<&[f64]> {
    if obs.dim() != 1 {
        return Err(EstimateError::NotScalar(obs.dim()));
    }
    if obs.n_intervals() == 0 {
        return Err(EstimateError::Undefined("need at least two observations".into()));
    }
    Ok(obs.x())
}

fn log_ratio_estimate(num: f64, den: f64, delta: f64) -> Result<f64> {
    if !(den != 0.0 && den.is_finite()) {
        return Err(EstimateError::Undefined("zero denominator".into()));
    }
    let r = num / den;
    if !(r > 0.0 && r.is_finite()) {
        return Err(EstimateError::Undefined(format!("log argument {r} is not positive")));
    }
    Ok(-r.ln() / delta)
}

/// `-(1/delta) log(sum X_n X_{n+1} / sum X_n^2)`.
pub fn ou_closed_form_hat(obs: &ObservationSet) -> Result<f64> {
    let x = scalar_series(obs)?;
    let num: f64 = x.windows(2).map(|w| w[0] * w[1]).sum();
    let den: f64 = x[..x.len() - 1].iter().map(|v| v * v).sum();
    log_ratio_estimate(num, den, obs.delta())
}

/// `-(1/delta) log(sum Z_n X_{n+1} / sum Z_n X_n)`.
pub fn ou_closed_form_tilde(obs: &ObservationSet) -> Result<f64> {
    let x = scalar_series(obs)?;
    let z = obs.z().ok_or(EstimateError::MissingFilter)?;
    let n = x.len() - 1;
    let num: f64 = (0..n).map(|i| z[i] * x[i + 1]).sum();
    let den: f64 = (0..n).map(|i| z[i] * x[i]).sum();
    log_ratio_estimate(num, den, obs.delta())
}

fn mle(weights: &[f64], x: &[f64], delta: f64) -> Result<f64> {
    let n = x.len() - 1;
    let num: f64 = (0..n).map(|i| weights[i] * (x[i + 1] - x[i])).sum();
    let den: f64 = (0..n).map(|i| weights[i] * x[i]).sum();
    if !(den != 0.0 && den.is_finite()) {
        return Err(EstimateError::Undefined("zero denominator".into()));
    }
    Ok(-num / (delta * den))
}

/// Discrete MLE `-sum X_n (X_{n+1} - X_n) / (delta sum X_n^2)`.
pub fn mle_hat(obs: &ObservationSet) -> Result<f64> {
    let x = scalar_series(obs)?;
    mle(x, x, obs.delta())
}

/// Discrete MLE with filtered weights `Z_n`.
pub fn mle_tilde(obs: &ObservationSet) -> Result<f64> {
    let x = scalar_series(obs)?;
    let z = obs.z().ok_or(EstimateError::MissingFilter)?;
    mle(z, x, obs.delta())
}

/// OU closed forms applied to the coordinate sum `S_n = sum_i X_i`, whose
/// homogenized dynamics has eigenpair `(A, sum_i x_i)`.
pub fn particles_closed_form(obs: &ObservationSet, filtered: bool) -> Result<f64> {
    if obs.dim() < 2 {
        return Err(EstimateError::InvalidSetting("particle estimator needs d >= 2".into()));
    }
    let s = obs.coordinate_sum();
    if filtered {
        ou_closed_form_tilde(&s)
    } else {
        ou_closed_form_hat(&s)
    }
}
