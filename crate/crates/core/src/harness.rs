//! Config-driven replication runner.
//!
//! A configuration expands into simulation points (particle count `d` and
//! spacing `delta`) crossed with estimation keys (`J`, number of
//! observations, estimator). Each `(simulation point, replication)` pair
//! draws one path from `derive_seed(master_seed, [point, replication])`, so
//! every estimation key at that point sees the same data. Work is spread
//! over a rayon pool and merged in job order, which makes the output
//! independent of the worker count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimate::{
    mle_hat, mle_tilde, ou_closed_form_hat, ou_closed_form_tilde, particles_closed_form, solve_estimator, BasisMode,
    BetaFamily, FemSettings, ScoreContext, ScoreSettings, SolverOptions,
};
use crate::homogenize::{homogenize_model, HomogenizedModel, DEFAULT_N_QUAD};
use crate::io::{write_atomic, IoError};
use crate::potentials::{FastPotential, MultiscaleModel, SlowPotential};
use crate::simulate::{
    commensurate_step, derive_seed, simulate_homogenized_observed, simulate_multiscale_observed,
    simulate_particles_observed, ObservationSet, ParticleModel, SimSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Files(#[from] IoError),
    #[error("config hash mismatch: file has {found}, expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("stored aggregates disagree with per-replication values")]
    AggregateMismatch,
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Multiscale,
    Homogenized,
    Particles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Slow drift coefficient; for `homogenized` this is `A` itself.
    pub alpha: Vec<f64>,
    /// Diffusion coefficient; for `homogenized` this is `Sigma` itself.
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_slow")]
    pub slow: String,
    #[serde(default = "default_fast")]
    pub fast: String,
    #[serde(default)]
    pub period: Option<f64>,
    /// Mean-field strength (particles only).
    #[serde(default)]
    pub theta: f64,
    /// Particle counts swept (particles only).
    #[serde(default = "default_d")]
    pub d: Vec<usize>,
    #[serde(default)]
    pub x0: f64,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_slow() -> String {
    "quadratic".into()
}
fn default_fast() -> String {
    "cos".into()
}
fn default_d() -> Vec<usize> {
    vec![2]
}

/// Observation spacings: `delta` itself, `epsilon^zeta`, or `2^zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpec {
    Absolute(Vec<f64>),
    Zeta(Vec<f64>),
    Dyadic(Vec<f64>),
}

impl DeltaSpec {
    fn values(&self) -> &[f64] {
        match self {
            DeltaSpec::Absolute(v) | DeltaSpec::Zeta(v) | DeltaSpec::Dyadic(v) => v,
        }
    }

    /// `(delta, zeta)` per grid entry.
    pub fn resolve(&self, epsilon: f64) -> Vec<(f64, Option<f64>)> {
        match self {
            DeltaSpec::Absolute(v) => v.iter().map(|&d| (d, None)).collect(),
            DeltaSpec::Zeta(v) => v.iter().map(|&z| (epsilon.powf(z), Some(z))).collect(),
            DeltaSpec::Dyadic(v) => v.iter().map(|&z| (2f64.powf(z), Some(z))).collect(),
        }
    }
}

/// Fine-step ceiling before it is made commensurate with `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    EpsilonCubed,
    /// `min(epsilon^3, delta / 100)`
    MinDeltaOver100,
}

/// Numbers of observations at which estimators are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NObsSpec {
    /// All available, `floor(T / delta)`.
    #[default]
    Full,
    /// Powers of two up to the available count, plus the count itself.
    Dyadic,
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub delta: DeltaSpec,
    /// Explicit fine-step ceiling, overriding `step_rule`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub n_obs: NObsSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Hat,
    Tilde,
    MleHat,
    MleTilde,
    /// Expands to both closed forms.
    ClosedForm,
    ClosedFormHat,
    ClosedFormTilde,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Hat => "hat",
            EstimatorKind::Tilde => "tilde",
            EstimatorKind::MleHat => "mle_hat",
            EstimatorKind::MleTilde => "mle_tilde",
            EstimatorKind::ClosedForm => "closed_form",
            EstimatorKind::ClosedFormHat => "closed_form_hat",
            EstimatorKind::ClosedFormTilde => "closed_form_tilde",
        }
    }

    fn filtered(self) -> bool {
        matches!(self, EstimatorKind::Tilde | EstimatorKind::MleTilde | EstimatorKind::ClosedFormTilde)
    }

    fn uses_j(self) -> bool {
        matches!(self, EstimatorKind::Hat | EstimatorKind::Tilde)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    #[serde(rename = "J", default = "default_j")]
    pub j: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: String,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub basis: BasisMode,
    #[serde(default)]
    pub a0: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol_score: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub fem: FemSettings,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
}

fn default_j() -> Vec<usize> {
    vec![1]
}
fn default_beta() -> String {
    "identity".into()
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    100
}
fn default_n_quad() -> usize {
    DEFAULT_N_QUAD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub stem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    /// Desk-scale time horizon.
    #[serde(rename = "T")]
    pub t: f64,
    /// Horizon used when running at full scale; defaults to `T`.
    #[serde(rename = "T_full", default)]
    pub t_full: Option<f64>,
    pub sampling: SamplingConfig,
    pub estimation: EstimationConfig,
    #[serde(default = "default_n_rep")]
    pub n_rep: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_n_rep() -> usize {
    15
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn slow(&self) -> Result<SlowPotential> {
        self.model.slow.parse().map_err(|e| HarnessError::Config(format!("{e}")))
    }

    pub fn fast(&self) -> Result<FastPotential> {
        let mut fast: FastPotential = self.model.fast.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
        if let Some(period) = self.model.period {
            fast = FastPotential::new(fast.kind(), Some(period)).map_err(|e| HarnessError::Config(format!("{e}")))?;
        }
        Ok(fast)
    }

    /// Estimators with `closed_form` expanded, deduplicated, in config order.
    pub fn estimators(&self) -> Vec<EstimatorKind> {
        let mut out = Vec::new();
        for &e in &self.estimation.estimators {
            let expanded: &[EstimatorKind] = match e {
                EstimatorKind::ClosedForm => &[EstimatorKind::ClosedFormHat, EstimatorKind::ClosedFormTilde],
                _ => std::slice::from_ref(&e),
            };
            for &k in expanded {
                if !out.contains(&k) {
                    out.push(k);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_rep == 0 {
            return bad("n_rep must be at least 1".into());
        }
        if !(self.t > 0.0) {
            return bad(format!("T must be positive, got {}", self.t));
        }
        if self.sampling.delta.values().is_empty() {
            return bad("delta sweep list is empty".into());
        }
        if self.estimation.j.is_empty() {
            return bad("J sweep list is empty".into());
        }
        if self.estimation.j.contains(&0) {
            return bad("J must be at least 1".into());
        }
        if self.estimation.estimators.is_empty() {
            return bad("no estimators requested".into());
        }
        if let NObsSpec::List(v) = &self.sampling.n_obs {
            if v.is_empty() || v.contains(&0) {
                return bad("n_obs list must be nonempty and positive".into());
            }
        }
        let slow = self.slow()?;
        self.fast()?;
        if self.model.alpha.len() != slow.dim() {
            return bad(format!("alpha has {} entries, potential '{}' has {}", self.model.alpha.len(), slow, slow.dim()));
        }
        if !(self.model.sigma > 0.0) || !(self.model.epsilon > 0.0) {
            return bad("sigma and epsilon must be positive".into());
        }
        let particles = self.model.kind == ModelKind::Particles;
        if particles {
            if !slow.is_quadratic_scalar() {
                return bad("particle runs use V = x^2/2".into());
            }
            if self.model.d.is_empty() || self.model.d.iter().any(|&d| d < 2) {
                return bad("particle counts must be >= 2".into());
            }
        }
        for e in self.estimators() {
            let ok = match e {
                EstimatorKind::ClosedFormHat | EstimatorKind::ClosedFormTilde => particles || slow.is_quadratic_scalar(),
                EstimatorKind::MleHat | EstimatorKind::MleTilde => !particles && slow.is_quadratic_scalar(),
                EstimatorKind::Hat | EstimatorKind::Tilde => !particles,
                EstimatorKind::ClosedForm => unreachable!(),
            };
            if !ok {
                return bad(format!("estimator {} does not apply to this model", e.name()));
            }
        }
        if self.estimators().iter().any(|e| e.uses_j()) {
            BetaFamily::parse(&self.estimation.beta, 1).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(a0) = &self.estimation.a0 {
            if a0.len() != slow.dim() {
                return bad("a0 length differs from alpha".into());
            }
        }
        Ok(())
    }

    fn fine_step_ceiling(&self, delta: f64) -> f64 {
        let eps3 = self.model.epsilon.powi(3);
        self.sampling.h.unwrap_or(match self.sampling.step_rule {
            StepRule::EpsilonCubed => eps3,
            StepRule::MinDeltaOver100 => eps3.min(delta / 100.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker count; `None` uses the rayon default.
    pub threads: Option<usize>,
    /// Use `T_full` instead of `T`.
    pub full_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridKey {
    pub d: Option<usize>,
    pub delta: f64,
    pub zeta: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub n_obs: usize,
    pub estimator: EstimatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub key: usize,
    pub rep: usize,
    pub seed: u64,
    /// Fine step actually used by the simulation.
    pub h: f64,
    pub estimate: Option<Vec<f64>>,
    /// `|A - a_hat|_2`
    pub error: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub key: GridKey,
    pub n_ok: usize,
    pub n_fail: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (zero with fewer than two successes).
    pub std: Vec<f64>,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    /// `|A - mean(a_hat)|_2`, the error of the replication-averaged estimate.
    pub error_of_mean: Option<f64>,
    /// More than half of the replications failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub full_scale: bool,
    /// Effective coefficient `K` (1 for homogenized runs).
    pub k: f64,
    /// Homogenized drift coefficient `A`.
    pub truth: Vec<f64>,
    /// Known effective diffusion `Sigma` passed to the estimators.
    pub sigma_eff: f64,
    pub keys: Vec<GridKey>,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<GridSummary>,
}

impl ExperimentResult {
    pub fn any_flagged(&self) -> bool {
        self.summaries.iter().any(|s| s.flagged)
    }

    pub fn summary(&self, pred: impl Fn(&GridKey) -> bool) -> Option<&GridSummary> {
        self.summaries.iter().find(|s| pred(&s.key))
    }

    /// Successful estimates for one grid key, in replication order.
    pub fn estimates(&self, key: usize) -> Vec<Vec<f64>> {
        self.records.iter().filter(|r| r.key == key).filter_map(|r| r.estimate.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per grid key and drift component.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={}\n# code_version={}\n", self.config_hash, self.code_version);
        s.push_str("d,delta,zeta,J,n_obs,estimator,component,truth,mean,std,mean_error,median_error,error_of_mean,n_ok,n_fail,flagged\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for g in &self.summaries {
            let k = &g.key;
            for c in 0..self.truth.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    k.d.map_or(String::new(), |d| d.to_string()),
                    k.delta,
                    opt(k.zeta),
                    k.j.map_or(String::new(), |j| j.to_string()),
                    k.n_obs,
                    k.estimator.name(),
                    c,
                    self.truth[c],
                    g.mean.get(c).map_or(String::new(), f64::to_string),
                    g.std.get(c).map_or(String::new(), f64::to_string),
                    opt(g.mean_error),
                    opt(g.median_error),
                    opt(g.error_of_mean),
                    g.n_ok,
                    g.n_fail,
                    g.flagged
                );
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`, each atomically.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        write_atomic(&json, self.to_json()?.as_bytes())?;
        write_atomic(&csv, self.to_csv().as_bytes())?;
        Ok((json, csv))
    }
}

/// Loads a JSON result, checking its config hash and recomputing every
/// aggregate from the stored replications.
pub fn load_result(path: &Path, expected: Option<&ExperimentConfig>) -> Result<ExperimentResult> {
    let res: ExperimentResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let own = res.config.hash();
    if own != res.config_hash {
        return Err(HarnessError::HashMismatch { found: res.config_hash.clone(), expected: own });
    }
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != res.config_hash {
            return Err(HarnessError::HashMismatch { found: res.config_hash, expected: want });
        }
    }
    let again = summarize(&res.keys, &res.records, &res.truth, res.config.n_rep);
    if again != res.summaries {
        return Err(HarnessError::AggregateMismatch);
    }
    Ok(res)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn summarize(keys: &[GridKey], records: &[ReplicationRecord], truth: &[f64], n_rep: usize) -> Vec<GridSummary> {
    keys.iter()
        .enumerate()
        .map(|(i, key)| {
            let recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.key == i).collect();
            let ok: Vec<&Vec<f64>> = recs.iter().filter_map(|r| r.estimate.as_ref()).collect();
            let n_fail = recs.len() - ok.len();
            let m = ok.first().map_or(0, |v| v.len());
            let mean: Vec<f64> = (0..m).map(|c| ok.iter().map(|v| v[c]).sum::<f64>() / ok.len() as f64).collect();
            let std = (0..m)
                .map(|c| {
                    if ok.len() < 2 {
                        0.0
                    } else {
                        let ss: f64 = ok.iter().map(|v| (v[c] - mean[c]).powi(2)).sum();
                        (ss / (ok.len() - 1) as f64).sqrt()
                    }
                })
                .collect();
            let mut errs: Vec<f64> = recs.iter().filter_map(|r| r.error).collect();
            let mean_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
            let median_error = median(&mut errs);
            let error_of_mean = (!ok.is_empty()).then(|| euclid(&mean, truth));
            GridSummary {
                key: key.clone(),
                n_ok: ok.len(),
                n_fail,
                mean,
                std,
                mean_error,
                median_error,
                error_of_mean,
                flagged: 2 * n_fail > n_rep,
            }
        })
        .collect()
}

/// Simulation point: particle count and spacing.
#[derive(Debug, Clone, Copy)]
struct SimPoint {
    d: Option<usize>,
    delta: f64,
    zeta: Option<f64>,
    h: f64,
}

/// Resolved model shared by all jobs.
struct Plan {
    kind: ModelKind,
    multiscale: Option<MultiscaleModel>,
    homogenized: HomogenizedModel,
    particle: Option<ParticleModel>,
    slow: SlowPotential,
    t_end: f64,
    x0: f64,
}

fn n_obs_grid(spec: &NObsSpec, available: usize) -> Result<Vec<usize>> {
    Ok(match spec {
        NObsSpec::Full => vec![available],
        NObsSpec::Dyadic => {
            let mut v: Vec<usize> = (0..usize::BITS).map(|k| 1usize << k).take_while(|&n| n < available).collect();
            v.push(available);
            v
        }
        NObsSpec::List(v) => {
            if let Some(&n) = v.iter().find(|&&n| n > available) {
                return Err(HarnessError::Config(format!("n_obs {n} exceeds the {available} available observations")));
            }
            v.clone()
        }
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn build_plan(cfg: &ExperimentConfig, full_scale: bool) -> Result<(Plan, f64)> {
    let slow = cfg.slow()?;
    let fast = cfg.fast()?;
    let m = &cfg.model;
    let t_end = if full_scale { cfg.t_full.unwrap_or(cfg.t) } else { cfg.t };
    let cfg_err = |e: String| HarnessError::Config(e);
    Ok(match m.kind {
        ModelKind::Homogenized => {
            let hm = HomogenizedModel::new(m.alpha.clone(), m.sigma, slow.clone()).map_err(|e| cfg_err(e.to_string()))?;
            let plan =
                Plan { kind: m.kind, multiscale: None, homogenized: hm, particle: None, slow, t_end, x0: m.x0 };
            (plan, 1.0)
        }
        ModelKind::Multiscale | ModelKind::Particles => {
            let ms = MultiscaleModel::new(m.alpha.clone(), m.sigma, m.epsilon, slow.clone(), fast)
                .map_err(|e| cfg_err(e.to_string()))?;
            let (hm, res) = homogenize_model(&ms, cfg.estimation.n_quad).map_err(|e| cfg_err(e.to_string()))?;
            let particle = (m.kind == ModelKind::Particles).then(|| ParticleModel {
                alpha: m.alpha[0],
                theta: m.theta,
                sigma: m.sigma,
                epsilon: m.epsilon,
                fast,
                d: 2,
            });
            let multiscale = (m.kind == ModelKind::Multiscale).then_some(ms);
            (Plan { kind: m.kind, multiscale, homogenized: hm, particle, slow, t_end, x0: m.x0 }, res.k)
        }
    })
}

fn sim_points(cfg: &ExperimentConfig) -> Result<Vec<SimPoint>> {
    let ds: Vec<Option<usize>> = match cfg.model.kind {
        ModelKind::Particles => cfg.model.d.iter().map(|&d| Some(d)).collect(),
        _ => vec![None],
    };
    let eps = cfg.model.epsilon;
    let mut out = Vec::new();
    for d in ds {
        for (delta, zeta) in cfg.sampling.delta.resolve(eps) {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(HarnessError::Config(format!("spacing {delta} is not positive")));
            }
            let h = commensurate_step(delta, cfg.fine_step_ceiling(delta));
            if cfg.model.kind != ModelKind::Homogenized && h > eps * eps / 10.0 * (1.0 + 1e-9) {
                warn!("fine step {h} exceeds epsilon^2/10 = {}", eps * eps / 10.0);
                return Err(HarnessError::Config(format!(
                    "fine step {h} exceeds epsilon^2/10 = {}; explicit Euler is unstable for the fast drift",
                    eps * eps / 10.0
                )));
            }
            if cfg.t < delta {
                return Err(HarnessError::Config(format!("T = {} is shorter than delta = {delta}", cfg.t)));
            }
            out.push(SimPoint { d, delta, zeta, h });
        }
    }
    Ok(out)
}

/// Estimation keys per simulation point, in a fixed nested order.
fn keys_for(cfg: &ExperimentConfig, p: &SimPoint, available: usize) -> Result<Vec<GridKey>> {
    let mut keys = Vec::new();
    for n_obs in n_obs_grid(&cfg.sampling.n_obs, available)? {
        for e in cfg.estimators() {
            let js: Vec<Option<usize>> =
                if e.uses_j() { cfg.estimation.j.iter().map(|&j| Some(j)).collect() } else { vec![None] };
            for j in js {
                keys.push(GridKey { d: p.d, delta: p.delta, zeta: p.zeta, j, n_obs, estimator: e });
            }
        }
    }
    Ok(keys)
}

fn simulate_point(plan: &Plan, p: &SimPoint, t_end: f64, seed: u64, filtered: bool) -> Result<ObservationSet> {
    let spec = SimSpec::new(t_end, p.h, seed).with_x0(plan.x0);
    let sim = match plan.kind {
        ModelKind::Multiscale => simulate_multiscale_observed(plan.multiscale.as_ref().unwrap(), &spec, p.delta),
        ModelKind::Homogenized => simulate_homogenized_observed(&plan.homogenized, &spec, p.delta),
        ModelKind::Particles => {
            let mut pm = plan.particle.clone().unwrap();
            pm.d = p.d.unwrap();
            simulate_particles_observed(&pm, &spec, p.delta)
        }
    };
    let obs = sim.map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(if filtered { obs.with_filter() } else { obs })
}

/// Observations at the first sampling point of `cfg`, with the fine step
/// the experiment runner would use. Returns the set and that step.
pub fn simulate_config(cfg: &ExperimentConfig, seed: u64, filtered: bool) -> Result<(ObservationSet, f64)> {
    cfg.validate()?;
    let (plan, _) = build_plan(cfg, false)?;
    let p = sim_points(cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| HarnessError::Config("no sampling point".into()))?;
    Ok((simulate_point(&plan, &p, plan.t_end, seed, filtered)?, p.h))
}

/// The homogenized model described by `cfg` and its coefficient `K`
/// (1 for homogenized configs).
pub fn homogenized_of(cfg: &ExperimentConfig) -> Result<(HomogenizedModel, f64)> {
    let (plan, k) = build_plan(cfg, false)?;
    Ok((plan.homogenized, k))
}

fn estimate_one(
    cfg: &ExperimentConfig,
    plan: &Plan,
    sigma_eff: f64,
    obs: &ObservationSet,
    key: &GridKey,
) -> std::result::Result<Vec<f64>, String> {
    let obs = obs.prefix(key.n_obs).map_err(|e| e.to_string())?;
    let particles = plan.kind == ModelKind::Particles;
    let scalar = |r: crate::estimate::Result<f64>| r.map(|v| vec![v]).map_err(|e| e.to_string());
    match key.estimator {
        EstimatorKind::ClosedFormHat if particles => scalar(particles_closed_form(&obs, false)),
        EstimatorKind::ClosedFormTilde if particles => scalar(particles_closed_form(&obs, true)),
        EstimatorKind::ClosedFormHat => scalar(ou_closed_form_hat(&obs)),
        EstimatorKind::ClosedFormTilde => scalar(ou_closed_form_tilde(&obs)),
        EstimatorKind::MleHat => scalar(mle_hat(&obs)),
        EstimatorKind::MleTilde => scalar(mle_tilde(&obs)),
        EstimatorKind::Hat | EstimatorKind::Tilde => {
            let est = &cfg.estimation;
            let j = key.j.expect("generic estimators carry J");
            let beta = BetaFamily::parse(&est.beta, j).map_err(|e| e.to_string())?;
            let settings = ScoreSettings::new(plan.slow.clone(), sigma_eff, beta)
                .filtered(key.estimator == EstimatorKind::Tilde)
                .basis(est.basis)
                .fem(est.fem);
            let ctx = ScoreContext::new(&obs, settings).map_err(|e| e.to_string())?;
            let a0 = est.a0.clone().unwrap_or_else(|| vec![1.0; plan.slow.dim()]);
            let opts = SolverOptions { tol_score: est.tol_score, max_iter: est.max_iter, ..SolverOptions::default() };
            let r = solve_estimator(&ctx, &a0, &opts).map_err(|e| e.to_string())?;
            if r.converged {
                Ok(r.a_hat)
            } else {
                Err(format!("no root: score norm {:e} after {} iterations", r.score_norm, r.iterations))
            }
        }
        EstimatorKind::ClosedForm => unreachable!("expanded before use"),
    }
}

/// Runs every replication of every grid point.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (plan, k) = build_plan(cfg, opts.full_scale)?;
    let truth = plan.homogenized.a().to_vec();
    let sigma_eff = plan.homogenized.sigma();
    let points = sim_points(cfg)?;
    let filtered = cfg.estimators().iter().any(|e| e.filtered());

    let mut keys = Vec::new();
    let mut point_keys = Vec::new();
    for p in &points {
        let available = (plan.t_end / p.delta * (1.0 + 1e-12)).floor() as usize;
        let ks = keys_for(cfg, p, available.max(1))?;
        point_keys.push(keys.len()..keys.len() + ks.len());
        keys.extend(ks);
    }

    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..cfg.n_rep).map(move |r| (p, r))).collect();
    let run_job = |&(pi, rep): &(usize, usize)| -> Vec<ReplicationRecord> {
        let p = &points[pi];
        let seed = derive_seed(cfg.master_seed, &[pi as u64, rep as u64]);
        let obs = simulate_point(&plan, p, plan.t_end, seed, filtered);
        point_keys[pi]
            .clone()
            .map(|ki| {
                let outcome = match &obs {
                    Ok(obs) => estimate_one(cfg, &plan, sigma_eff, obs, &keys[ki]),
                    Err(e) => Err(format!("simulation failed: {e}")),
                };
                let (estimate, error, failure) = match outcome {
                    Ok(a) if a.iter().all(|v| v.is_finite()) => {
                        let err = euclid(&a, &truth);
                        (Some(a), Some(err), None)
                    }
                    Ok(a) => (None, None, Some(format!("non-finite estimate {a:?}"))),
                    Err(e) => (None, None, Some(e)),
                };
                ReplicationRecord { key: ki, rep, seed, h: p.h, estimate, error, failure }
            })
            .collect()
    };

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = opts.threads {
            b = b.num_threads(n);
        }
        b.build()?
    };
    let mut records: Vec<ReplicationRecord> =
        pool.install(|| jobs.par_iter().map(run_job).collect::<Vec<_>>()).into_iter().flatten().collect();
    records.sort_by_key(|r| (r.key, r.rep));

    let summaries = summarize(&keys, &records, &truth, cfg.n_rep);
    for s in summaries.iter().filter(|s| s.flagged) {
        warn!("grid point {:?}: {} of {} replications failed", s.key, s.n_fail, cfg.n_rep);
    }
    Ok(ExperimentResult {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        full_scale: opts.full_scale,
        k,
        truth,
        sigma_eff,
        keys,
        records,
        summaries,
    })
}

/// One line of a sweep table: mean estimate at the largest `n_obs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: f64,
    pub estimator: EstimatorKind,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median_error: Option<f64>,
    pub n_fail: usize,
    pub flagged: bool,
}

fn sweep_rows(res: &ExperimentResult, param: impl Fn(&GridKey) -> f64) -> Vec<SweepRow> {
    let n_max = |delta: f64| res.keys.iter().filter(|k| k.delta == delta).map(|k| k.n_obs).max().unwrap_or(0);
    res.summaries
        .iter()
        .filter(|s| s.key.n_obs == n_max(s.key.delta))
        .map(|s| SweepRow {
            param: param(&s.key),
            estimator: s.key.estimator,
            mean: s.mean.clone(),
            std: s.std.clone(),
            median_error: s.median_error,
            n_fail: s.n_fail,
            flagged: s.flagged,
        })
        .collect()
}

/// Estimates against `zeta` with `delta = epsilon^zeta`.
pub fn sweep_zeta(cfg: &ExperimentConfig, zetas: &[f64], opts: RunOptions) -> Result<(ExperimentResult, Vec<SweepRow>)> {
    if zetas.is_empty() {
        return Err(HarnessError::Config("zeta list is empty".into()));
    }
    let mut cfg = cfg.clone();
    cfg.sampling.delta = DeltaSpec::Zeta(zetas.to_vec());
    let res = run_experiment(&cfg, opts)?;
    let rows = sweep_rows(&res, |k| k.zeta.unwrap_or(f64::NAN));
    Ok((res, rows))
}

/// Estimates against the number of eigenpairs `J`.
pub fn sweep_j(cfg: &ExperimentConfig, js: &[usize], opts: RunOptions) -> Result<(ExperimentResult, Vec<SweepRow>)> {
    if js.is_empty() {
        return Err(HarnessError::Config("J list is empty".into()));
    }
    let mut cfg = cfg.clone();
    cfg.estimation.j = js.to_vec();
    let res = run_experiment(&cfg, opts)?;
    let rows = sweep_rows(&res, |k| k.j.map_or(f64::NAN, |j| j as f64));
    Ok((res, rows))
}

/// Two-parameter bistable run: `alpha = (1.2, 0.7)`, `sigma = 0.7`,
/// `delta = 1`, `J = 1`, `beta = (x^3, x)`, `N = 100, 200, .., 1000`.
pub fn table1_config(epsilon: f64, n_rep: usize, master_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("bistable-eps{epsilon}"),
        model: ModelConfig {
            kind: ModelKind::Multiscale,
            alpha: vec![1.2, 0.7],
            sigma: 0.7,
            epsilon,
            slow: "bistable".into(),
            fast: "cos".into(),
            period: None,
            theta: 0.0,
            d: default_d(),
            x0: 0.0,
        },
        t: 1000.0,
        t_full: None,
        sampling: SamplingConfig {
            delta: DeltaSpec::Absolute(vec![1.0]),
            h: None,
            step_rule: StepRule::EpsilonCubed,
            n_obs: NObsSpec::List((1..=10).map(|k| 100 * k).collect()),
        },
        estimation: EstimationConfig {
            j: vec![1],
            beta: "list:x^3,x".into(),
            estimators: vec![EstimatorKind::Hat],
            basis: BasisMode::Auto,
            a0: None,
            tol_score: default_tol(),
            max_iter: default_max_iter(),
            fem: FemSettings::default(),
            n_quad: DEFAULT_N_QUAD,
        },
        n_rep,
        master_seed,
        output: OutputConfig::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub epsilon: f64,
    pub n_obs: usize,
    pub median_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub error_of_mean: Option<f64>,
    pub mean: Vec<f64>,
    pub n_fail: usize,
}

/// `e_hat` against `N` for each `epsilon`.
pub fn table1_protocol(
    epsilons: &[f64],
    n_rep: usize,
    master_seed: u64,
    opts: RunOptions,
) -> Result<(Vec<ExperimentResult>, Vec<Table1Row>)> {
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for &eps in epsilons {
        let res = run_experiment(&table1_config(eps, n_rep, master_seed), opts)?;
        rows.extend(res.summaries.iter().map(|s| Table1Row {
            epsilon: eps,
            n_obs: s.key.n_obs,
            median_error: s.median_error,
            mean_error: s.mean_error,
            error_of_mean: s.error_of_mean,
            mean: s.mean.clone(),
            n_fail: s.n_fail,
        }));
        results.push(res);
    }
    Ok((results, rows))
}
