//! Slow confining potentials, fast periodic potentials and the two-scale model.
//!
//! Every slow component is a polynomial, so values and derivatives are
//! evaluated from stored coefficient lists by Horner's rule.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot parse potential spec {spec:?}: {reason}")]
    Parse { spec: String, reason: String },
}

/// Dense polynomial `c0 + c1 x + c2 x^2 + ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Self { coeffs }
    }

    pub fn monomial(power: usize, coeff: f64) -> Self {
        let mut c = vec![0.0; power + 1];
        c[power] = coeff;
        Self::new(c)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn leading(&self) -> f64 {
        *self.coeffs.last().unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Self {
        if self.coeffs.len() == 1 {
            return Self::new(vec![0.0]);
        }
        Self::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &c)| k as f64 * c)
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let c = (0..n)
            .map(|k| self.coeffs.get(k).unwrap_or(&0.0) + other.coeffs.get(k).unwrap_or(&0.0))
            .collect();
        Self::new(c)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut c = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Self::new(c)
    }
}

/// One scalar component of the slow potential with cached derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialComponent {
    value: Polynomial,
    first: Polynomial,
    second: Polynomial,
}

impl PotentialComponent {
    pub fn new(value: Polynomial) -> Self {
        let first = value.derivative();
        let second = first.derivative();
        Self { value, first, second }
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.value
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.value.eval(x)
    }

    #[inline]
    pub fn first(&self, x: f64) -> f64 {
        self.first.eval(x)
    }

    #[inline]
    pub fn second(&self, x: f64) -> f64 {
        self.second.eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlowKind {
    /// `x^2/2`
    Quadratic,
    /// `x^4/4`
    Quartic,
    /// `x^6/6`
    Sextic,
    /// The two-component pair `(x^4/4, -x^2/2)`.
    Bistable,
    Custom,
}

/// Slow-scale potential `V: R -> R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowPotential {
    kind: SlowKind,
    components: Vec<PotentialComponent>,
    spec: String,
}

impl SlowPotential {
    pub fn quadratic() -> Self {
        Self::builtin(SlowKind::Quadratic, vec![Polynomial::monomial(2, 0.5)], "quadratic")
    }

    pub fn quartic() -> Self {
        Self::builtin(SlowKind::Quartic, vec![Polynomial::monomial(4, 0.25)], "quartic")
    }

    pub fn sextic() -> Self {
        Self::builtin(SlowKind::Sextic, vec![Polynomial::monomial(6, 1.0 / 6.0)], "sextic")
    }

    pub fn bistable() -> Self {
        Self::builtin(
            SlowKind::Bistable,
            vec![Polynomial::monomial(4, 0.25), Polynomial::monomial(2, -0.5)],
            "bistable",
        )
    }

    /// Single-component double well `x^4/4 - x^2/2`.
    pub fn double_well() -> Self {
        let mut v = Self::custom(vec![Polynomial::new(vec![0.0, 0.0, -0.5, 0.0, 0.25])])
            .expect("double well is a valid polynomial");
        v.spec = "double-well".into();
        v
    }

    pub fn custom(components: Vec<Polynomial>) -> Result<Self, ModelError> {
        if components.is_empty() {
            return Err(ModelError::InvalidParameter(
                "slow potential needs at least one component".into(),
            ));
        }
        if components.iter().any(|p| p.coeffs().iter().any(|c| !c.is_finite())) {
            return Err(ModelError::InvalidParameter(
                "polynomial coefficients must be finite".into(),
            ));
        }
        let spec = components
            .iter()
            .map(|p| {
                let c: Vec<String> = p.coeffs().iter().map(|c| format!("{c}")).collect();
                format!("poly:[{}]", c.join(","))
            })
            .collect::<Vec<_>>()
            .join(";");
        Ok(Self {
            kind: SlowKind::Custom,
            components: components.into_iter().map(PotentialComponent::new).collect(),
            spec,
        })
    }

    fn builtin(kind: SlowKind, polys: Vec<Polynomial>, spec: &str) -> Self {
        Self {
            kind,
            components: polys.into_iter().map(PotentialComponent::new).collect(),
            spec: spec.into(),
        }
    }

    pub fn kind(&self) -> SlowKind {
        self.kind
    }

    /// Number of components `m`.
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[PotentialComponent] {
        &self.components
    }

    /// Canonical spec string, parseable by [`SlowPotential::from_str`].
    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn is_quadratic_scalar(&self) -> bool {
        if self.dim() != 1 {
            return false;
        }
        let c = self.components[0].polynomial().coeffs();
        c.len() == 3 && c[0] == 0.0 && c[1] == 0.0 && c[2] == 0.5
    }

    /// `a . V(x)`.
    pub fn dot_value(&self, a: &[f64], x: f64) -> f64 {
        self.components.iter().zip(a).map(|(c, ai)| ai * c.value(x)).sum()
    }

    /// `a . V'(x)`.
    #[inline]
    pub fn dot_first(&self, a: &[f64], x: f64) -> f64 {
        self.components.iter().zip(a).map(|(c, ai)| ai * c.first(x)).sum()
    }

    pub fn dot_second(&self, a: &[f64], x: f64) -> f64 {
        self.components.iter().zip(a).map(|(c, ai)| ai * c.second(x)).sum()
    }

    /// The polynomial `a . V`.
    pub fn combined(&self, a: &[f64]) -> Polynomial {
        self.components
            .iter()
            .zip(a)
            .fold(Polynomial::new(vec![0.0]), |acc, (c, ai)| {
                acc.add(&c.polynomial().scale(*ai))
            })
    }

    /// Whether `a . V` is confining: even degree with positive leading coefficient.
    pub fn is_confining(&self, a: &[f64]) -> bool {
        if a.len() != self.dim() || a.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let p = self.combined(a);
        p.degree() >= 2 && p.degree().is_multiple_of(2) && p.leading() > 0.0
    }
}

impl fmt::Display for SlowPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec)
    }
}

fn parse_coeff_list(spec: &str, body: &str) -> Result<Vec<f64>, ModelError> {
    let inner = body
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| ModelError::Parse {
            spec: spec.into(),
            reason: "expected poly:[c0,c1,...]".into(),
        })?;
    inner
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|e| ModelError::Parse {
                spec: spec.into(),
                reason: e.to_string(),
            })
        })
        .collect()
}

impl FromStr for SlowPotential {
    type Err = ModelError;

    /// Accepts `quadratic`, `quartic`, `sextic`, `bistable`, `double-well`
    /// or `poly:[c0,c1,...]`; several segments joined by `;` are stacked
    /// into a multi-component potential.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let segments: Vec<&str> = spec.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
        if segments.len() == 1 {
            match segments[0] {
                "quadratic" => return Ok(Self::quadratic()),
                "quartic" => return Ok(Self::quartic()),
                "sextic" => return Ok(Self::sextic()),
                "bistable" => return Ok(Self::bistable()),
                "double-well" => return Ok(Self::double_well()),
                _ => {}
            }
        }
        let mut polys = Vec::new();
        for seg in &segments {
            match *seg {
                "quadratic" => polys.push(Polynomial::monomial(2, 0.5)),
                "quartic" => polys.push(Polynomial::monomial(4, 0.25)),
                "sextic" => polys.push(Polynomial::monomial(6, 1.0 / 6.0)),
                "bistable" => {
                    polys.push(Polynomial::monomial(4, 0.25));
                    polys.push(Polynomial::monomial(2, -0.5));
                }
                "double-well" => polys.push(Polynomial::new(vec![0.0, 0.0, -0.5, 0.0, 0.25])),
                s => match s.strip_prefix("poly:") {
                    Some(body) => polys.push(Polynomial::new(parse_coeff_list(spec, body)?)),
                    None => {
                        return Err(ModelError::Parse {
                            spec: spec.into(),
                            reason: format!("unknown component {s:?}"),
                        })
                    }
                },
            }
        }
        Self::custom(polys)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FastKind {
    /// `cos(2 pi y / L)`
    Cos,
    Zero,
}

/// Smooth bounded `L`-periodic fast-scale potential `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastPotential {
    kind: FastKind,
    period: f64,
    freq: f64,
}

impl FastPotential {
    pub fn cos() -> Self {
        Self { kind: FastKind::Cos, period: TAU, freq: 1.0 }
    }

    pub fn cos_with_period(period: f64) -> Result<Self, ModelError> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("period must be positive, got {period}")));
        }
        Ok(Self { kind: FastKind::Cos, period, freq: TAU / period })
    }

    pub fn zero() -> Self {
        Self { kind: FastKind::Zero, period: TAU, freq: 1.0 }
    }

    pub fn new(kind: FastKind, period: Option<f64>) -> Result<Self, ModelError> {
        match kind {
            FastKind::Cos => Self::cos_with_period(period.unwrap_or(TAU)),
            FastKind::Zero => {
                let mut p = Self::zero();
                if let Some(l) = period {
                    if !(l > 0.0 && l.is_finite()) {
                        return Err(ModelError::InvalidParameter(format!(
                            "period must be positive, got {l}"
                        )));
                    }
                    p.period = l;
                }
                Ok(p)
            }
        }
    }

    pub fn kind(&self) -> FastKind {
        self.kind
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn is_zero(&self) -> bool {
        self.kind == FastKind::Zero
    }

    pub fn sup_bound(&self) -> f64 {
        match self.kind {
            FastKind::Cos => 1.0,
            FastKind::Zero => 0.0,
        }
    }

    #[inline]
    pub fn value(&self, y: f64) -> f64 {
        match self.kind {
            FastKind::Cos => (self.freq * y).cos(),
            FastKind::Zero => 0.0,
        }
    }

    #[inline]
    pub fn derivative(&self, y: f64) -> f64 {
        match self.kind {
            FastKind::Cos => -self.freq * (self.freq * y).sin(),
            FastKind::Zero => 0.0,
        }
    }
}

impl FromStr for FastPotential {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cos" => Ok(Self::cos()),
            "zero" => Ok(Self::zero()),
            other => Err(ModelError::Parse {
                spec: other.into(),
                reason: "expected cos or zero".into(),
            }),
        }
    }
}

/// `dX = -alpha . V'(X) dt - (1/eps) p'(X/eps) dt + sqrt(2 sigma) dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleModel {
    alpha: Vec<f64>,
    sigma: f64,
    epsilon: f64,
    slow: SlowPotential,
    fast: FastPotential,
}

impl MultiscaleModel {
    pub fn new(
        alpha: Vec<f64>,
        sigma: f64,
        epsilon: f64,
        slow: SlowPotential,
        fast: FastPotential,
    ) -> Result<Self, ModelError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if alpha.len() != slow.dim() {
            return Err(ModelError::InvalidParameter(format!(
                "alpha has {} entries but the slow potential has {} components",
                alpha.len(),
                slow.dim()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(ModelError::InvalidParameter("alpha must be finite".into()));
        }
        Ok(Self { alpha, sigma, epsilon, slow, fast })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn slow(&self) -> &SlowPotential {
        &self.slow
    }

    pub fn fast(&self) -> &FastPotential {
        &self.fast
    }

    /// `-alpha . V'(x)`
    #[inline]
    pub fn eval_drift_slow(&self, x: f64) -> f64 {
        -self.slow.dot_first(&self.alpha, x)
    }

    /// `-(1/eps) p'(x/eps)`
    #[inline]
    pub fn eval_drift_fast(&self, x: f64) -> f64 {
        -self.fast.derivative(x / self.epsilon) / self.epsilon
    }
}
