//! Similarity critics for probability vectors and unit-norm features.
//!
//! Every probability critic here is symmetric in its arguments. Natural logs
//! are used throughout, and `0 * log 0` is taken to be `0`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use crate::error::{invalid, CrlcError, Result};

/// Tolerance on the component sum of a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A cluster-assignment probability vector on the `C`-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values)?;
        Ok(Self(values))
    }

    /// The uniform vector `(1/C, ..., 1/C)`.
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, hot: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[hot] = 1.0;
        Self(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_simplex(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("probability vector is empty"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(invalid(format!("probability component {bad} is negative or not finite")));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("probability components sum to {sum}, not 1")));
    }
    Ok(())
}

/// A unit-norm representation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `values` to unit Euclidean norm. A zero vector has no direction
    /// and is rejected.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(CrlcError::Domain(format!("cannot normalize vector with norm {norm}")));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// The probability critic families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// `log(p . q)`, the recommended critic for probability vectors.
    LogDot,
    Dot,
    NegL2,
    NegJs,
    /// `z1 . z2 / tau`; only meaningful for feature vectors.
    ScaledCosine,
}

impl CriticKind {
    /// The four critics applicable to probability vectors.
    pub const PROBABILITY: [CriticKind; 4] =
        [CriticKind::LogDot, CriticKind::Dot, CriticKind::NegL2, CriticKind::NegJs];

    pub fn name(self) -> &'static str {
        match self {
            CriticKind::LogDot => "log_dot",
            CriticKind::Dot => "dot",
            CriticKind::NegL2 => "neg_l2",
            CriticKind::NegJs => "neg_js",
            CriticKind::ScaledCosine => "scaled_cosine",
        }
    }
}

impl fmt::Display for CriticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriticKind {
    type Err = CrlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_dot" => Ok(CriticKind::LogDot),
            "dot" => Ok(CriticKind::Dot),
            "neg_l2" => Ok(CriticKind::NegL2),
            "neg_js" => Ok(CriticKind::NegJs),
            "scaled_cosine" => Ok(CriticKind::ScaledCosine),
            other => Err(invalid(format!("unknown critic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub kind: CriticKind,
    /// Temperature of the feature critic.
    pub temperature: f64,
    /// Weight of the uniform distribution mixed into probabilities before a
    /// probability critic is evaluated.
    pub smoothing: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { kind: CriticKind::LogDot, temperature: 0.1, smoothing: 0.01 }
    }
}

impl CriticConfig {
    pub fn new(kind: CriticKind, temperature: f64, smoothing: f64) -> Result<Self> {
        let cfg = Self { kind, temperature, smoothing };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        check_smoothing(self.smoothing)
    }

    /// Evaluates the configured probability critic on already smoothed inputs.
    pub fn score(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        match self.kind {
            CriticKind::LogDot => critic_log_dot(p, q),
            CriticKind::Dot => Ok(critic_dot(p, q)),
            CriticKind::NegL2 => Ok(critic_neg_l2(p, q)),
            CriticKind::NegJs => Ok(critic_neg_js(p, q)),
            CriticKind::ScaledCosine => critic_scaled_cosine(p, q, self.temperature),
        }
    }
}

fn check_smoothing(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("smoothing must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Mixes `q` with the uniform distribution: `(1 - gamma) q + gamma / C`.
pub fn smooth(q: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_smoothing(gamma)?;
    let mut out = q.to_vec();
    smooth_in_place(&mut out, gamma);
    Ok(out)
}

pub(crate) fn smooth_in_place(q: &mut [f64], gamma: f64) {
    if gamma == 0.0 {
        return;
    }
    let uniform = gamma / q.len() as f64;
    q.iter_mut().for_each(|v| *v = (1.0 - gamma) * *v + uniform);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(p . q)`. A zero dot product is a domain error: it only happens for
/// un-smoothed one-hot vectors on different classes.
pub fn critic_log_dot(p: &[f64], q: &[f64]) -> Result<f64> {
    let d = dot(p, q);
    if d <= 0.0 {
        return Err(CrlcError::Domain(format!(
            "log-of-dot-product critic undefined for dot product {d}; smooth the inputs"
        )));
    }
    Ok(d.ln())
}

pub fn critic_dot(p: &[f64], q: &[f64]) -> f64 {
    dot(p, q)
}

/// Negative squared Euclidean distance.
pub fn critic_neg_l2(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Negative Jensen-Shannon divergence, in `[-ln 2, 0]`.
pub fn critic_neg_js(p: &[f64], q: &[f64]) -> f64 {
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += a * (a / m).ln();
        }
        if b > 0.0 {
            js += b * (b / m).ln();
        }
    }
    -0.5 * js
}

pub fn critic_scaled_cosine(z1: &[f64], z2: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(dot(z1, z2) / temperature)
}

/// Accumulates `scale * d critic(p, q) / dp` into `grad_p` and the matching
/// partial for `q` into `grad_q`. Inputs are the smoothed vectors the critic
/// actually saw.
pub(crate) fn accumulate_critic_grad(
    kind: CriticKind,
    p: &[f64],
    q: &[f64],
    scale: f64,
    grad_p: &mut [f64],
    grad_q: &mut [f64],
) {
    match kind {
        CriticKind::LogDot => {
            let inv = scale / dot(p, q);
            for c in 0..p.len() {
                grad_p[c] += inv * q[c];
                grad_q[c] += inv * p[c];
            }
        }
        CriticKind::Dot => {
            for c in 0..p.len() {
                grad_p[c] += scale * q[c];
                grad_q[c] += scale * p[c];
            }
        }
        CriticKind::NegL2 => {
            for c in 0..p.len() {
                let d = 2.0 * scale * (p[c] - q[c]);
                grad_p[c] -= d;
                grad_q[c] += d;
            }
        }
        CriticKind::NegJs => {
            // d JS / dp_c = 0.5 ln(2 p_c / (p_c + q_c))
            for c in 0..p.len() {
                let s = p[c] + q[c];
                if p[c] > 0.0 {
                    grad_p[c] -= 0.5 * scale * (2.0 * p[c] / s).ln();
                }
                if q[c] > 0.0 {
                    grad_q[c] -= 0.5 * scale * (2.0 * q[c] / s).ln();
                }
            }
        }
        CriticKind::ScaledCosine => {
            unreachable!("scaled cosine is a feature critic; its gradient lives in the feature loss")
        }
    }
}

/// Gradient of `log(q . p)` with respect to the logits of `q`, treating the
/// smoothed `q` as the softmax output: `q_c p_c / (q . p) - q_c`.
///
/// At a one-hot `q` with `gamma = 0` every component vanishes whatever `p` is
/// (the saturating-gradient case); any `gamma > 0` moves `q` off the corner.
pub fn log_dot_logit_gradient(q: &[f64], p: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(CrlcError::DimensionMismatch {
            expected: q.len(),
            actual: p.len(),
            context: "critic gradient",
        });
    }
    let qs = smooth(q, gamma)?;
    let ps = smooth(p, gamma)?;
    let d = dot(&qs, &ps);
    if d <= 0.0 {
        return Err(CrlcError::Domain("zero dot product in critic gradient".into()));
    }
    Ok(qs.iter().zip(&ps).map(|(qc, pc)| qc * pc / d - qc).collect())
}
