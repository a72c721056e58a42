//! Dense f64 kernels: normalization, tempered softmax, entropy, cosine.

use crate::error::{Error, Result};

/// Tolerance used when validating that a distribution sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and unit mass.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("probability vector is empty"));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::param("probability entries must be finite and non-negative"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbVector(values))
    }

    pub(crate) fn from_softmax(values: Vec<f64>) -> Self {
        ProbVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::degenerate("cannot normalize an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite entry in vector to normalize".into()));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::degenerate("cannot normalize the zero vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `exp(s_j / tau) / sum_k exp(s_k / tau)`, evaluated after subtracting the max score.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::param("softmax over an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite softmax score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(ProbVector::from_softmax(out))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
