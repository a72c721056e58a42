//! Probability and relationship vectors computed against the memory bank.

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::{cosine_similarity, dot, norm, softmax_temp, ProbVector};

/// Cosine similarity of one embedding against every memory row.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipVector(pub Vec<f64>);

impl RelationshipVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of `m_j . v / tau` over every memory row `j`.
pub fn instance_probs(bank: &MemoryBank, v: &[f64], tau: f64) -> Result<ProbVector> {
    softmax_temp(&bank.all_similarities(v)?, tau)
}

/// The same softmax with row `self_index` removed from both the support and
/// the normalizer. Entry order follows the bank with `self_index` skipped.
pub fn excluded_probs(
    bank: &MemoryBank,
    v: &[f64],
    self_index: usize,
    tau: f64,
) -> Result<ProbVector> {
    if bank.len() < 2 {
        return Err(Error::degenerate(
            "self-excluded distribution needs at least two memory rows",
        ));
    }
    if self_index >= bank.len() {
        return Err(Error::Index {
            index: self_index,
            len: bank.len(),
        });
    }
    let mut sims = bank.all_similarities(v)?;
    sims.remove(self_index);
    softmax_temp(&sims, tau)
}

/// Cosine similarity of `v` against every memory row.
pub fn relationship_vector(bank: &MemoryBank, v: &[f64]) -> Result<RelationshipVector> {
    if v.len() != bank.dim() {
        return Err(Error::param(format!(
            "vector has dimension {}, memory has {}",
            v.len(),
            bank.dim()
        )));
    }
    if norm(v) == 0.0 {
        return Err(Error::degenerate("relationship vector of the zero vector"));
    }
    bank.rows()
        .map(|m| cosine_similarity(v, m))
        .collect::<Result<Vec<_>>>()
        .map(RelationshipVector)
}

/// Batch-level softmaxes comparing relationship vectors of originals and
/// their augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPairProbs {
    /// `diag[i]`: softmax over `k` of `r_k . r_hat_i / tau`, read at `k = i`.
    pub diag: Vec<f64>,
    /// Row `i` is the softmax over `k` of `r_k . r_i / tau`. Entries `j != i`
    /// are the misidentification probabilities; the diagonal entry is kept so
    /// every row is a full distribution but no loss term reads it.
    pub offdiag: Vec<Vec<f64>>,
}

pub fn augmented_pair_probs(
    r_batch: &[RelationshipVector],
    r_hat_batch: &[RelationshipVector],
    tau: f64,
) -> Result<AugPairProbs> {
    let n = r_batch.len();
    if n == 0 {
        return Err(Error::param("empty batch"));
    }
    if r_hat_batch.len() != n {
        return Err(Error::param(format!(
            "{} relationship vectors but {} augmented ones",
            n,
            r_hat_batch.len()
        )));
    }
    let len = r_batch[0].len();
    if r_batch.iter().chain(r_hat_batch).any(|r| r.len() != len) {
        return Err(Error::param("relationship vectors have mismatched lengths"));
    }
    let mut diag = Vec::with_capacity(n);
    let mut offdiag = Vec::with_capacity(n);
    for i in 0..n {
        let pos: Vec<f64> = r_batch
            .iter()
            .map(|rk| dot(rk.as_slice(), r_hat_batch[i].as_slice()))
            .collect();
        diag.push(softmax_temp(&pos, tau)?[i]);
        let neg: Vec<f64> = r_batch
            .iter()
            .map(|rk| dot(rk.as_slice(), r_batch[i].as_slice()))
            .collect();
        offdiag.push(softmax_temp(&neg, tau)?.into_inner());
    }
    Ok(AugPairProbs { diag, offdiag })
}
