//! Weighted k-NN classification and neighborhood class consistency.

use rayon::prelude::*;

use crate::encoder::{encode_forward, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::memory_bank::MemoryBank;
use crate::numerics::dot;

/// Stored embeddings with one class label per row.
#[derive(Debug, Clone, Copy)]
pub struct LabeledEmbeddings<'a> {
    vectors: &'a MemoryBank,
    labels: &'a [u32],
}

impl<'a> LabeledEmbeddings<'a> {
    pub fn new(vectors: &'a MemoryBank, labels: &'a [u32]) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::param(format!(
                "{} labels for {} embeddings",
                labels.len(),
                vectors.len()
            )));
        }
        Ok(LabeledEmbeddings { vectors, labels })
    }

    pub fn vectors(&self) -> &MemoryBank {
        self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        self.labels
    }
}

/// Indices of the `k` rows most similar to `query`, most similar first;
/// equal similarities go to the lower index.
pub fn top_k(vectors: &MemoryBank, query: &[f64], k: usize) -> Result<Vec<usize>> {
    let sims = vectors.all_similarities(query)?;
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    let k = k.min(idx.len());
    let order = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

/// Votes `exp(sim / tau)` from each of the `k` nearest stored embeddings;
/// the class with the largest total wins, ties going to the lower class.
/// `k` is clamped to the number of stored embeddings.
pub fn weighted_knn_predict(train: &LabeledEmbeddings, query: &[f64], k: usize, tau: f64) -> Result<u32> {
    if train.vectors.is_empty() {
        return Err(Error::param("k-NN needs a non-empty training set"));
    }
    if k == 0 || !(tau > 0.0) {
        return Err(Error::param("k-NN needs k > 0 and a positive temperature"));
    }
    let nearest = top_k(train.vectors, query, k)?;
    let classes = train.labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut scores = vec![0.0; classes];
    for i in nearest {
        scores[train.labels[i] as usize] += (dot(train.vectors.row(i), query) / tau).exp();
    }
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    Ok(best as u32)
}

pub fn top1_accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::param(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::param("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of `selected` instances whose neighbors all share their label;
/// 1.0 for an empty selection.
pub fn neighborhood_consistency(neighbors: &[Vec<usize>], selected: &[usize], labels: &[u32]) -> Result<f64> {
    if labels.len() < neighbors.len() {
        return Err(Error::param("labels do not cover every instance"));
    }
    if selected.is_empty() {
        return Ok(1.0);
    }
    let mut consistent = 0;
    for &i in selected {
        let list = neighbors.get(i).ok_or(Error::Index {
            index: i,
            len: neighbors.len(),
        })?;
        if list.iter().all(|&j| labels.get(j) == Some(&labels[i])) {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / selected.len() as f64)
}

/// Embeds un-augmented images with the encoder.
pub fn embed_images(params: &EncoderParams, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|im| encode_forward(params, im).map(|(v, _)| v))
        .collect()
}

/// Predictions for every query plus top-1 accuracy against `query_labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnReport {
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

pub fn knn_evaluate(
    train: &LabeledEmbeddings,
    queries: &[Vec<f64>],
    query_labels: &[u32],
    k: usize,
    tau: f64,
) -> Result<KnnReport> {
    let predictions: Vec<u32> = queries
        .par_iter()
        .map(|q| weighted_knn_predict(train, q, k, tau))
        .collect::<Result<_>>()?;
    let accuracy = top1_accuracy(&predictions, query_labels)?;
    Ok(KnnReport { predictions, accuracy })
}
