//! Loss values and their analytic gradients with respect to the batch
//! embeddings `v` (originals) and `v_hat` (augmentations).
//!
//! Memory rows are constants throughout. Embeddings are taken as given: the
//! instance and self-excluded softmaxes use raw dot products `m_j . v`, the
//! relationship vectors use cosines, and the returned gradients are exact for
//! those functions even off the unit sphere. Projecting onto the sphere's
//! tangent space is the encoder's job.

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::neighborhood::NeighborhoodState;
use crate::numerics::{dot, norm};
use crate::probability::{relationship_vector, RelationshipVector};

/// Floor applied to `1 - p` before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Curriculum role of one batch instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Membership {
    /// Part of a selected neighborhood; carries its neighbor list.
    Selected(Vec<usize>),
    /// Its own singleton class.
    Complement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMembership(pub Vec<Membership>);

impl BatchMembership {
    pub fn from_state(state: &NeighborhoodState, indices: &[usize]) -> Self {
        BatchMembership(
            indices
                .iter()
                .map(|&i| {
                    if state.is_selected(i) {
                        Membership::Selected(state.neighbors[i].clone())
                    } else {
                        Membership::Complement
                    }
                })
                .collect(),
        )
    }

    pub fn all_complement(n: usize) -> Self {
        BatchMembership(vec![Membership::Complement; n])
    }
}

/// One loss and its gradients; rows follow the batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad_v: Vec<Vec<f64>>,
    pub grad_v_hat: Vec<Vec<f64>>,
}

impl LossTerm {
    fn zeros(n: usize, d: usize) -> Self {
        LossTerm {
            value: 0.0,
            grad_v: vec![vec![0.0; d]; n],
            grad_v_hat: vec![vec![0.0; d]; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub and_value: f64,
    pub ue_value: f64,
    pub aug_value: f64,
    pub total_value: f64,
    pub weight: f64,
    pub grad_v: Vec<Vec<f64>>,
    pub grad_v_hat: Vec<Vec<f64>>,
}

fn check_batch(bank: &MemoryBank, v: &[Vec<f64>]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::param("empty batch"));
    }
    if let Some(bad) = v.iter().find(|x| x.len() != bank.dim()) {
        return Err(Error::param(format!(
            "embedding has dimension {}, memory has {}",
            bad.len(),
            bank.dim()
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Accumulates `sum_k g_k m_k / tau` into `out`.
fn logits_backward(bank: &MemoryBank, g: &[f64], tau: f64, out: &mut [f64]) {
    for (gk, m) in g.iter().zip(bank.rows()) {
        if *gk != 0.0 {
            let s = gk / tau;
            for (o, x) in out.iter_mut().zip(m) {
                *o += s * x;
            }
        }
    }
}

/// Neighborhood classification loss: a selected instance is scored by the
/// probability mass on itself plus its neighbors, a complement instance by
/// the mass on itself alone.
pub fn and_loss(
    bank: &MemoryBank,
    v: &[Vec<f64>],
    indices: &[usize],
    membership: &BatchMembership,
    tau: f64,
) -> Result<LossTerm> {
    check_batch(bank, v)?;
    check_tau(tau)?;
    if indices.len() != v.len() || membership.0.len() != v.len() {
        return Err(Error::param("batch, index and membership lengths differ"));
    }
    let n_bank = bank.len();
    let mut out = LossTerm::zeros(v.len(), bank.dim());
    for (b, (vb, &self_idx)) in v.iter().zip(indices).enumerate() {
        if self_idx >= n_bank {
            return Err(Error::Index {
                index: self_idx,
                len: n_bank,
            });
        }
        let mut in_class = vec![false; n_bank];
        in_class[self_idx] = true;
        if let Membership::Selected(list) = &membership.0[b] {
            if list.is_empty() {
                return Err(Error::State(format!(
                    "selected instance {self_idx} has no neighbors"
                )));
            }
            for &j in list {
                if j >= n_bank {
                    return Err(Error::Index { index: j, len: n_bank });
                }
                in_class[j] = true;
            }
        }
        let z: Vec<f64> = bank.rows().map(|m| dot(m, vb) / tau).collect();
        let lse_all = log_sum_exp(z.iter().copied());
        let lse_class = log_sum_exp(
            z.iter()
                .zip(&in_class)
                .filter(|(_, &c)| c)
                .map(|(x, _)| *x),
        );
        out.value += lse_all - lse_class;
        let g: Vec<f64> = z
            .iter()
            .zip(&in_class)
            .map(|(&zk, &c)| {
                let p = (zk - lse_all).exp();
                if c {
                    p - (zk - lse_class).exp()
                } else {
                    p
                }
            })
            .collect();
        logits_backward(bank, &g, tau, &mut out.grad_v[b]);
    }
    Ok(out)
}

/// Sum over the batch of the entropy of each instance's self-excluded
/// distribution.
pub fn ue_loss(bank: &MemoryBank, v: &[Vec<f64>], indices: &[usize], tau: f64) -> Result<LossTerm> {
    check_batch(bank, v)?;
    check_tau(tau)?;
    if indices.len() != v.len() {
        return Err(Error::param("batch and index lengths differ"));
    }
    if bank.len() < 2 {
        return Err(Error::degenerate(
            "self-excluded entropy needs at least two memory rows",
        ));
    }
    let mut out = LossTerm::zeros(v.len(), bank.dim());
    for (b, (vb, &self_idx)) in v.iter().zip(indices).enumerate() {
        if self_idx >= bank.len() {
            return Err(Error::Index {
                index: self_idx,
                len: bank.len(),
            });
        }
        let z: Vec<f64> = bank.rows().map(|m| dot(m, vb) / tau).collect();
        let lse = log_sum_exp(
            z.iter()
                .enumerate()
                .filter(|(k, _)| *k != self_idx)
                .map(|(_, x)| *x),
        );
        // log q_k for k != self; the self slot is unused
        let log_q: Vec<f64> = z.iter().map(|zk| zk - lse).collect();
        let mut h = 0.0;
        for (k, lq) in log_q.iter().enumerate() {
            if k != self_idx {
                h -= lq.exp() * lq;
            }
        }
        let h = h.max(0.0);
        out.value += h;
        let g: Vec<f64> = log_q
            .iter()
            .enumerate()
            .map(|(k, &lq)| {
                if k == self_idx {
                    0.0
                } else {
                    let q = lq.exp();
                    if q == 0.0 {
                        0.0
                    } else {
                        -q * (lq + h)
                    }
                }
            })
            .collect();
        logits_backward(bank, &g, tau, &mut out.grad_v[b]);
    }
    Ok(out)
}

/// Gradient of `sum_j g_j cos(v, m_j)` with respect to `v`.
fn cosine_backward(bank: &MemoryBank, v: &[f64], r: &[f64], g: &[f64]) -> Vec<f64> {
    let nv = norm(v);
    let mut out = vec![0.0; v.len()];
    for ((gj, m), _) in g.iter().zip(bank.rows()).zip(r) {
        if *gj != 0.0 {
            let s = gj / (norm(m) * nv);
            for (o, x) in out.iter_mut().zip(m) {
                *o += s * x;
            }
        }
    }
    let radial = dot(g, r) / (nv * nv);
    for (o, x) in out.iter_mut().zip(v) {
        *o -= radial * x;
    }
    out
}

/// Augmentation-invariance loss over relationship vectors: each augmented
/// instance should be identified as its original within the batch, and no
/// original should be mistaken for another.
pub fn aug_loss(bank: &MemoryBank, v: &[Vec<f64>], v_hat: &[Vec<f64>], tau: f64) -> Result<LossTerm> {
    check_batch(bank, v)?;
    check_batch(bank, v_hat)?;
    check_tau(tau)?;
    let n = v.len();
    if v_hat.len() != n {
        return Err(Error::param("original and augmented batches differ in size"));
    }
    let r: Vec<RelationshipVector> = v
        .iter()
        .map(|x| relationship_vector(bank, x))
        .collect::<Result<_>>()?;
    let r_hat: Vec<RelationshipVector> = v_hat
        .iter()
        .map(|x| relationship_vector(bank, x))
        .collect::<Result<_>>()?;
    let len = bank.len();
    let mut g_r = vec![vec![0.0; len]; n];
    let mut g_r_hat = vec![vec![0.0; len]; n];
    let mut value = 0.0;

    for i in 0..n {
        // positive term: -log softmax_k(r_k . r_hat_i / tau) at k = i
        let s: Vec<f64> = r.iter().map(|rk| dot(&rk.0, &r_hat[i].0) / tau).collect();
        let lse = log_sum_exp(s.iter().copied());
        value -= s[i] - lse;
        for k in 0..n {
            let dk = (s[k] - lse).exp() - if k == i { 1.0 } else { 0.0 };
            if dk != 0.0 {
                let c = dk / tau;
                for t in 0..len {
                    g_r[k][t] += c * r_hat[i].0[t];
                    g_r_hat[i][t] += c * r[k].0[t];
                }
            }
        }

        // negative terms: -sum_{j != i} log(1 - softmax_k(r_k . r_i / tau)_j)
        let t_logits: Vec<f64> = r.iter().map(|rk| dot(&rk.0, &r[i].0) / tau).collect();
        let lse = log_sum_exp(t_logits.iter().copied());
        let q: Vec<f64> = t_logits.iter().map(|x| (x - lse).exp()).collect();
        let mut weighted = 0.0;
        let mut coef = vec![0.0; n];
        for j in (0..n).filter(|&j| j != i) {
            let rest = 1.0 - q[j];
            if rest > LOG_FLOOR {
                value -= rest.ln();
                coef[j] = q[j] / rest;
                weighted += coef[j];
            } else {
                value -= LOG_FLOOR.ln();
            }
        }
        for k in 0..n {
            let dk = coef[k] - q[k] * weighted;
            if dk != 0.0 {
                let c = dk / tau;
                for t in 0..len {
                    g_r[k][t] += c * r[i].0[t];
                    g_r[i][t] += c * r[k].0[t];
                }
            }
        }
    }

    let grad_v = (0..n)
        .map(|i| cosine_backward(bank, &v[i], &r[i].0, &g_r[i]))
        .collect();
    let grad_v_hat = (0..n)
        .map(|i| cosine_backward(bank, &v_hat[i], &r_hat[i].0, &g_r_hat[i]))
        .collect();
    Ok(LossTerm {
        value,
        grad_v,
        grad_v_hat,
    })
}

/// `and + w * ue + aug`, with gradients combined the same way.
pub fn total_loss(and: &LossTerm, ue: &LossTerm, aug: &LossTerm, w: f64) -> Result<LossBundle> {
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::param(format!("loss weight must be non-negative, got {w}")));
    }
    let n = and.grad_v.len();
    if ue.grad_v.len() != n || aug.grad_v.len() != n {
        return Err(Error::param("loss terms cover different batches"));
    }
    let combine = |a: &[Vec<f64>], u: &[Vec<f64>], g: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(u)
            .zip(g)
            .map(|((ar, ur), gr)| {
                ar.iter()
                    .zip(ur)
                    .zip(gr)
                    .map(|((x, y), z)| x + w * y + z)
                    .collect()
            })
            .collect()
    };
    Ok(LossBundle {
        and_value: and.value,
        ue_value: ue.value,
        aug_value: aug.value,
        total_value: and.value + w * ue.value + aug.value,
        weight: w,
        grad_v: combine(&and.grad_v, &ue.grad_v, &aug.grad_v),
        grad_v_hat: combine(&and.grad_v_hat, &ue.grad_v_hat, &aug.grad_v_hat),
    })
}

/// A loss term that contributes nothing, for disabled components.
pub fn zero_term(n: usize, d: usize) -> LossTerm {
    LossTerm::zeros(n, d)
}
