//! Per-instance embedding memory maintained by exponential moving average.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize};
use crate::rng::{self, Stream};

/// `N x D` matrix of unit-norm instance embeddings, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    count: usize,
    data: Vec<f64>,
}

impl MemoryBank {
    /// Rows drawn from an isotropic Gaussian, then projected to the unit sphere.
    pub fn init(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("memory bank needs at least one row"));
        }
        if d < 2 {
            return Err(Error::param(format!("embedding dimension must be >= 2, got {d}")));
        }
        let mut rng = rng::stream(seed, Stream::MemoryInit);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row = loop {
                let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                if let Ok(r) = l2_normalize(&raw) {
                    break r;
                }
            };
            data.extend(row);
        }
        Ok(MemoryBank { dim: d, count: n, data })
    }

    /// Builds a bank from explicit rows. Rows are stored as given.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let count = rows.len();
        if count == 0 {
            return Err(Error::param("memory bank needs at least one row"));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::param("memory rows have inconsistent dimensions"));
        }
        Ok(MemoryBank {
            dim,
            count,
            data: rows.concat(),
        })
    }

    pub(crate) fn from_flat(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if count == 0 || data.len() != count * dim {
            return Err(Error::param("memory payload does not match its shape"));
        }
        Ok(MemoryBank { dim, count, data })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// `m_i <- normalize((1 - eta) m_i + eta v)`. Only row `i` is written.
    pub fn ema_update(&mut self, i: usize, v: &[f64], eta: f64) -> Result<()> {
        if i >= self.count {
            return Err(Error::Index {
                index: i,
                len: self.count,
            });
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::param(format!("EMA momentum must lie in (0, 1], got {eta}")));
        }
        self.check_dim(v)?;
        let mixed: Vec<f64> = self
            .row(i)
            .iter()
            .zip(v)
            .map(|(m, x)| (1.0 - eta) * m + eta * x)
            .collect();
        let updated = if eta == 1.0 { l2_normalize(v)? } else { l2_normalize(&mixed)? };
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(&updated);
        Ok(())
    }

    /// Dot product of `v` with every memory row.
    pub fn all_similarities(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        Ok(self.rows().map(|m| dot(m, v)).collect())
    }

    /// Rounds every entry through f32, matching what a checkpoint stores.
    pub(crate) fn quantize(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::param(format!(
                "vector has dimension {}, memory has {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }
}
