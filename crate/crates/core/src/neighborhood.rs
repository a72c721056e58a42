//! k-NN neighborhood discovery over the memory bank and entropy-ranked
//! curriculum selection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::{dot, shannon_entropy};
use crate::probability::instance_probs;

/// Neighborhoods and curriculum selection for one training round.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodState {
    pub k: usize,
    /// 1-based round that produced this state.
    pub round: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub entropies: Vec<f64>,
    selected: Vec<bool>,
}

impl NeighborhoodState {
    /// Discovers neighbors and entropies from `bank` and selects the
    /// lowest-entropy fraction `ratio` of instances.
    pub fn build(bank: &MemoryBank, k: usize, tau: f64, ratio: f64, round: usize) -> Result<Self> {
        let neighbors = discover_neighbors(bank, k)?;
        let entropies = instance_entropies(bank, tau)?;
        let (selected_set, _) = select_curriculum(&entropies, ratio)?;
        let mut selected = vec![false; bank.len()];
        for i in selected_set {
            selected[i] = true;
        }
        Ok(NeighborhoodState {
            k,
            round,
            neighbors,
            entropies,
            selected,
        })
    }

    pub(crate) fn from_parts(
        k: usize,
        round: usize,
        neighbors: Vec<Vec<usize>>,
        entropies: Vec<f64>,
        selected: Vec<bool>,
    ) -> Result<Self> {
        let n = neighbors.len();
        if entropies.len() != n || selected.len() != n {
            return Err(Error::State("neighborhood arrays disagree in length".into()));
        }
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() != k || list.iter().any(|&j| j == i || j >= n) {
                return Err(Error::State(format!("invalid neighbor list for instance {i}")));
            }
        }
        Ok(NeighborhoodState {
            k,
            round,
            neighbors,
            entropies,
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.selected[i]
    }

    pub fn selected_flags(&self) -> &[bool] {
        &self.selected
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.selected[i]).collect()
    }

    pub fn complement(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.selected[i]).collect()
    }

    pub(crate) fn quantize(&mut self) {
        for h in &mut self.entropies {
            *h = *h as f32 as f64;
        }
    }
}

/// For each row, the `k` other rows with the largest dot product
/// (ties go to the lower index).
pub fn discover_neighbors(bank: &MemoryBank, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = bank.len();
    if k == 0 || k >= n {
        return Err(Error::param(format!(
            "neighborhood size must lie in [1, {}], got {k}",
            n.saturating_sub(1)
        )));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mi = bank.row(i);
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(bank.row(j), mi), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
            scored.sort_by(cmp);
            scored.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Entropy of each memory row's instance distribution.
pub fn instance_entropies(bank: &MemoryBank, tau: f64) -> Result<Vec<f64>> {
    (0..bank.len())
        .into_par_iter()
        .map(|i| instance_probs(bank, bank.row(i), tau).map(|p| shannon_entropy(&p)))
        .collect()
}

/// Splits instances into the `floor(ratio * N)` lowest-entropy ones and the rest.
pub fn select_curriculum(entropies: &[f64], ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::param(format!("selection ratio must lie in [0, 1], got {ratio}")));
    }
    let n = entropies.len();
    let take = ((ratio * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let mut selected = order[..take].to_vec();
    let mut complement = order[take..].to_vec();
    selected.sort_unstable();
    complement.sort_unstable();
    Ok((selected, complement))
}

/// Linear curriculum: round `r` of `R` selects `r / R` of the instances.
pub fn round_ratio(round_index: usize, total_rounds: usize) -> Result<f64> {
    if round_index == 0 || round_index > total_rounds {
        return Err(Error::param(format!(
            "round {round_index} outside 1..={total_rounds}"
        )));
    }
    Ok(round_index as f64 / total_rounds as f64)
}
