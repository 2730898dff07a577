use std::collections::BTreeMap;

use serde::Serialize;

use super::VoxelGrid;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct SparsityStats {
    pub structures: usize,
    /// Mean over grids of `1 − k/D³`.
    pub mean_background: f64,
    pub mean_k: f64,
    /// Number of grids per occupied count `k`.
    pub k_histogram: BTreeMap<usize, usize>,
    /// Voxel count per block id, pooled over all grids.
    pub category_histogram: BTreeMap<u8, usize>,
}

pub fn sparsity_stats(grids: &[VoxelGrid], dim: u32) -> Result<SparsityStats> {
    if grids.is_empty() {
        return Err(Error::Empty("grid list"));
    }
    let volume = (dim as f64).powi(3);
    let mut k_histogram = BTreeMap::new();
    let mut category_histogram = BTreeMap::new();
    let mut background = 0.0;
    let mut total_k = 0usize;
    for g in grids {
        background += 1.0 - g.k() as f64 / volume;
        total_k += g.k();
        *k_histogram.entry(g.k()).or_insert(0) += 1;
        for (_, id) in g.cells() {
            *category_histogram.entry(id).or_insert(0) += 1;
        }
    }
    Ok(SparsityStats {
        structures: grids.len(),
        mean_background: background / grids.len() as f64,
        mean_k: total_k as f64 / grids.len() as f64,
        k_histogram,
        category_histogram,
    })
}
