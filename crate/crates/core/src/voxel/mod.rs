//! Voxel structures: placement logs, grids, occupancy maps and the
//! token sequences the diffusion model operates on.

mod dataset;
mod io;
mod parse;
mod sequence;
mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{ingest_log, read_dataset, write_dataset, Dataset, DatasetEntry, Ingested};
pub use io::{
    read_occupancy_json, read_voxels_binary, read_voxels_json, write_occupancy_json,
    write_voxels_binary, write_voxels_json, BINARY_MAGIC,
};
pub use parse::{parse_placements, House, LineError, ParsedLog};
pub use sequence::{
    extract_sequence, extract_sequence_in_order, reconstruct, TokenSequence, Vocabulary,
};
pub use stats::{sparsity_stats, SparsityStats};

/// Minecraft's air block. Placing it removes whatever occupied the voxel.
pub const AIR: u8 = 0;

/// A voxel coordinate inside a `D³` cube. Ordering is lexicographic in
/// `(x, y, z)`, which is also the canonical slot order of a sequence.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Coord {
    pub x: u16,
    pub y: u16,
    pub z: u16,
}

impl Coord {
    pub const fn new(x: u16, y: u16, z: u16) -> Self {
        Self { x, y, z }
    }

    pub fn in_cube(&self, dim: u32) -> bool {
        (self.x as u32) < dim && (self.y as u32) < dim && (self.z as u32) < dim
    }

    /// Row-major key `x·D² + y·D + z`.
    pub fn flat_index(&self, dim: u32) -> usize {
        let d = dim as usize;
        (self.x as usize * d + self.y as usize) * d + self.z as usize
    }
}

/// One record of a placement log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlacement {
    pub house_id: String,
    pub x: i64,
    pub y: i64,
    pub z: i64,
    pub block_id: u8,
    pub timestamp: i64,
}

/// A sparse `D³` voxel structure. Only occupied cells are stored, keyed by
/// coordinate and holding the original block id (never air).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dim: u32,
    cells: BTreeMap<Coord, u8>,
}

impl VoxelGrid {
    pub fn new(dim: u32) -> Self {
        Self {
            dim,
            cells: BTreeMap::new(),
        }
    }

    pub fn from_cells(dim: u32, cells: impl IntoIterator<Item = (Coord, u8)>) -> Result<Self> {
        let mut grid = Self::new(dim);
        for (c, id) in cells {
            grid.insert(c, id)?;
        }
        Ok(grid)
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Number of occupied voxels.
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, c: &Coord) -> Option<u8> {
        self.cells.get(c).copied()
    }

    /// Occupied cells in lexicographic order.
    pub fn cells(&self) -> impl Iterator<Item = (Coord, u8)> + '_ {
        self.cells.iter().map(|(c, id)| (*c, *id))
    }

    pub fn insert(&mut self, c: Coord, block: u8) -> Result<()> {
        if !c.in_cube(self.dim) {
            return Err(Error::domain(format!(
                "coordinate ({}, {}, {}) in a cube of side {}",
                c.x, c.y, c.z, self.dim
            )));
        }
        if block == AIR {
            self.cells.remove(&c);
        } else {
            self.cells.insert(c, block);
        }
        Ok(())
    }

    /// Bounding-box size along each axis, `[0, 0, 0]` when empty.
    pub fn extent(&self) -> [u32; 3] {
        if self.cells.is_empty() {
            return [0; 3];
        }
        let mut lo = [u16::MAX; 3];
        let mut hi = [0u16; 3];
        for c in self.cells.keys() {
            for (axis, v) in [c.x, c.y, c.z].into_iter().enumerate() {
                lo[axis] = lo[axis].min(v);
                hi[axis] = hi[axis].max(v);
            }
        }
        [0, 1, 2].map(|a| (hi[a] - lo[a]) as u32 + 1)
    }

    pub fn occupancy(&self) -> OccupancyMap {
        OccupancyMap {
            dim: self.dim,
            occupied: self.cells.keys().copied().collect(),
        }
    }

    /// Same cells in a cube of a different side. Fails if a cell falls outside.
    pub fn with_dim(&self, dim: u32) -> Result<Self> {
        Self::from_cells(dim, self.cells())
    }
}

/// Boolean occupancy of a `D³` cube: which voxels are non-background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMap {
    pub dim: u32,
    pub occupied: BTreeSet<Coord>,
}

impl OccupancyMap {
    pub fn new(dim: u32, occupied: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let occupied: BTreeSet<Coord> = occupied.into_iter().collect();
        if let Some(c) = occupied.iter().find(|c| !c.in_cube(dim)) {
            return Err(Error::domain(format!(
                "occupied coordinate ({}, {}, {}) in a cube of side {dim}",
                c.x, c.y, c.z
            )));
        }
        Ok(Self { dim, occupied })
    }

    pub fn k(&self) -> usize {
        self.occupied.len()
    }

    /// Slot positions for a length-`len` sequence: occupied coordinates in
    /// canonical order followed by PAD sentinels.
    pub fn slot_positions(&self, len: usize) -> Result<Vec<Option<Coord>>> {
        if self.k() > len {
            return Err(Error::SequenceOverflow { k: self.k(), len });
        }
        let mut positions: Vec<Option<Coord>> = self.occupied.iter().copied().map(Some).collect();
        positions.resize(len, None);
        Ok(positions)
    }
}

/// Replay placements into a grid of side `dim`.
///
/// Later placements overwrite earlier ones and air deletes. The surviving
/// structure is translated so its minimum corner sits at the origin.
pub fn voxelize(placements: &[BlockPlacement], dim: u32) -> Result<VoxelGrid> {
    voxelize_with_order(placements, dim).map(|(grid, _)| grid)
}

/// Like [`voxelize`], also returning the occupied coordinates ordered by the
/// time of their surviving placement.
pub fn voxelize_with_order(
    placements: &[BlockPlacement],
    dim: u32,
) -> Result<(VoxelGrid, Vec<Coord>)> {
    if placements.is_empty() {
        return Err(Error::Empty("placement list"));
    }
    // (block, sequence number of the write that put it there)
    let mut world: HashMap<[i64; 3], (u8, usize)> = HashMap::new();
    for (seq, p) in placements.iter().enumerate() {
        let key = [p.x, p.y, p.z];
        if p.block_id == AIR {
            world.remove(&key);
        } else {
            world.insert(key, (p.block_id, seq));
        }
    }
    if world.is_empty() {
        return Ok((VoxelGrid::new(dim), Vec::new()));
    }

    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for key in world.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(key[a]);
            hi[a] = hi[a].max(key[a]);
        }
    }
    for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
        let extent = (hi[a] - lo[a]) as u64 + 1;
        if extent > dim as u64 || extent > u16::MAX as u64 {
            return Err(Error::StructureTooLarge { axis, extent, dim });
        }
    }

    let mut grid = VoxelGrid::new(dim);
    let mut order: Vec<(usize, Coord)> = Vec::with_capacity(world.len());
    for (key, (block, seq)) in world {
        let c = Coord::new(
            (key[0] - lo[0]) as u16,
            (key[1] - lo[1]) as u16,
            (key[2] - lo[2]) as u16,
        );
        grid.cells.insert(c, block);
        order.push((seq, c));
    }
    order.sort_unstable();
    Ok((grid, order.into_iter().map(|(_, c)| c).collect()))
}

/// Result of [`filter_dataset`].
#[derive(Clone, Debug, Default)]
pub struct FilterOutcome {
    pub retained: Vec<VoxelGrid>,
    /// Indices into the input of the retained grids.
    pub retained_indices: Vec<usize>,
    pub rejected_empty: usize,
    pub rejected_too_many: usize,
    pub rejected_extent: usize,
}

impl FilterOutcome {
    pub fn rejected(&self) -> usize {
        self.rejected_empty + self.rejected_too_many + self.rejected_extent
    }
}

/// Keep grids with `1 ≤ k ≤ seq_len` whose extent fits a `dim³` cube.
/// Retained grids are re-expressed in a cube of side `dim`.
pub fn filter_dataset(grids: Vec<VoxelGrid>, seq_len: usize, dim: u32) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (i, grid) in grids.into_iter().enumerate() {
        if grid.is_empty() {
            out.rejected_empty += 1;
        } else if grid.k() > seq_len {
            out.rejected_too_many += 1;
        } else if grid.extent().iter().any(|&e| e > dim) {
            out.rejected_extent += 1;
        } else {
            match grid.with_dim(dim) {
                Ok(g) => {
                    out.retained.push(g);
                    out.retained_indices.push(i);
                }
                // occupied cells sit away from the origin; shift them in
                Err(_) => {
                    out.retained.push(translate_to_origin(&grid, dim));
                    out.retained_indices.push(i);
                }
            }
        }
    }
    log::info!(
        "filter: retained {} rejected {} (empty {}, k>{} {}, extent>{} {})",
        out.retained.len(),
        out.rejected(),
        out.rejected_empty,
        seq_len,
        out.rejected_too_many,
        dim,
        out.rejected_extent
    );
    out
}

fn translate_to_origin(grid: &VoxelGrid, dim: u32) -> VoxelGrid {
    let lo = grid.cells.keys().fold([u16::MAX; 3], |lo, c| {
        [lo[0].min(c.x), lo[1].min(c.y), lo[2].min(c.z)]
    });
    VoxelGrid {
        dim,
        cells: grid
            .cells()
            .map(|(c, id)| (Coord::new(c.x - lo[0], c.y - lo[1], c.z - lo[2]), id))
            .collect(),
    }
}
