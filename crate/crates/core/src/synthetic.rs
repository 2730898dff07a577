//! Toy voxel datasets whose categories follow a known rule of position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::voxel::{Coord, Dataset, Vocabulary, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategoryRule {
    /// `(x mod 2) + 2·(y mod 2)`: 4 categories.
    Parity,
    /// `(x mod 4) + 4·(y mod 2)`: 8 categories, constant along `z`.
    Stripes,
}

impl CategoryRule {
    pub fn categories(self) -> u8 {
        match self {
            CategoryRule::Parity => 4,
            CategoryRule::Stripes => 8,
        }
    }

    /// Block id (1-based) the rule assigns to `c`.
    pub fn block(self, c: Coord) -> u8 {
        let cat = match self {
            CategoryRule::Parity => (c.x % 2) + 2 * (c.y % 2),
            CategoryRule::Stripes => (c.x % 4) + 4 * (c.y % 2),
        };
        1 + cat as u8
    }

    /// Fraction of voxels in `g` that follow the rule.
    pub fn accuracy(self, g: &VoxelGrid) -> f64 {
        if g.is_empty() {
            return 1.0;
        }
        g.cells().filter(|&(c, b)| self.block(c) == b).count() as f64 / g.k() as f64
    }
}

/// Hollow boxes with a few voxels knocked out, coloured by `rule`. Each
/// structure has between 4 and `max_k` voxels.
pub fn toy_houses(n: usize, dim: u32, max_k: usize, rule: CategoryRule, seed: u64) -> Result<Vec<VoxelGrid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dim as u16;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let side = |rng: &mut ChaCha8Rng| rng.random_range(2..=d.min(4));
        let (sx, sy, sz) = (side(&mut rng), side(&mut rng), side(&mut rng));
        let (ox, oy, oz) = (rng.random_range(0..=d - sx), rng.random_range(0..=d - sy), rng.random_range(0..=d - sz));
        let mut shell = Vec::new();
        for x in 0..sx {
            for y in 0..sy {
                for z in 0..sz {
                    let on_face = x == 0 || y == 0 || z == 0 || x == sx - 1 || y == sy - 1 || z == sz - 1;
                    if on_face {
                        shell.push(Coord::new(ox + x, oy + y, oz + z));
                    }
                }
            }
        }
        shell.shuffle(&mut rng);
        let hi = shell.len().min(max_k);
        if hi < 4 {
            continue;
        }
        let keep = rng.random_range(4..=hi);
        let grid = VoxelGrid::from_cells(dim, shell[..keep].iter().map(|&c| (c, rule.block(c))))?;
        out.push(grid);
    }
    Ok(out)
}

pub fn toy_dataset(n: usize, dim: u32, seq_len: usize, rule: CategoryRule, seed: u64) -> Result<Dataset> {
    let grids = toy_houses(n, dim, seq_len, rule, seed)?;
    let vocab = Vocabulary::new((1..=rule.categories()).collect())?;
    Ok(Dataset { dim, seq_len, vocab, ids: (0..n).map(|i| format!("toy{i:04}")).collect(), grids })
}
