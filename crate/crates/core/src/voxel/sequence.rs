use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Coord, VoxelGrid, AIR};
use crate::error::{Error, Result};

/// Dense token ids for the observed block categories, followed by the three
/// special tokens `MASK`, `PAD` and `BOS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    blocks: Vec<u8>,
    lookup: Vec<Option<u32>>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    blocks: Vec<u8>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;
    fn try_from(f: VocabularyFile) -> Result<Self> {
        Vocabulary::new(f.blocks)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile { blocks: v.blocks }
    }
}

impl Vocabulary {
    /// Token `i` stands for `blocks[i]`.
    pub fn new(blocks: Vec<u8>) -> Result<Self> {
        let mut lookup = vec![None; 256];
        for (tok, &b) in blocks.iter().enumerate() {
            if b == AIR {
                return Err(Error::domain("air block in vocabulary"));
            }
            if lookup[b as usize].replace(tok as u32).is_some() {
                return Err(Error::domain(format!("block id {b} listed twice in vocabulary")));
            }
        }
        Ok(Self { blocks, lookup })
    }

    /// Vocabulary of every block id observed in `grids`, in ascending order.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a VoxelGrid>) -> Self {
        let ids: BTreeSet<u8> = grids
            .into_iter()
            .flat_map(|g| g.cells().map(|(_, id)| id))
            .collect();
        Self::new(ids.into_iter().collect()).expect("set has no duplicates and no air")
    }

    /// `|V|`, the number of block categories.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block categories plus specials.
    pub fn total(&self) -> usize {
        self.blocks.len() + 3
    }

    pub fn mask(&self) -> u32 {
        self.blocks.len() as u32
    }

    pub fn pad(&self) -> u32 {
        self.blocks.len() as u32 + 1
    }

    pub fn bos(&self) -> u32 {
        self.blocks.len() as u32 + 2
    }

    pub fn is_block(&self, token: u32) -> bool {
        (token as usize) < self.blocks.len()
    }

    pub fn token(&self, block: u8) -> Option<u32> {
        self.lookup[block as usize]
    }

    pub fn block(&self, token: u32) -> Option<u8> {
        self.blocks.get(token as usize).copied()
    }

    pub fn blocks(&self) -> &[u8] {
        &self.blocks
    }
}

/// A length-`L` token vector with one position per slot. Slots `[0, k)` are
/// active; the rest hold PAD at the sentinel position (`None`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<Option<Coord>>,
    pub k: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Flatten the occupied voxels of `grid` into a sequence in lexicographic
/// `(x, y, z)` order, padded to `len`.
pub fn extract_sequence(grid: &VoxelGrid, len: usize, vocab: &Vocabulary) -> Result<TokenSequence> {
    let order: Vec<Coord> = grid.cells().map(|(c, _)| c).collect();
    extract_sequence_in_order(grid, &order, len, vocab)
}

/// Flatten `grid` following an explicit slot order, which must list every
/// occupied voxel exactly once.
pub fn extract_sequence_in_order(
    grid: &VoxelGrid,
    order: &[Coord],
    len: usize,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let k = grid.k();
    if k > len {
        return Err(Error::SequenceOverflow { k, len });
    }
    if order.len() != k {
        return Err(Error::Shape(format!(
            "slot order lists {} voxels, grid has {k}",
            order.len()
        )));
    }
    let mut tokens = Vec::with_capacity(len);
    let mut positions = Vec::with_capacity(len);
    for c in order {
        let block = grid
            .get(c)
            .ok_or_else(|| Error::domain(format!("slot order names empty voxel {c:?}")))?;
        let tok = vocab
            .token(block)
            .ok_or_else(|| Error::domain(format!("block id {block} not in vocabulary")))?;
        tokens.push(tok);
        positions.push(Some(*c));
    }
    tokens.resize(len, vocab.pad());
    positions.resize(len, None);
    Ok(TokenSequence { tokens, positions, k })
}

/// Rebuild a grid from the active slots of a sequence.
pub fn reconstruct(seq: &TokenSequence, vocab: &Vocabulary, dim: u32) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(dim);
    for slot in 0..seq.k {
        let token = seq.tokens[slot];
        if token == vocab.mask() {
            return Err(Error::IncompleteSample { slot });
        }
        let block = vocab
            .block(token)
            .ok_or(Error::InvalidToken { slot, token })?;
        let c = seq.positions[slot]
            .ok_or_else(|| Error::domain(format!("active slot {slot} without a position")))?;
        if !c.in_cube(dim) {
            return Err(Error::domain(format!("slot {slot} position {c:?} in cube of side {dim}")));
        }
        if grid.get(&c).is_some() {
            return Err(Error::DuplicatePosition { x: c.x, y: c.y, z: c.z });
        }
        grid.insert(c, block)?;
    }
    Ok(grid)
}
