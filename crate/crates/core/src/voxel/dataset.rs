//! On-disk dataset directory produced by `ingest`:
//!
//! ```text
//! DIR/vocab.json        {"blocks":[...]}
//! DIR/index.json        {"dim":D,"seq_len":L,"houses":[{"id":..,"file":..,"k":..},...]}
//! DIR/structures/*.scfd one binary voxel file per structure
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    filter_dataset, parse_placements, read_voxels_binary, voxelize, write_voxels_binary, LineError,
    Vocabulary, VoxelGrid,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub file: String,
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    dim: u32,
    seq_len: usize,
    houses: Vec<DatasetEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dim: u32,
    pub seq_len: usize,
    pub vocab: Vocabulary,
    pub ids: Vec<String>,
    pub grids: Vec<VoxelGrid>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io_path(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().map_err(|e| Error::io_path(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io_path(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    if data.ids.len() != data.grids.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} grids",
            data.ids.len(),
            data.grids.len()
        )));
    }
    let structures = dir.join("structures");
    fs::create_dir_all(&structures).map_err(|e| Error::io_path(&structures, e))?;
    let mut houses = Vec::with_capacity(data.grids.len());
    for (i, (id, grid)) in data.ids.iter().zip(&data.grids).enumerate() {
        let file = format!("{i:05}.scfd");
        let path = structures.join(&file);
        let f = File::create(&path).map_err(|e| Error::io_path(&path, e))?;
        write_voxels_binary(grid, BufWriter::new(f))?;
        houses.push(DatasetEntry { id: id.clone(), file, k: grid.k() });
    }
    write_json(&dir.join("vocab.json"), &data.vocab)?;
    write_json(
        &dir.join("index.json"),
        &Index { dim: data.dim, seq_len: data.seq_len, houses },
    )
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
    let index: Index = read_json(&dir.join("index.json"))?;
    let mut ids = Vec::with_capacity(index.houses.len());
    let mut grids = Vec::with_capacity(index.houses.len());
    for entry in index.houses {
        let path = dir.join("structures").join(&entry.file);
        let f = File::open(&path).map_err(|e| Error::io_path(&path, e))?;
        let grid = read_voxels_binary(BufReader::new(f))?;
        if grid.k() != entry.k {
            return Err(Error::Format(format!(
                "{} holds {} voxels, index says {}",
                entry.file,
                grid.k(),
                entry.k
            )));
        }
        ids.push(entry.id);
        grids.push(grid);
    }
    Ok(Dataset { dim: index.dim, seq_len: index.seq_len, vocab, ids, grids })
}

/// Everything `ingest_log` learned about its input.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub houses: usize,
    pub accepted_lines: usize,
    pub line_errors: Vec<LineError>,
    pub rejected_empty: usize,
    pub rejected_too_many: usize,
    pub rejected_extent: usize,
}

/// Parse a placement log, voxelize each house into a `dim³` cube, and keep
/// structures with `1 ≤ k ≤ seq_len`.
pub fn ingest_log<R: BufRead>(reader: R, dim: u32, seq_len: usize) -> Result<Ingested> {
    let log = parse_placements(reader)?;
    let mut grids = Vec::with_capacity(log.houses.len());
    let mut ids = Vec::with_capacity(log.houses.len());
    let mut rejected_extent = 0;
    for house in &log.houses {
        match voxelize(&house.placements, dim) {
            Ok(g) => {
                grids.push(g);
                ids.push(house.id.clone());
            }
            Err(Error::StructureTooLarge { .. }) => rejected_extent += 1,
            Err(e) => return Err(e),
        }
    }
    let kept = filter_dataset(grids, seq_len, dim);
    let ids = kept.retained_indices.iter().map(|&i| ids[i].clone()).collect();
    let vocab = Vocabulary::from_grids(&kept.retained);
    Ok(Ingested {
        houses: log.houses.len(),
        accepted_lines: log.accepted,
        line_errors: log.errors,
        rejected_empty: kept.rejected_empty,
        rejected_too_many: kept.rejected_too_many,
        rejected_extent: rejected_extent + kept.rejected_extent,
        dataset: Dataset { dim, seq_len, vocab, ids, grids: kept.retained },
    })
}
