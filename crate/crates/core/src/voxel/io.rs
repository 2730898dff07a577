//! Structure and occupancy file formats.
//!
//! * voxel JSON: `{"dim":D,"voxels":[{"x":..,"y":..,"z":..,"id":..},...]}`
//! * voxel binary: `SCFD`, u32 dim, u32 count, then `count` records of
//!   u16 x, y, z, id; all little-endian
//! * occupancy JSON: `{"dim":D,"occupied":[[x,y,z],...]}`

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Coord, OccupancyMap, VoxelGrid};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"SCFD";

#[derive(Serialize, Deserialize)]
struct VoxelRecord {
    x: u16,
    y: u16,
    z: u16,
    id: u16,
}

#[derive(Serialize, Deserialize)]
struct VoxelFile {
    dim: u32,
    voxels: Vec<VoxelRecord>,
}

#[derive(Serialize, Deserialize)]
struct OccupancyFile {
    dim: u32,
    occupied: Vec<[u16; 3]>,
}

fn block_id(id: u16) -> Result<u8> {
    u8::try_from(id).map_err(|_| Error::Format(format!("block id {id} outside [0, 255]")))
}

pub fn write_voxels_json<W: Write>(grid: &VoxelGrid, w: W) -> Result<()> {
    let file = VoxelFile {
        dim: grid.dim(),
        voxels: grid
            .cells()
            .map(|(c, id)| VoxelRecord { x: c.x, y: c.y, z: c.z, id: id as u16 })
            .collect(),
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn read_voxels_json<R: Read>(r: R) -> Result<VoxelGrid> {
    let file: VoxelFile = serde_json::from_reader(r)?;
    let mut grid = VoxelGrid::new(file.dim);
    for v in file.voxels {
        let c = Coord::new(v.x, v.y, v.z);
        if grid.get(&c).is_some() {
            return Err(Error::DuplicatePosition { x: c.x, y: c.y, z: c.z });
        }
        grid.insert(c, block_id(v.id)?)?;
    }
    Ok(grid)
}

pub fn write_voxels_binary<W: Write>(grid: &VoxelGrid, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * grid.k());
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&grid.dim().to_le_bytes());
    buf.extend_from_slice(&(grid.k() as u32).to_le_bytes());
    for (c, id) in grid.cells() {
        for v in [c.x, c.y, c.z, id as u16] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_voxels_binary<R: Read>(mut r: R) -> Result<VoxelGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Format("missing SCFD header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let dim = u32_at(4);
    let count = u32_at(8) as usize;
    let body = &bytes[12..];
    if body.len() != count * 8 {
        return Err(Error::Format(format!(
            "SCFD body holds {} bytes, header announces {count} records",
            body.len()
        )));
    }
    let mut grid = VoxelGrid::new(dim);
    for rec in body.chunks_exact(8) {
        let f = |i: usize| u16::from_le_bytes([rec[2 * i], rec[2 * i + 1]]);
        let c = Coord::new(f(0), f(1), f(2));
        if grid.get(&c).is_some() {
            return Err(Error::DuplicatePosition { x: c.x, y: c.y, z: c.z });
        }
        grid.insert(c, block_id(f(3))?)?;
    }
    Ok(grid)
}

pub fn write_occupancy_json<W: Write>(occ: &OccupancyMap, w: W) -> Result<()> {
    let file = OccupancyFile {
        dim: occ.dim,
        occupied: occ.occupied.iter().map(|c| [c.x, c.y, c.z]).collect(),
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn read_occupancy_json<R: Read>(r: R) -> Result<OccupancyMap> {
    let file: OccupancyFile = serde_json::from_reader(r)?;
    let n = file.occupied.len();
    let occ = OccupancyMap::new(file.dim, file.occupied.into_iter().map(|[x, y, z]| Coord::new(x, y, z)))?;
    if occ.k() != n {
        return Err(Error::Format("occupancy lists a voxel twice".into()));
    }
    Ok(occ)
}
