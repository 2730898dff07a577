//! Binary checkpoint container, little-endian throughout:
//!
//! ```text
//! "SCKP" | u32 version
//! config: u32 depth, heads, width, seq_len, vocab_total
//!         u8 pe_mode, u8 time_conditioning
//!         u32 dim, u8 learned_key, u8 causal, u32 ffn_mult
//! u32 array count, then per array:
//!   u32 name length | utf-8 name | u8 dtype | u32 rank | rank × u32 dims | raw data
//! ```
//!
//! Model weights use their layout names, EMA weights the same names under
//! `ema/`. Any other arrays (optimizer moments, trainer state) ride along.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Backbone, BackboneConfig, LearnedKey, PeMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EMA_PREFIX: &str = "ema/";

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(config: BackboneConfig) -> Self {
        Self { config, arrays: Vec::new() }
    }

    /// Weights plus an optional EMA copy.
    pub fn from_model(backbone: &Backbone, params: &[f64], ema: Option<&[f64]>) -> Result<Self> {
        let mut ck = Self::new(backbone.config().clone());
        ck.push_flat("", backbone, params)?;
        if let Some(ema) = ema {
            ck.push_flat(EMA_PREFIX, backbone, ema)?;
        }
        Ok(ck)
    }

    /// Split a flat buffer laid out like `backbone` into named arrays.
    pub fn push_flat(&mut self, prefix: &str, backbone: &Backbone, flat: &[f64]) -> Result<()> {
        backbone.check_params(flat)?;
        for s in backbone.specs() {
            self.arrays.push(NamedArray {
                name: format!("{prefix}{}", s.name),
                shape: s.shape.clone(),
                data: ArrayData::F64(flat[s.range()].to_vec()),
            });
        }
        Ok(())
    }

    /// Reassemble a flat buffer from arrays stored under `prefix`.
    pub fn gather_flat(&self, prefix: &str, backbone: &Backbone) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; backbone.num_params()];
        for s in backbone.specs() {
            let name = format!("{prefix}{}", s.name);
            let arr = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks array {name}")))?;
            let ArrayData::F64(data) = &arr.data else {
                return Err(Error::Format(format!("array {name} is not f64")));
            };
            if arr.shape != s.shape {
                return Err(Error::Format(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    arr.shape, s.shape
                )));
            }
            flat[s.range()].copy_from_slice(data);
        }
        Ok(flat)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|a| a.name.starts_with(prefix))
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn push_u64(&mut self, name: &str, values: Vec<u64>) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: vec![values.len()],
            data: ArrayData::U64(values),
        });
    }

    pub fn get_u64(&self, name: &str) -> Option<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Some(v),
            ArrayData::F64(_) => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for v in [c.depth, c.heads, c.width, c.seq_len, c.vocab_total] {
            put_u32(&mut out, v as u32);
        }
        out.push(match c.pe_mode {
            PeMode::Sinusoidal3d => 0,
            PeMode::Learned => 1,
        });
        out.push(c.time_conditioning as u8);
        put_u32(&mut out, c.dim);
        out.push(match c.learned_key {
            LearnedKey::Voxel => 0,
            LearnedKey::Slot => 1,
        });
        out.push(c.causal as u8);
        put_u32(&mut out, c.ffn_mult as u32);

        put_u32(&mut out, self.arrays.len() as u32);
        for a in &self.arrays {
            put_u32(&mut out, a.name.len() as u32);
            out.extend_from_slice(a.name.as_bytes());
            match &a.data {
                ArrayData::F64(_) => out.push(DTYPE_F64),
                ArrayData::U64(_) => out.push(DTYPE_U64),
            }
            put_u32(&mut out, a.shape.len() as u32);
            for &d in &a.shape {
                put_u32(&mut out, d as u32);
            }
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing SCKP header".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut head = [0usize; 5];
        for h in &mut head {
            *h = r.u32()? as usize;
        }
        let pe_mode = match r.u8()? {
            0 => PeMode::Sinusoidal3d,
            1 => PeMode::Learned,
            x => return Err(Error::Format(format!("pe_mode tag {x}"))),
        };
        let time_conditioning = r.u8()? != 0;
        let dim = r.u32()?;
        let learned_key = match r.u8()? {
            0 => LearnedKey::Voxel,
            1 => LearnedKey::Slot,
            x => return Err(Error::Format(format!("learned_key tag {x}"))),
        };
        let causal = r.u8()? != 0;
        let ffn_mult = r.u32()? as usize;
        let config = BackboneConfig {
            depth: head[0],
            heads: head[1],
            width: head[2],
            seq_len: head[3],
            vocab_total: head[4],
            dim,
            pe_mode,
            learned_key,
            time_conditioning,
            causal,
            ffn_mult,
        };

        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("array name is not utf-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let data = match dtype {
                DTYPE_F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                DTYPE_U64 => ArrayData::U64(words.map(u64::from_le_bytes).collect()),
                x => return Err(Error::Format(format!("dtype tag {x} on {name}"))),
            };
            debug_assert_eq!(data.len(), len);
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self { config, arrays })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Write atomically: a sibling temp file is renamed over `path`.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io_path(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&ck.to_bytes()).map_err(|e| Error::io_path(&tmp, e))?;
        w.into_inner()
            .map_err(|e| Error::io_path(&tmp, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io_path(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io_path(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_path(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    ck.config.validate()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone() -> Backbone {
        Backbone::new(BackboneConfig {
            depth: 1,
            heads: 2,
            width: 12,
            seq_len: 4,
            vocab_total: 5,
            dim: 4,
            pe_mode: PeMode::Learned,
            learned_key: LearnedKey::Slot,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn file_roundtrip_preserves_bits() {
        let bb = backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = bb.init_dense(&mut rng, 1.0);
        let ema: Vec<f64> = params.iter().map(|p| p * 0.5).collect();
        let mut ck = Checkpoint::from_model(&bb, &params, Some(&ema)).unwrap();
        ck.push_u64("train/state", vec![17, u64::MAX]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.gather_flat("", &bb).unwrap(), params);
        assert_eq!(back.gather_flat(EMA_PREFIX, &bb).unwrap(), ema);
        assert_eq!(back.get_u64("train/state"), Some(&[17, u64::MAX][..]));
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn header_layout() {
        let bb = backbone();
        let bytes = Checkpoint::new(bb.config().clone()).to_bytes();
        assert_eq!(&bytes[..4], b"SCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1); // depth
        assert_eq!(bytes[28], 1); // learned positions
    }

    #[test]
    fn rejects_corruption() {
        let bb = backbone();
        let params = bb.init(&mut ChaCha8Rng::seed_from_u64(0));
        let bytes = Checkpoint::from_model(&bb, &params, None).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(ck.gather_flat(EMA_PREFIX, &bb).is_err());
    }
}
