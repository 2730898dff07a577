//! Transformer denoiser over voxel-token sequences.
//!
//! Pre-norm blocks with feature-wise modulation of the normalized
//! activations (shift, scale, gate) computed from a time embedding, 3D
//! sinusoidal or learned positional codes, and a linear head over the full
//! token vocabulary. Forward and backward passes are hand-written over flat
//! `f64` parameter buffers.

mod checkpoint;
mod encoding;
mod forward;
pub(crate) mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};


pub use checkpoint::{
    read_checkpoint, write_checkpoint, ArrayData, Checkpoint, NamedArray, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, EMA_PREFIX,
};
pub use encoding::{positional_encoding_3d, time_embedding, FREQUENCY_BASE, TIME_SCALE};
pub use forward::{ForwardPass, SeqInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    Sinusoidal3d,
    Learned,
}

/// Row key of the learned positional table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnedKey {
    /// `x·D² + y·D + z`
    Voxel,
    /// slot index in the sequence
    Slot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub seq_len: usize,
    /// Block categories plus MASK, PAD, BOS (in that order, at the end).
    pub vocab_total: usize,
    /// Cube side, bounds the positions fed to the encoder.
    pub dim: u32,
    pub pe_mode: PeMode,
    pub learned_key: LearnedKey,
    pub time_conditioning: bool,
    /// Causal attention, for next-token prediction.
    pub causal: bool,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            heads: 12,
            width: 768,
            seq_len: 1024,
            vocab_total: 256,
            dim: 32,
            pe_mode: PeMode::Sinusoidal3d,
            learned_key: LearnedKey::Voxel,
            time_conditioning: true,
            causal: false,
            ffn_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.seq_len == 0 {
            return bad("depth, heads, width and seq_len must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if !self.width.is_multiple_of(2) {
            return bad(format!("width {} must be even", self.width));
        }
        if self.pe_mode == PeMode::Sinusoidal3d && !self.width.is_multiple_of(6) {
            return bad(format!("width {} must be a multiple of 6 for 3D sinusoidal codes", self.width));
        }
        if self.vocab_total < 4 {
            return bad(format!("vocab_total {} leaves no block tokens", self.vocab_total));
        }
        if self.dim == 0 || self.dim > u16::MAX as u32 {
            return bad(format!("cube side {}", self.dim));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab_total as u32 - 3
    }

    pub fn pad_token(&self) -> u32 {
        self.vocab_total as u32 - 2
    }

    pub fn bos_token(&self) -> u32 {
        self.vocab_total as u32 - 1
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn learned_rows(&self) -> usize {
        match self.learned_key {
            LearnedKey::Voxel => (self.dim as usize).pow(3),
            LearnedKey::Slot => self.seq_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// A named slice of the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub(crate) init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    /// modulation weight and bias, present with time conditioning
    pub modulation: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub(crate) struct CondIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub final_w: usize,
    pub final_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Index {
    pub tok: usize,
    pub pos_table: Option<usize>,
    pub cond: Option<CondIdx>,
    pub blocks: Vec<BlockIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Embedding scale shared by token rows and learned position rows, close to
/// the RMS of a sinusoidal code.
const EMBED_STD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    specs: Vec<ParamSpec>,
    total: usize,
    pub(crate) idx: Index,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name, shape: shape.to_vec(), offset, init };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let f = config.ffn_width();
        let v = config.vocab_total;
        let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
        let resid = |n: usize| Init::Normal(1.0 / (n as f64 * 2.0 * config.depth as f64).sqrt());

        let mut b = LayoutBuilder { specs: Vec::new(), total: 0 };
        let tok = b.add("tok_emb".into(), &[v, w], Init::Normal(EMBED_STD));
        let pos_table = (config.pe_mode == PeMode::Learned)
            .then(|| b.add("pos_table".into(), &[config.learned_rows(), w], Init::Normal(EMBED_STD)));
        let mut cond = config.time_conditioning.then(|| CondIdx {
            w1: b.add("time.w1".into(), &[w, w], fan(w)),
            b1: b.add("time.b1".into(), &[w], Init::Zeros),
            w2: b.add("time.w2".into(), &[w, w], fan(w)),
            b2: b.add("time.b2".into(), &[w], Init::Zeros),
            final_w: 0,
            final_b: 0,
        });
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockIdx {
                modulation: config.time_conditioning.then(|| {
                    (
                        b.add(n("mod.w"), &[w, 6 * w], Init::Zeros),
                        b.add(n("mod.b"), &[6 * w], Init::Zeros),
                    )
                }),
                ln1_g: b.add(n("ln1.g"), &[w], Init::Ones),
                ln1_b: b.add(n("ln1.b"), &[w], Init::Zeros),
                qkv_w: b.add(n("attn.qkv.w"), &[w, 3 * w], fan(w)),
                qkv_b: b.add(n("attn.qkv.b"), &[3 * w], Init::Zeros),
                out_w: b.add(n("attn.out.w"), &[w, w], resid(w)),
                out_b: b.add(n("attn.out.b"), &[w], Init::Zeros),
                ln2_g: b.add(n("ln2.g"), &[w], Init::Ones),
                ln2_b: b.add(n("ln2.b"), &[w], Init::Zeros),
                ff1_w: b.add(n("ff.w1"), &[w, f], fan(w)),
                ff1_b: b.add(n("ff.b1"), &[f], Init::Zeros),
                ff2_w: b.add(n("ff.w2"), &[f, w], resid(f)),
                ff2_b: b.add(n("ff.b2"), &[w], Init::Zeros),
            });
        }
        if let Some(c) = cond.as_mut() {
            c.final_w = b.add("final.mod.w".into(), &[w, 2 * w], Init::Zeros);
            c.final_b = b.add("final.mod.b".into(), &[2 * w], Init::Zeros);
        }
        let lnf_g = b.add("final.ln.g".into(), &[w], Init::Ones);
        let lnf_b = b.add("final.ln.b".into(), &[w], Init::Zeros);
        let head_w = b.add("head.w".into(), &[w, v], Init::Zeros);
        let head_b = b.add("head.b".into(), &[v], Init::Zeros);

        Ok(Self {
            config,
            specs: b.specs,
            total: b.total,
            idx: Index { tok, pos_table, cond, blocks, lnf_g, lnf_b, head_w, head_b },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.total
    }

    /// Name of the parameter holding flat index `i`.
    pub fn param_name(&self, i: usize) -> &str {
        self.specs
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
            .unwrap_or("?")
    }

    /// Fresh parameters. Modulation layers and the output head start at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        for s in &self.specs {
            let dst = &mut p[s.range()];
            match s.init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    dst.iter_mut().for_each(|v| *v = d.sample(rng));
                }
            }
        }
        p
    }

    /// Parameters with every entry drawn at random, including the ones
    /// [`Backbone::init`] zeroes. Useful when every path must be exercised.
    pub fn init_dense<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> Vec<f64> {
        let d = Normal::new(0.0, std).expect("finite std");
        let mut p = self.init(rng);
        for s in &self.specs {
            let dst = &mut p[s.range()];
            match s.init {
                Init::Ones => dst.iter_mut().for_each(|v| *v = 1.0 + d.sample(rng)),
                _ => dst.iter_mut().for_each(|v| *v += d.sample(rng)),
            }
        }
        p
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.total {
            return Err(Error::Shape(format!(
                "{} parameters for a backbone of {}",
                params.len(),
                self.total
            )));
        }
        Ok(())
    }
}
