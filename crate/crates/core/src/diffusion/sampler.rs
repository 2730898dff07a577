//! Ancestral sampling of the reverse process, conditioned on occupancy.

use super::{check_shapes, Denoiser, DenoiserOutput, LatentState, Specials};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::schedule::NoiseSchedule;
use crate::voxel::{reconstruct, OccupancyMap, TokenSequence, Vocabulary, VoxelGrid};

pub const DEFAULT_SAMPLE_STEPS: usize = 256;

const LANE_UNMASK: u64 = 0;
const LANE_TOKEN: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    /// Reuse the previous step's distributions when nothing changed.
    pub cached: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { steps: DEFAULT_SAMPLE_STEPS, seed: 0, cached: true }
    }
}

/// States visited by one sampling run, from `t = 1` down to `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub seed: u64,
    pub steps: usize,
    pub states: Vec<(f64, LatentState)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub grid: VoxelGrid,
    pub sequence: TokenSequence,
    pub trace: SampleTrace,
    pub denoiser_calls: usize,
}

/// Draw a token at `slot` by inverse CDF over the permitted tokens. Falls
/// back to a uniform block when the model puts no mass on any of them.
fn draw(row: &[f64], allowed: impl Fn(u32) -> bool, n_blocks: u32, u: f64) -> u32 {
    let total: f64 = (0..row.len() as u32).filter(|&v| allowed(v)).map(|v| row[v as usize]).sum();
    if !(total > 0.0 && total.is_finite()) {
        return ((u * n_blocks as f64) as u32).min(n_blocks - 1);
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for v in (0..row.len() as u32).filter(|&v| allowed(v)) {
        if row[v as usize] <= 0.0 {
            continue;
        }
        acc += row[v as usize];
        last = v;
        if target < acc {
            return v;
        }
    }
    last
}

/// One reverse step `z_t → z_s` given the denoiser's distributions at `z_t`.
///
/// Unclamped MASK slots unmask with probability `(α_s − α_t)/(1 − α_t)`
/// using uniform `(step, slot, 0)`, and take a token drawn with uniform
/// `(step, slot, 1)`. With `blocks_only`, PAD is excluded from the draw.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    z: &LatentState,
    s: f64,
    t: f64,
    out: &DenoiserOutput,
    schedule: &NoiseSchedule,
    rng: &CounterRng,
    step: u64,
    blocks_only: bool,
) -> Result<LatentState> {
    let p = schedule.unmask_probability(s, t)?;
    let sp = Specials::for_total(out.vocab_total);
    if out.seq_len() != z.tokens.len() {
        return Err(Error::Shape(format!("{} distributions for {} slots", out.seq_len(), z.tokens.len())));
    }
    let mut next = z.clone();
    for (slot, tok) in next.tokens.iter_mut().enumerate() {
        if z.clamp[slot] || *tok != sp.mask {
            continue;
        }
        if rng.uniform(step, slot as u64, LANE_UNMASK) < p {
            let u = rng.uniform(step, slot as u64, LANE_TOKEN);
            *tok = draw(out.slot(slot), |v| sp.is_output(v) && !(blocks_only && v == sp.pad), sp.mask, u);
        }
    }
    Ok(next)
}

/// Generate a structure whose occupied voxels are exactly `occ`.
pub fn sample(
    occ: &OccupancyMap,
    model: &dyn Denoiser,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<SampleOutput> {
    if opts.steps < 1 {
        return Err(Error::domain("sampling with 0 steps"));
    }
    let len = model.seq_len();
    check_shapes(model, len, vocab.total())?;
    let positions = occ.slot_positions(len)?;
    let k = occ.k();
    let mut z = LatentState {
        tokens: (0..len).map(|i| if i < k { vocab.mask() } else { vocab.pad() }).collect(),
        clamp: (0..len).map(|i| i >= k).collect(),
    };
    let rng = CounterRng::new(opts.seed);
    let mut states = Vec::with_capacity(opts.steps + 1);
    states.push((1.0, z.clone()));
    let mut cache: Option<DenoiserOutput> = None;
    let mut calls = 0;
    for i in (1..=opts.steps).rev() {
        let t = i as f64 / opts.steps as f64;
        let s = (i - 1) as f64 / opts.steps as f64;
        if z.mask_count(vocab.mask()) > 0 {
            let reuse = opts.cached && !model.time_conditioned() && cache.is_some();
            if !reuse {
                cache = Some(model.denoise(&z.tokens, &positions, t)?);
                calls += 1;
            }
            let out = cache.as_ref().expect("distributions computed above");
            let next = reverse_step(&z, s, t, out, schedule, &rng, i as u64, true)?;
            if next != z {
                cache = None;
            }
            z = next;
        }
        states.push((s, z.clone()));
    }
    let sequence = TokenSequence { tokens: z.tokens, positions, k };
    let grid = reconstruct(&sequence, vocab, occ.dim)?;
    Ok(SampleOutput {
        grid,
        sequence,
        trace: SampleTrace { seed: opts.seed, steps: opts.steps, states },
        denoiser_calls: calls,
    })
}
