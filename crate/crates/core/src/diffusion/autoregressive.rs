//! Next-token baseline over the same slot order.

use super::loss::{evaluate_items, LossEstimate, LossItem, LossScope};
use super::{check_shapes, Denoiser, Specials};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::CounterRng;
use crate::voxel::{reconstruct, OccupancyMap, TokenSequence, Vocabulary, VoxelGrid};

/// Shift right by one with BOS in front. Slot `i` of the result is the
/// token preceding slot `i`, while positions stay those of slot `i`.
pub fn ar_inputs(seq: &TokenSequence, bos: u32) -> Vec<u32> {
    let mut input = Vec::with_capacity(seq.len());
    input.push(bos);
    input.extend_from_slice(&seq.tokens[..seq.len().saturating_sub(1)]);
    input
}

/// Mean per-token cross-entropy of each token given its predecessors.
pub fn loss_autoregressive(
    batch: &[TokenSequence],
    model: &dyn Denoiser,
    scope: LossScope,
    exec: Execution,
) -> Result<LossEstimate> {
    let first = batch.first().ok_or(Error::Empty("loss batch"))?;
    check_shapes(model, first.len(), model.vocab_total())?;
    let bos = Specials::for_total(model.vocab_total()).bos;
    let items: Vec<LossItem> = batch
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let (n, denom) = match scope {
                LossScope::AllSlots => (seq.len(), seq.len() as f64),
                LossScope::ActiveSlots => (seq.k, seq.k.max(1) as f64),
            };
            let mut weights = vec![0.0; seq.len()];
            weights[..n].fill(1.0 / denom);
            LossItem { seq: i, input: ar_inputs(seq, bos), targets: seq.tokens.clone(), weights, t: 0.0 }
        })
        .collect();
    LossEstimate::from_values(evaluate_items(&items, batch, model, exec)?)
}

/// Decode the `k` active slots left to right. `temperature == 0` is greedy.
/// The model must be causal and must not carry over its inputs.
pub fn sample_autoregressive(
    occ: &OccupancyMap,
    model: &dyn Denoiser,
    vocab: &Vocabulary,
    seed: u64,
    temperature: f64,
) -> Result<(VoxelGrid, TokenSequence)> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::domain(format!("temperature {temperature}")));
    }
    let len = model.seq_len();
    check_shapes(model, len, vocab.total())?;
    let positions = occ.slot_positions(len)?;
    let k = occ.k();
    let rng = CounterRng::new(seed);
    let mut tokens = vec![vocab.pad(); len];
    let mut input = vec![vocab.pad(); len];
    input[0] = vocab.bos();
    let n = vocab.n_blocks();
    for i in 0..k {
        let out = model.denoise(&input, &positions, 0.0)?;
        let row = &out.slot(i)[..n];
        let tok = if temperature == 0.0 {
            // first maximum wins ties
            (0..n).fold(0, |best, v| if row[v] > row[best] { v } else { best })
        } else {
            let logw: Vec<f64> = row.iter().map(|p| p.ln() / temperature).collect();
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| if max.is_finite() { (l - max).exp() } else { 1.0 }).collect();
            let target = rng.uniform(i as u64, 0, 0) * w.iter().sum::<f64>();
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (v, wv) in w.iter().enumerate() {
                acc += wv;
                if target < acc {
                    pick = v;
                    break;
                }
            }
            pick
        } as u32;
        tokens[i] = tok;
        if i + 1 < len {
            input[i + 1] = tok;
        }
    }
    let seq = TokenSequence { tokens, positions, k };
    let grid = reconstruct(&seq, vocab, occ.dim)?;
    Ok((grid, seq))
}
