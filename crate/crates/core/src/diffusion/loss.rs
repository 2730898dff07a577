//! Training objectives as Monte Carlo estimators.
//!
//! Every objective first turns a batch into [`LossItem`]s (model input,
//! targets and per-slot weights), so the same corruption draws can be scored
//! by any [`Denoiser`] or differentiated through a [`Model`].

use rand::Rng;

use super::autoregressive::ar_inputs;
use super::{check_shapes, Denoiser, Model, Specials};
use crate::backbone::SeqInput;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::schedule::{forward_corrupt, NoiseSchedule, PadPolicy};
use crate::voxel::TokenSequence;

/// Lower end of the training-time interval; keeps the `1/t` weight bounded.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Continuous,
    Discrete {
        steps: usize,
    },
    Autoregressive,
}

/// Which slots count towards the per-token mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossScope {
    /// All `L` slots, PAD included.
    #[default]
    AllSlots,
    /// Only the `k` occupied slots.
    ActiveSlots,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub t_min: f64,
    /// Pair sequence `2i + 1` with `1 − u` of sequence `2i`.
    pub antithetic: bool,
    /// One `t` per slot instead of per sequence. Only meaningful for models
    /// without time conditioning.
    pub per_token_time: bool,
    pub scope: LossScope,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { t_min: DEFAULT_T_MIN, antithetic: false, per_token_time: false, scope: LossScope::AllSlots }
    }
}

/// One corrupted view of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LossItem {
    /// Index of the source sequence in the batch.
    pub seq: usize,
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
    /// Per-slot coefficient on `−log p(target)`, already divided by the
    /// token count.
    pub weights: Vec<f64>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    /// Standard error of `mean` across items.
    pub std_error: f64,
    pub per_item: Vec<f64>,
}

impl LossEstimate {
    pub fn from_values(per_item: Vec<f64>) -> Result<Self> {
        if per_item.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let n = per_item.len() as f64;
        let mean = per_item.iter().sum::<f64>() / n;
        let std_error = if per_item.len() > 1 {
            let var = per_item.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std_error, per_item })
    }
}

fn counted(seq: &TokenSequence, scope: LossScope) -> (usize, f64) {
    match scope {
        LossScope::AllSlots => (seq.len(), seq.len() as f64),
        LossScope::ActiveSlots => (seq.k, seq.k.max(1) as f64),
    }
}

fn check_batch(batch: &[TokenSequence]) -> Result<()> {
    let first = batch.first().ok_or(Error::Empty("loss batch"))?;
    if batch.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Shape("sequences of different lengths in one batch".into()));
    }
    Ok(())
}

/// Draw one corrupted item per sequence.
pub fn build_items<R: Rng + ?Sized>(
    objective: Objective,
    batch: &[TokenSequence],
    vocab_total: usize,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<Vec<LossItem>> {
    check_batch(batch)?;
    if !(0.0..1.0).contains(&opts.t_min) {
        return Err(Error::domain(format!("t_min {}", opts.t_min)));
    }
    let sp = Specials::for_total(vocab_total);
    let mut items = Vec::with_capacity(batch.len());
    let mut prev_u = 0.0;
    for (i, seq) in batch.iter().enumerate() {
        let (n_counted, denom) = counted(seq, opts.scope);
        let item = match objective {
            Objective::Autoregressive => {
                let mut weights = vec![0.0; seq.len()];
                weights[..n_counted].fill(1.0 / denom);
                LossItem { seq: i, input: ar_inputs(seq, sp.bos), targets: seq.tokens.clone(), weights, t: 0.0 }
            }
            Objective::Continuous if opts.per_token_time => {
                let mut input = seq.tokens.clone();
                let mut weights = vec![0.0; seq.len()];
                for slot in 0..seq.len() {
                    let t = opts.t_min + (1.0 - opts.t_min) * rng.random::<f64>();
                    if rng.random::<f64>() >= schedule.alpha(t)? {
                        input[slot] = sp.mask;
                        if slot < n_counted {
                            weights[slot] = schedule.loss_weight(t)? / denom;
                        }
                    }
                }
                LossItem { seq: i, input, targets: seq.tokens.clone(), weights, t: 1.0 }
            }
            Objective::Continuous => {
                let u = if opts.antithetic && i % 2 == 1 { 1.0 - prev_u } else { rng.random::<f64>() };
                prev_u = u;
                let t = opts.t_min + (1.0 - opts.t_min) * u;
                let w = schedule.loss_weight(t)? / denom;
                masked_item(i, seq, t, w, n_counted, schedule, sp, rng)?
            }
            Objective::Discrete { steps } => {
                if steps == 0 {
                    return Err(Error::domain("discrete objective with 0 steps"));
                }
                let idx = rng.random_range(1..=steps);
                let t = idx as f64 / steps as f64;
                let s = (idx - 1) as f64 / steps as f64;
                let (a_t, a_s) = (schedule.alpha(t)?, schedule.alpha(s)?);
                // (α_t − α_s) < 0 and log p ≤ 0, so the summand is ≥ 0
                let w = steps as f64 * (a_s - a_t) / (1.0 - a_t) / denom;
                masked_item(i, seq, t, w, n_counted, schedule, sp, rng)?
            }
        };
        items.push(item);
    }
    Ok(items)
}

#[allow(clippy::too_many_arguments)]
fn masked_item<R: Rng + ?Sized>(
    i: usize,
    seq: &TokenSequence,
    t: f64,
    w: f64,
    n_counted: usize,
    schedule: &NoiseSchedule,
    sp: Specials,
    rng: &mut R,
) -> Result<LossItem> {
    let z = forward_corrupt(seq, t, schedule, sp.mask, sp.pad, PadPolicy::Corrupt, rng)?;
    let weights = z
        .tokens
        .iter()
        .enumerate()
        .map(|(slot, &tok)| if tok == sp.mask && slot < n_counted { w } else { 0.0 })
        .collect();
    Ok(LossItem { seq: i, input: z.tokens, targets: seq.tokens.clone(), weights, t })
}

/// Score items with any denoiser. Returns the weighted negative log score
/// of each item.
pub fn evaluate_items(
    items: &[LossItem],
    batch: &[TokenSequence],
    model: &dyn Denoiser,
    exec: Execution,
) -> Result<Vec<f64>> {
    let Some(first) = batch.first() else {
        return Err(Error::Empty("loss batch"));
    };
    check_shapes(model, first.len(), model.vocab_total())?;
    par::try_map(exec, items, |_, item| {
        let out = model.denoise(&item.input, &batch[item.seq].positions, item.t)?;
        let mut loss = 0.0;
        for (slot, (&w, &target)) in item.weights.iter().zip(&item.targets).enumerate() {
            if w != 0.0 {
                loss -= w * out.slot(slot)[target as usize].ln();
            }
        }
        Ok(loss)
    })
}

/// Mean loss over items and the matching parameter gradient.
///
/// Items are split into fixed shards of `shard_size`; each shard sums its
/// gradients sequentially and the shard sums are added in order, so the
/// result does not depend on how many threads ran.
pub fn loss_and_grad(
    model: &Model,
    items: &[LossItem],
    batch: &[TokenSequence],
    exec: Execution,
    shard_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let bb = &model.backbone;
    let v = bb.config().vocab_total;
    let sp = Specials::for_total(v);
    let shards: Vec<&[LossItem]> = items.chunks(shard_size.max(1)).collect();
    let partial = par::try_map(exec, &shards, |_, shard| -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; bb.num_params()];
        let mut loss = 0.0;
        for item in shard.iter() {
            let input = SeqInput { tokens: &item.input, positions: &batch[item.seq].positions, t: item.t };
            let fp = bb.forward(&model.params, input, true)?;
            let mut dlogits = vec![0.0; fp.logits.len()];
            for (slot, (&w, &target)) in item.weights.iter().zip(&item.targets).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &fp.logits[slot * v..(slot + 1) * v];
                let max = (0..v as u32).filter(|&t| sp.is_output(t)).map(|t| row[t as usize]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..v as u32).filter(|&t| sp.is_output(t)).map(|t| (row[t as usize] - max).exp()).sum();
                let lse = max + sum.ln();
                loss += w * (lse - row[target as usize]);
                let drow = &mut dlogits[slot * v..(slot + 1) * v];
                for t in (0..v as u32).filter(|&t| sp.is_output(t)) {
                    drow[t as usize] = w * (row[t as usize] - lse).exp();
                }
                drow[target as usize] -= w;
            }
            bb.backward(&model.params, &fp, input, &dlogits, &mut grads)?;
        }
        Ok((loss, grads))
    })?;
    let n = items.len() as f64;
    let mut total = 0.0;
    let mut grads = vec![0.0; bb.num_params()];
    for (l, g) in partial {
        total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grads.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

/// Continuous-time NELBO estimate in mean per-token nats.
pub fn loss_continuous<R: Rng + ?Sized>(
    batch: &[TokenSequence],
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    rng: &mut R,
    exec: Execution,
) -> Result<LossEstimate> {
    if opts.per_token_time && model.time_conditioned() {
        return Err(Error::Config("per-token time needs a model without time conditioning".into()));
    }
    let items = build_items(Objective::Continuous, batch, model.vocab_total(), schedule, opts, rng)?;
    LossEstimate::from_values(evaluate_items(&items, batch, model, exec)?)
}

/// Discrete-time NELBO estimate with `steps` steps, sampling one step per
/// sequence and scaling by `steps`.
pub fn loss_discrete<R: Rng + ?Sized>(
    batch: &[TokenSequence],
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    opts: &LossOptions,
    rng: &mut R,
    exec: Execution,
) -> Result<LossEstimate> {
    let items = build_items(Objective::Discrete { steps }, batch, model.vocab_total(), schedule, opts, rng)?;
    LossEstimate::from_values(evaluate_items(&items, batch, model, exec)?)
}

/// `KL(Bernoulli(p) ‖ Bernoulli(q))` in nats, with `0·log 0 = 0`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NelboReport {
    pub diffusion: LossEstimate,
    /// Per-token `KL(q(z_1|x) ‖ all-MASK)`. Each token is unmasked at `t = 1`
    /// with probability `ε` while the reference gives that event mass 0, so
    /// this is `+∞` for any `ε > 0`.
    pub prior: f64,
    /// Expected number of tokens per sequence still unmasked at `t = 1`,
    /// the finite quantity behind the infinite prior term.
    pub prior_leak: f64,
    /// Zero: carry-over makes the `t = 0` reconstruction exact.
    pub reconstruction: f64,
}

pub fn nelbo_report<R: Rng + ?Sized>(
    batch: &[TokenSequence],
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    rng: &mut R,
    exec: Execution,
) -> Result<NelboReport> {
    let diffusion = loss_continuous(batch, model, schedule, opts, rng, exec)?;
    let eps = schedule.alpha(1.0)?;
    let tokens = match opts.scope {
        LossScope::AllSlots => batch[0].len() as f64,
        LossScope::ActiveSlots => batch.iter().map(|s| s.k as f64).sum::<f64>() / batch.len() as f64,
    };
    Ok(NelboReport {
        diffusion,
        prior: bernoulli_kl(1.0 - eps, 1.0),
        prior_leak: tokens * eps,
        reconstruction: 0.0,
    })
}
