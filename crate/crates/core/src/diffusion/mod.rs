//! Masked diffusion objectives and samplers, plus the next-token baseline.

mod autoregressive;
mod loss;
mod sampler;
mod trace;

use crate::backbone::{Backbone, SeqInput};
use crate::error::{Error, Result};
use crate::voxel::Coord;

pub use autoregressive::{ar_inputs, loss_autoregressive, sample_autoregressive};
pub use loss::{
    bernoulli_kl, build_items, DEFAULT_T_MIN, evaluate_items, loss_and_grad, loss_continuous, loss_discrete,
    nelbo_report, LossEstimate, LossItem, LossOptions, LossScope, NelboReport, Objective,
};
pub use sampler::{reverse_step, sample, DEFAULT_SAMPLE_STEPS, SampleOptions, SampleOutput, SampleTrace};
pub use trace::{read_trace_ndjson, write_trace_ndjson, TraceLine, UnmaskEvent};

/// A partially masked sequence `z_t`. Clamped slots are fixed by
/// conditioning and never change during reverse steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentState {
    pub tokens: Vec<u32>,
    pub clamp: Vec<bool>,
}

impl LatentState {
    pub fn mask_count(&self, mask: u32) -> usize {
        self.tokens.iter().filter(|&&t| t == mask).count()
    }
}

/// Special token ids implied by a vocabulary size: blocks first, then
/// MASK, PAD, BOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub mask: u32,
    pub pad: u32,
    pub bos: u32,
}

impl Specials {
    pub fn for_total(vocab_total: usize) -> Self {
        let v = vocab_total as u32;
        Self { mask: v - 3, pad: v - 2, bos: v - 1 }
    }

    /// Tokens a denoiser may put probability on: blocks and PAD.
    pub fn is_output(&self, token: u32) -> bool {
        token != self.mask && token != self.bos
    }
}

/// Per-slot categorical distributions over the full vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub vocab_total: usize,
    /// `L × vocab_total`, row-major.
    pub probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn seq_len(&self) -> usize {
        self.probs.len() / self.vocab_total
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab_total..(i + 1) * self.vocab_total]
    }

    /// Softmax over output tokens (MASK and BOS get exactly 0). With
    /// `carry_over`, slots whose input is not MASK become point masses on
    /// their input token.
    pub fn from_logits(logits: &[f64], input: &[u32], vocab_total: usize, carry_over: bool) -> Self {
        let sp = Specials::for_total(vocab_total);
        let mut probs = vec![0.0; logits.len()];
        for (slot, (lrow, prow)) in logits
            .chunks_exact(vocab_total)
            .zip(probs.chunks_exact_mut(vocab_total))
            .enumerate()
        {
            let tok = input[slot];
            if carry_over && tok != sp.mask {
                prow[tok as usize] = 1.0;
                continue;
            }
            let max = (0..vocab_total as u32)
                .filter(|&v| sp.is_output(v))
                .map(|v| lrow[v as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in 0..vocab_total as u32 {
                if sp.is_output(v) {
                    let e = (lrow[v as usize] - max).exp();
                    prow[v as usize] = e;
                    sum += e;
                }
            }
            prow.iter_mut().for_each(|p| *p /= sum);
        }
        Self { vocab_total, probs }
    }

    /// Impose the output constraints on raw per-slot weights.
    pub fn from_weights(weights: &[f64], input: &[u32], vocab_total: usize, carry_over: bool) -> Self {
        let logits: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        Self::from_logits(&logits, input, vocab_total, carry_over)
    }
}

/// Anything that maps `(z_t, positions, t)` to per-slot distributions.
pub trait Denoiser: Sync {
    fn seq_len(&self) -> usize;
    fn vocab_total(&self) -> usize;
    /// Whether outputs depend on `t`. Cached sampling only reuses
    /// distributions across steps for models that ignore it.
    fn time_conditioned(&self) -> bool;
    fn denoise(&self, z: &[u32], positions: &[Option<Coord>], t: f64) -> Result<DenoiserOutput>;
}

/// A backbone together with one set of weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub params: Vec<f64>,
}

impl Model {
    pub fn new(backbone: Backbone, params: Vec<f64>) -> Result<Self> {
        backbone.check_params(&params)?;
        Ok(Self { backbone, params })
    }

    pub fn logits(&self, z: &[u32], positions: &[Option<Coord>], t: f64) -> Result<Vec<f64>> {
        let fp = self
            .backbone
            .forward(&self.params, SeqInput { tokens: z, positions, t }, false)?;
        Ok(fp.logits)
    }
}

impl Denoiser for Model {
    fn seq_len(&self) -> usize {
        self.backbone.config().seq_len
    }

    fn vocab_total(&self) -> usize {
        self.backbone.config().vocab_total
    }

    fn time_conditioned(&self) -> bool {
        self.backbone.config().time_conditioning
    }

    fn denoise(&self, z: &[u32], positions: &[Option<Coord>], t: f64) -> Result<DenoiserOutput> {
        let logits = self.logits(z, positions, t)?;
        let carry = !self.backbone.config().causal;
        Ok(DenoiserOutput::from_logits(&logits, z, self.vocab_total(), carry))
    }
}

pub(crate) fn check_shapes(model: &dyn Denoiser, len: usize, vocab_total: usize) -> Result<()> {
    if model.seq_len() != len || model.vocab_total() != vocab_total {
        return Err(Error::Shape(format!(
            "model expects length {} over {} tokens, got length {len} over {vocab_total}",
            model.seq_len(),
            model.vocab_total()
        )));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        let bb = Backbone::new(BackboneConfig {
            depth: 2,
            heads: 2,
            width: 24,
            seq_len: 8,
            vocab_total: 6,
            dim: 4,
            ..Default::default()
        })
        .unwrap();
        let params = bb.init_dense(&mut ChaCha8Rng::seed_from_u64(seed), 0.5);
        Model::new(bb, params).unwrap()
    }

    fn positions() -> Vec<Option<Coord>> {
        (0..8).map(|i| (i < 6).then(|| Coord::new(i as u16 % 4, i as u16 / 4, 1))).collect()
    }

    #[test]
    fn no_masks_means_identity_output() {
        let m = model(1);
        let z = vec![0, 1, 2, 0, 1, 2, 4, 4];
        let out = m.denoise(&z, &positions(), 0.3).unwrap();
        for (i, &tok) in z.iter().enumerate() {
            for v in 0..6 {
                assert_eq!(out.slot(i)[v], if v == tok as usize { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn time_unconditioned_output_ignores_t() {
        let bb = Backbone::new(BackboneConfig {
            depth: 2,
            heads: 2,
            width: 24,
            seq_len: 8,
            vocab_total: 6,
            dim: 4,
            time_conditioning: false,
            ..Default::default()
        })
        .unwrap();
        let params = bb.init_dense(&mut ChaCha8Rng::seed_from_u64(2), 0.5);
        let m = Model::new(bb, params).unwrap();
        let z = vec![3, 1, 3, 0, 3, 2, 4, 3];
        assert_eq!(m.denoise(&z, &positions(), 0.0).unwrap(), m.denoise(&z, &positions(), 1.0).unwrap());
    }

    #[test]
    fn zero_modulation_matches_unconditioned_build() {
        let cfg = BackboneConfig {
            depth: 2,
            heads: 2,
            width: 24,
            seq_len: 8,
            vocab_total: 6,
            dim: 4,
            ..Default::default()
        };
        let with = Backbone::new(cfg.clone()).unwrap();
        let without = Backbone::new(BackboneConfig { time_conditioning: false, ..cfg }).unwrap();
        let p_with = with.init_dense(&mut ChaCha8Rng::seed_from_u64(5), 0.4);
        // copy the shared weights, zero the modulation path
        let mut p_without = vec![0.0; without.num_params()];
        let mut p_zeroed = p_with.clone();
        for s in with.specs() {
            if let Some(t) = without.spec(&s.name) {
                p_without[t.range()].copy_from_slice(&p_with[s.range()]);
            } else if s.name.contains("mod.") {
                p_zeroed[s.range()].fill(0.0);
            }
        }
        let a = Model::new(with, p_zeroed).unwrap();
        let b = Model::new(without, p_without).unwrap();
        let z = vec![3, 1, 3, 0, 3, 2, 4, 3];
        for t in [0.0, 0.4, 1.0] {
            assert_eq!(a.logits(&z, &positions(), t).unwrap(), b.logits(&z, &positions(), 0.0).unwrap());
        }
    }

    #[test]
    fn time_conditioned_output_depends_on_t() {
        let m = model(3);
        let z = vec![3, 1, 3, 0, 3, 2, 4, 3];
        assert_ne!(m.denoise(&z, &positions(), 0.1).unwrap(), m.denoise(&z, &positions(), 0.9).unwrap());
    }

    fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
        perm.iter().map(|&i| v[i].clone()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_are_distributions(seed in 0u64..1000, toks in prop::collection::vec(0u32..5, 8), t in 0.0f64..=1.0) {
            let m = model(seed % 7);
            let out = m.denoise(&toks, &positions(), t).unwrap();
            for i in 0..8 {
                let row = out.slot(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert_eq!(row[3], 0.0);
                prop_assert_eq!(row[5], 0.0);
                if toks[i] != 3 {
                    prop_assert_eq!(row[toks[i] as usize], 1.0);
                }
            }
        }

        #[test]
        fn permutation_equivariant(perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(), toks in prop::collection::vec(0u32..5, 8)) {
            let m = model(11);
            let pos = positions();
            let a = m.logits(&toks, &pos, 0.6).unwrap();
            let b = m.logits(&permute(&toks, &perm), &permute(&pos, &perm), 0.6).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                for v in 0..6 {
                    prop_assert!((b[j * 6 + v] - a[i * 6 + v]).abs() < 1e-10);
                }
            }
        }
    }
}
