//! Survival schedule and the absorbing-state forward process.

use rand::Rng;

use crate::diffusion::LatentState;
use crate::error::{Error, Result};
use crate::voxel::TokenSequence;

pub const DEFAULT_EPS_MIN: f64 = 1e-3;

/// `α(t) = 1 − (1 − ε)·t`: the probability a token survives unmasked to time
/// `t`. Linear in `α`, so `−log α` is the log-linear noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    eps_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { eps_min: DEFAULT_EPS_MIN }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t}")))
    }
}

impl NoiseSchedule {
    pub fn new(eps_min: f64) -> Result<Self> {
        if eps_min > 0.0 && eps_min < 1.0 {
            Ok(Self { eps_min })
        } else {
            Err(Error::domain(format!("eps_min {eps_min}")))
        }
    }

    pub fn eps_min(&self) -> f64 {
        self.eps_min
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(-(1.0 - self.eps_min))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        1.0 - (1.0 - self.eps_min) * t
    }

    /// Continuous-time loss weight `−α′(t) / (1 − α(t))`. Infinite at `t = 0`.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        Ok(-self.alpha_prime(t)? / (1.0 - self.alpha(t)?))
    }

    /// Probability that a masked token at time `t` is revealed by time `s < t`.
    pub fn unmask_probability(&self, s: f64, t: f64) -> Result<f64> {
        check_time(s)?;
        check_time(t)?;
        if s >= t {
            return Err(Error::domain(format!("reverse step from {t} to {s}")));
        }
        let (a_s, a_t) = (self.alpha_unchecked(s), self.alpha_unchecked(t));
        Ok((a_s - a_t) / (1.0 - a_t))
    }
}

/// Uniform grid `t(i) = i/T`, `s(i) = (i − 1)/T` for `i = 1..=T`.
#[derive(Clone, Copy, Debug)]
pub struct DiscreteTimeGrid {
    pub steps: usize,
    pub schedule: NoiseSchedule,
}

impl DiscreteTimeGrid {
    pub fn new(steps: usize, schedule: NoiseSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("step count 0"));
        }
        Ok(Self { steps, schedule })
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn s(&self, i: usize) -> f64 {
        (i - 1) as f64 / self.steps as f64
    }

    /// Per-step mask probability `1 − α(t(i))/α(s(i))`.
    pub fn beta(&self, i: usize) -> f64 {
        let sch = &self.schedule;
        1.0 - sch.alpha_unchecked(self.t(i)) / sch.alpha_unchecked(self.s(i))
    }
}

/// Dense square row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    n: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.n..(from + 1) * self.n]
    }

    pub fn matmul(&self, rhs: &Kernel) -> Kernel {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        Kernel { n, data }
    }
}

/// One-step absorbing kernel: every non-mask token jumps to `mask` with
/// probability `beta`; `mask` is absorbing.
pub fn absorbing_kernel(beta: f64, vocab_total: usize, mask: usize) -> Result<Kernel> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta {beta}")));
    }
    if mask >= vocab_total {
        return Err(Error::domain(format!("mask id {mask} in vocabulary of {vocab_total}")));
    }
    let mut k = Kernel::identity(vocab_total);
    for v in 0..vocab_total {
        if v != mask {
            k.data[v * vocab_total + v] = 1.0 - beta;
            k.data[v * vocab_total + mask] = beta;
        }
    }
    Ok(k)
}

/// Closed-form marginal `q(z_t | x)`: weight `α` on staying, `1 − α` on mask.
pub fn marginal_kernel(alpha: f64, vocab_total: usize, mask: usize) -> Result<Kernel> {
    absorbing_kernel(1.0 - alpha, vocab_total, mask)
}

/// How PAD slots behave under corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadPolicy {
    /// PAD is an ordinary token (training).
    Corrupt,
    /// PAD is fixed and flagged as clamped (conditional sampling).
    Clamp,
}

/// Draw `z_t ~ q(z_t | x)`: each corruptible token independently survives
/// with probability `α(t)` and becomes MASK otherwise.
pub fn forward_corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    mask: u32,
    pad: u32,
    policy: PadPolicy,
    rng: &mut R,
) -> Result<LatentState> {
    let alpha = schedule.alpha(t)?;
    let mut tokens = seq.tokens.clone();
    let mut clamp = vec![false; tokens.len()];
    for (slot, tok) in tokens.iter_mut().enumerate() {
        if *tok == pad && policy == PadPolicy::Clamp {
            clamp[slot] = true;
            continue;
        }
        // draw even when alpha is 1 so the stream stays aligned across t
        let u: f64 = rng.random();
        if u >= alpha {
            *tok = mask;
        }
    }
    Ok(LatentState { tokens, clamp })
}

/// Apply one kernel step `Q(β)` to the unclamped slots of `z`.
pub fn forward_step<R: Rng + ?Sized>(z: &mut LatentState, beta: f64, mask: u32, rng: &mut R) {
    for (tok, &clamped) in z.tokens.iter_mut().zip(&z.clamp) {
        if clamped || *tok == mask {
            continue;
        }
        if rng.random::<f64>() < beta {
            *tok = mask;
        }
    }
}
