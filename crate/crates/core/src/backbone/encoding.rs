//! Fixed sinusoidal encodings for voxel positions and diffusion time.

use crate::error::{Error, Result};
use crate::voxel::Coord;

pub const FREQUENCY_BASE: f64 = 10_000.0;

/// Radians per voxel step at the highest frequency. At `π` neighbouring
/// voxels land in opposite phase, so the finest band alternates every voxel.
pub const COORD_SCALE: f64 = std::f64::consts::PI;

/// Standard 1D sinusoidal code of `value` written into `out` as interleaved
/// `sin, cos` pairs over geometrically spaced frequencies.
fn sinusoid_1d(value: f64, out: &mut [f64]) {
    let n = out.len();
    for (i, pair) in out.chunks_exact_mut(2).enumerate() {
        let freq = FREQUENCY_BASE.powf(-((2 * i) as f64) / n as f64);
        let (s, c) = (value * freq).sin_cos();
        pair[0] = s;
        pair[1] = c;
    }
}

/// 3D sinusoidal positional code: the width is split into three equal thirds,
/// one 1D code per axis. The PAD sentinel (`None`) encodes to zeros.
pub fn positional_encoding_3d(pos: Option<Coord>, width: usize, dim: u32) -> Result<Vec<f64>> {
    if width == 0 || !width.is_multiple_of(6) {
        return Err(Error::domain(format!("width {width} for 3D encoding (needs a multiple of 6)")));
    }
    let mut out = vec![0.0; width];
    let Some(c) = pos else {
        return Ok(out);
    };
    if !c.in_cube(dim) {
        return Err(Error::domain(format!("position {c:?} in cube of side {dim}")));
    }
    let third = width / 3;
    for (axis, v) in [c.x, c.y, c.z].into_iter().enumerate() {
        sinusoid_1d(v as f64 * COORD_SCALE, &mut out[axis * third..(axis + 1) * third]);
    }
    Ok(out)
}

/// Time scale applied before the sinusoid so that `t ∈ [0, 1]` spans the
/// same argument range as integer diffusion steps up to 1000.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal embedding of diffusion time: `[cos(t·ω_i)…, sin(t·ω_i)…]`.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-FREQUENCY_BASE.ln() * i as f64 / half as f64).exp();
        let (s, c) = (t * TIME_SCALE * freq).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    out
}
