//! Dense kernels on row-major `f64` buffers.

/// Strided view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

pub(crate) const fn rows(rs: usize) -> Layout {
    Layout { rs, cs: 1 }
}

/// Transposed view of a row-major matrix with row stride `rs`.
pub(crate) const fn trans(rs: usize) -> Layout {
    Layout { rs: 1, cs: rs }
}

fn span(r: usize, c: usize, l: Layout) -> usize {
    if r == 0 || c == 0 {
        0
    } else {
        (r - 1) * l.rs + (c - 1) * l.cs + 1
    }
}

/// `C ← α·A·B + β·C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert!(a.len() >= span(m, k, la), "gemm: A too short");
    assert!(b.len() >= span(k, n, lb), "gemm: B too short");
    assert!(c.len() >= span(m, n, lc), "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    if m == 1 || k == 1 {
        // vector shapes: packing would cost more than the arithmetic
        for i in 0..m {
            if lb.cs == 1 && lc.cs == 1 {
                let crow = &mut c[i * lc.rs..i * lc.rs + n];
                if beta == 0.0 {
                    crow.fill(0.0);
                } else if beta != 1.0 {
                    crow.iter_mut().for_each(|v| *v *= beta);
                }
                for p in 0..k {
                    let aip = alpha * a[i * la.rs + p * la.cs];
                    let brow = &b[p * lb.rs..p * lb.rs + n];
                    crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += aip * bv);
                }
                continue;
            }
            for j in 0..n {
                let cij = &mut c[i * lc.rs + j * lc.cs];
                *cij = if beta == 0.0 { 0.0 } else { beta * *cij };
            }
            for p in 0..k {
                let aip = alpha * a[i * la.rs + p * la.cs];
                for j in 0..n {
                    c[i * lc.rs + j * lc.cs] += aip * b[p * lb.rs + j * lb.cs];
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// `y = x·W + b` for `x: m×k`, `W: k×n`.
pub(crate) fn linear(x: &[f64], m: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(m * n);
    for _ in 0..m {
        y.extend_from_slice(&b[..n]);
    }
    gemm(m, k, n, 1.0, x, rows(k), w, rows(n), 1.0, &mut y, rows(n));
    y
}

/// Accumulate `dW += xᵀ·dy`, `db += Σ_rows dy`, and return `dx = dy·Wᵀ`
/// when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(k, m, n, 1.0, x, trans(k), dy, rows(n), 1.0, dw, rows(n));
    for row in dy.chunks_exact(n) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; m * k];
        gemm(m, n, k, 1.0, dy, rows(n), w, trans(n), 0.0, &mut dx, rows(k));
        dx
    })
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Normalized rows and reciprocal standard deviations.
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer norm with affine `g`, `b`.
pub(crate) fn layer_norm(x: &[f64], width: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let m = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; m];
    for r in 0..m {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            y[r * width + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Backward of [`layer_norm`]: accumulates `dg`, `db` and adds into `dx`.
pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    width: usize,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let m = cache.rstd.len();
    let mut dxhat = vec![0.0; width];
    for r in 0..m {
        let xhat = &cache.xhat[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..width {
            dg[j] += dyr[j] * xhat[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        let rs = cache.rstd[r];
        for j in 0..width {
            dx[r * width + j] += rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
// 0.5·(1 + tanh z) = sigmoid(2z), which avoids libm's slower tanh
pub(crate) fn gelu(u: f64) -> f64 {
    u * sigmoid(2.0 * GELU_C * (u + GELU_A * u * u * u))
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (u + GELU_A * u * u * u));
    s + 2.0 * u * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place softmax of one row. Entries equal to `-inf` get probability 0.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
