use super::encoding::{positional_encoding_3d, time_embedding};
use super::ops::{
    gemm, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, rows, silu,
    silu_grad, softmax_in_place, trans, LnCache,
};
use super::{Backbone, BlockIdx, LearnedKey, PeMode};
use crate::error::{Error, Result};
use crate::voxel::Coord;

/// One sequence presented to the backbone.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [Option<Coord>],
    pub t: f64,
}

struct CondCache {
    temb: Vec<f64>,
    a1: Vec<f64>,
    c: Vec<f64>,
    sc: Vec<f64>,
    block_mods: Vec<Vec<f64>>,
    final_mod: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    y1: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    y2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    f: Vec<f64>,
}

/// Logits plus whatever the backward pass needs.
pub struct ForwardPass {
    /// `L × vocab_total`, row-major.
    pub logits: Vec<f64>,
    cond: Option<CondCache>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    yf: Vec<f64>,
    hf: Vec<f64>,
    pos_rows: Vec<Option<usize>>,
}

type ModViews<'a> = (Option<&'a [f64]>, Option<&'a [f64]>, Option<&'a [f64]>);

/// `(shift, scale, gate)` views of a block modulation vector.
fn split_mod(m: Option<&[f64]>, w: usize, second: bool) -> ModViews<'_> {
    match m {
        None => (None, None, None),
        Some(m) => {
            let o = if second { 3 * w } else { 0 };
            (Some(&m[o..o + w]), Some(&m[o + w..o + 2 * w]), Some(&m[o + 2 * w..o + 3 * w]))
        }
    }
}

fn modulate(y: &[f64], w: usize, shift: Option<&[f64]>, scale: Option<&[f64]>) -> Vec<f64> {
    let mut h = y.to_vec();
    if let (Some(shift), Some(scale)) = (shift, scale) {
        for row in h.chunks_exact_mut(w) {
            for j in 0..w {
                row[j] = row[j] * (1.0 + scale[j]) + shift[j];
            }
        }
    }
    h
}

/// Backward of [`modulate`]; returns `dy` and accumulates `dshift`, `dscale`.
fn modulate_backward(
    y: &[f64],
    w: usize,
    scale: Option<&[f64]>,
    dh: &[f64],
    dmod: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let Some(scale) = scale else {
        return dh.to_vec();
    };
    let (dshift, dscale) = dmod.expect("modulation gradient buffer");
    let mut dy = vec![0.0; dh.len()];
    for (r, drow) in dh.chunks_exact(w).enumerate() {
        for j in 0..w {
            let d = drow[j];
            dy[r * w + j] = d * (1.0 + scale[j]);
            dshift[j] += d;
            dscale[j] += d * y[r * w + j];
        }
    }
    dy
}

fn add_gated(x: &mut [f64], w: usize, delta: &[f64], gate: Option<&[f64]>) {
    match gate {
        None => x.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        Some(g) => {
            for (xr, dr) in x.chunks_exact_mut(w).zip(delta.chunks_exact(w)) {
                for j in 0..w {
                    xr[j] += (1.0 + g[j]) * dr[j];
                }
            }
        }
    }
}

fn check_finite(v: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

impl Backbone {
    fn validate_input(&self, params: &[f64], input: &SeqInput<'_>) -> Result<()> {
        self.check_params(params)?;
        let l = self.config.seq_len;
        if input.tokens.len() != l || input.positions.len() != l {
            return Err(Error::Shape(format!(
                "sequence of {} tokens / {} positions for length {l}",
                input.tokens.len(),
                input.positions.len()
            )));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::domain(format!("time {}", input.t)));
        }
        if let Some((slot, &tok)) = input
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab_total)
        {
            return Err(Error::InvalidToken { slot, token: tok });
        }
        Ok(())
    }

    fn position_row(&self, slot: usize, pos: Option<Coord>) -> Result<Option<usize>> {
        let Some(c) = pos else { return Ok(None) };
        if !c.in_cube(self.config.dim) {
            return Err(Error::domain(format!("position {c:?} in cube of side {}", self.config.dim)));
        }
        Ok(Some(match self.config.learned_key {
            LearnedKey::Voxel => c.flat_index(self.config.dim),
            LearnedKey::Slot => slot,
        }))
    }

    /// Run the network. With `keep_cache = false` the activations needed for
    /// [`Backbone::backward`] are dropped as soon as possible.
    pub fn forward(&self, params: &[f64], input: SeqInput<'_>, keep_cache: bool) -> Result<ForwardPass> {
        self.validate_input(params, &input)?;
        let cfg = &self.config;
        let (l, w, v) = (cfg.seq_len, cfg.width, cfg.vocab_total);
        let p = |off: usize, len: usize| &params[off..off + len];

        // input embedding
        let mut x = vec![0.0; l * w];
        let mut pos_rows = vec![None; l];
        let tok_emb = p(self.idx.tok, v * w);
        for slot in 0..l {
            let row = &mut x[slot * w..(slot + 1) * w];
            let tok = input.tokens[slot] as usize;
            row.copy_from_slice(&tok_emb[tok * w..(tok + 1) * w]);
            match cfg.pe_mode {
                PeMode::Sinusoidal3d => {
                    let pe = positional_encoding_3d(input.positions[slot], w, cfg.dim)?;
                    row.iter_mut().zip(&pe).for_each(|(a, b)| *a += b);
                }
                PeMode::Learned => {
                    if let Some(r) = self.position_row(slot, input.positions[slot])? {
                        let table = self.idx.pos_table.expect("learned layout has a table");
                        let pe = &params[table + r * w..table + (r + 1) * w];
                        row.iter_mut().zip(pe).for_each(|(a, b)| *a += b);
                        pos_rows[slot] = Some(r);
                    }
                }
            }
        }

        // time conditioning
        let cond = match &self.idx.cond {
            None => None,
            Some(ci) => {
                let temb = time_embedding(input.t, w);
                let a1 = linear(&temb, 1, w, p(ci.w1, w * w), p(ci.b1, w), w);
                let sa1: Vec<f64> = a1.iter().map(|&a| silu(a)).collect();
                let c = linear(&sa1, 1, w, p(ci.w2, w * w), p(ci.b2, w), w);
                let sc: Vec<f64> = c.iter().map(|&a| silu(a)).collect();
                let block_mods = self
                    .idx
                    .blocks
                    .iter()
                    .map(|b| {
                        let (mw, mb) = b.modulation.expect("conditioned layout");
                        linear(&sc, 1, w, p(mw, w * 6 * w), p(mb, 6 * w), 6 * w)
                    })
                    .collect();
                let final_mod = linear(&sc, 1, w, p(ci.final_w, w * 2 * w), p(ci.final_b, 2 * w), 2 * w);
                Some(CondCache { temb, a1, c, sc, block_mods, final_mod })
            }
        };

        let mut blocks = Vec::with_capacity(if keep_cache { cfg.depth } else { 0 });
        for (bi, b) in self.idx.blocks.iter().enumerate() {
            let m = cond.as_ref().map(|c| c.block_mods[bi].as_slice());
            let cache = self.block_forward(params, b, m, &mut x)?;
            check_finite(&x, || format!("block {bi}"))?;
            if keep_cache {
                blocks.push(cache);
            }
        }

        let (yf, lnf) = layer_norm(&x, w, p(self.idx.lnf_g, w), p(self.idx.lnf_b, w));
        let (shift_f, scale_f) = match &cond {
            Some(c) => (Some(&c.final_mod[..w]), Some(&c.final_mod[w..])),
            None => (None, None),
        };
        let hf = modulate(&yf, w, shift_f, scale_f);
        let logits = linear(&hf, l, w, p(self.idx.head_w, w * v), p(self.idx.head_b, v), v);
        check_finite(&logits, || "head".to_string())?;

        Ok(ForwardPass { logits, cond, blocks, lnf, yf, hf, pos_rows })
    }

    fn block_forward(&self, params: &[f64], b: &BlockIdx, m: Option<&[f64]>, x: &mut [f64]) -> Result<BlockCache> {
        let cfg = &self.config;
        let (l, w, f) = (cfg.seq_len, cfg.width, cfg.ffn_width());
        let (nh, dh) = (cfg.heads, cfg.head_dim());
        let p = |off: usize, len: usize| &params[off..off + len];

        let (shift1, scale1, gate1) = split_mod(m, w, false);
        let (y1, ln1) = layer_norm(x, w, p(b.ln1_g, w), p(b.ln1_b, w));
        let h1 = modulate(&y1, w, shift1, scale1);
        let qkv = linear(&h1, l, w, p(b.qkv_w, w * 3 * w), p(b.qkv_b, 3 * w), 3 * w);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nh * l * l];
        let mut attn = vec![0.0; l * w];
        for h in 0..nh {
            let s = &mut probs[h * l * l..(h + 1) * l * l];
            let q = &qkv[h * dh..];
            let k = &qkv[w + h * dh..];
            gemm(l, dh, l, scale, q, rows(3 * w), k, trans(3 * w), 0.0, s, rows(l));
            for (i, row) in s.chunks_exact_mut(l).enumerate() {
                if cfg.causal {
                    row[i + 1..].fill(f64::NEG_INFINITY);
                }
                softmax_in_place(row);
            }
            let vv = &qkv[2 * w + h * dh..];
            gemm(l, l, dh, 1.0, s, rows(l), vv, rows(3 * w), 0.0, &mut attn[h * dh..], rows(w));
        }
        let o = linear(&attn, l, w, p(b.out_w, w * w), p(b.out_b, w), w);
        add_gated(x, w, &o, gate1);

        let (shift2, scale2, gate2) = split_mod(m, w, true);
        let (y2, ln2) = layer_norm(x, w, p(b.ln2_g, w), p(b.ln2_b, w));
        let h2 = modulate(&y2, w, shift2, scale2);
        let u = linear(&h2, l, w, p(b.ff1_w, w * f), p(b.ff1_b, f), f);
        let g: Vec<f64> = u.iter().map(|&a| gelu(a)).collect();
        let ff = linear(&g, l, f, p(b.ff2_w, f * w), p(b.ff2_b, w), w);
        add_gated(x, w, &ff, gate2);

        Ok(BlockCache { ln1, y1, h1, qkv, probs, attn, o, ln2, y2, h2, u, g, f: ff })
    }

    /// Accumulate `∂loss/∂params` into `grads` given `∂loss/∂logits`.
    pub fn backward(
        &self,
        params: &[f64],
        fp: &ForwardPass,
        input: SeqInput<'_>,
        dlogits: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_params(grads)?;
        let cfg = &self.config;
        let (l, w, v) = (cfg.seq_len, cfg.width, cfg.vocab_total);
        if fp.blocks.len() != cfg.depth {
            return Err(Error::Shape("forward pass was run without keep_cache".into()));
        }
        if dlogits.len() != l * v {
            return Err(Error::Shape(format!("{} logit gradients for {}", dlogits.len(), l * v)));
        }
        let p = |off: usize, len: usize| &params[off..off + len];
        let idx = &self.idx;

        // head
        let dhf = linear_grad(grads, idx.head_w, idx.head_b, &fp.hf, l, w, p(idx.head_w, w * v), v, dlogits, true)
            .expect("dx requested");

        let mut dcond_sc = vec![0.0; w];
        let mut dfinal_mod = vec![0.0; 2 * w];
        let scale_f = fp.cond.as_ref().map(|c| &c.final_mod[w..]);
        let dyf = {
            let (ds, dc) = dfinal_mod.split_at_mut(w);
            modulate_backward(&fp.yf, w, scale_f, &dhf, scale_f.map(|_| (ds, dc)))
        };
        let mut dx = vec![0.0; l * w];
        {
            let (mut dg, mut db) = (vec![0.0; w], vec![0.0; w]);
            layer_norm_backward(&fp.lnf, w, p(idx.lnf_g, w), &dyf, &mut dg, &mut db, &mut dx);
            add_into(grads, idx.lnf_g, &dg);
            add_into(grads, idx.lnf_b, &db);
        }
        if let (Some(c), Some(ci)) = (&fp.cond, &idx.cond) {
            mod_linear_backward(grads, params, ci.final_w, ci.final_b, &c.sc, &dfinal_mod, &mut dcond_sc);
        }

        for bi in (0..cfg.depth).rev() {
            let b = &idx.blocks[bi];
            let m = fp.cond.as_ref().map(|c| c.block_mods[bi].as_slice());
            let mut dmod = vec![0.0; 6 * w];
            self.block_backward(params, b, m, &fp.blocks[bi], &mut dx, &mut dmod, grads);
            if let (Some(c), Some((mw, mb))) = (&fp.cond, b.modulation) {
                mod_linear_backward(grads, params, mw, mb, &c.sc, &dmod, &mut dcond_sc);
            }
        }

        // time MLP
        if let (Some(c), Some(ci)) = (&fp.cond, &idx.cond) {
            let dc: Vec<f64> = dcond_sc.iter().zip(&c.c).map(|(d, &x)| d * silu_grad(x)).collect();
            let sa1: Vec<f64> = c.a1.iter().map(|&a| silu(a)).collect();
            let dsa1 = linear_grad(grads, ci.w2, ci.b2, &sa1, 1, w, p(ci.w2, w * w), w, &dc, true).expect("dx requested");
            let da1: Vec<f64> = dsa1.iter().zip(&c.a1).map(|(d, &x)| d * silu_grad(x)).collect();
            linear_grad(grads, ci.w1, ci.b1, &c.temb, 1, w, p(ci.w1, w * w), w, &da1, false);
        }

        // embeddings
        for slot in 0..l {
            let drow = &dx[slot * w..(slot + 1) * w];
            let tok = input.tokens[slot] as usize;
            add_into(grads, idx.tok + tok * w, drow);
            if let (Some(table), Some(r)) = (idx.pos_table, fp.pos_rows[slot]) {
                add_into(grads, table + r * w, drow);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        params: &[f64],
        b: &BlockIdx,
        m: Option<&[f64]>,
        cache: &BlockCache,
        dx: &mut [f64],
        dmod: &mut [f64],
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let (l, w, f) = (cfg.seq_len, cfg.width, cfg.ffn_width());
        let (nh, dh) = (cfg.heads, cfg.head_dim());
        let p = |off: usize, len: usize| &params[off..off + len];
        let (_, scale1, gate1) = split_mod(m, w, false);
        let (_, scale2, gate2) = split_mod(m, w, true);
        let has_mod = m.is_some();
        let (dm1, dm2) = dmod.split_at_mut(3 * w);
        let (dshift1, rest1) = dm1.split_at_mut(w);
        let (dscale1, dgate1) = rest1.split_at_mut(w);
        let (dshift2, rest2) = dm2.split_at_mut(w);
        let (dscale2, dgate2) = rest2.split_at_mut(w);

        // feed-forward branch
        let dff = gated_backward(dx, w, &cache.f, gate2, has_mod.then_some(dgate2));
        let dg = linear_grad(grads, b.ff2_w, b.ff2_b, &cache.g, l, f, p(b.ff2_w, f * w), w, &dff, true).expect("dx requested");
        let du: Vec<f64> = dg.iter().zip(&cache.u).map(|(d, &u)| d * gelu_grad(u)).collect();
        let dh2 = linear_grad(grads, b.ff1_w, b.ff1_b, &cache.h2, l, w, p(b.ff1_w, w * f), f, &du, true).expect("dx requested");
        let dy2 = modulate_backward(&cache.y2, w, scale2, &dh2, has_mod.then_some((dshift2, dscale2)));
        let (mut dgam, mut dbet) = (vec![0.0; w], vec![0.0; w]);
        layer_norm_backward(&cache.ln2, w, p(b.ln2_g, w), &dy2, &mut dgam, &mut dbet, dx);
        add_into(grads, b.ln2_g, &dgam);
        add_into(grads, b.ln2_b, &dbet);

        // attention branch
        let do_ = gated_backward(dx, w, &cache.o, gate1, has_mod.then_some(dgate1));
        let dattn = linear_grad(grads, b.out_w, b.out_b, &cache.attn, l, w, p(b.out_w, w * w), w, &do_, true).expect("dx requested");

        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; l * 3 * w];
        let mut dp = vec![0.0; l * l];
        for h in 0..nh {
            let probs = &cache.probs[h * l * l..(h + 1) * l * l];
            let da = &dattn[h * dh..];
            let vv = &cache.qkv[2 * w + h * dh..];
            // dP = dA·Vᵀ ; dV = Pᵀ·dA
            gemm(l, dh, l, 1.0, da, rows(w), vv, trans(3 * w), 0.0, &mut dp, rows(l));
            gemm(l, l, dh, 1.0, probs, trans(l), da, rows(w), 0.0, &mut dqkv[2 * w + h * dh..], rows(3 * w));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (prow, drow) in probs.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            let q = &cache.qkv[h * dh..];
            let k = &cache.qkv[w + h * dh..];
            gemm(l, l, dh, scale, &dp, rows(l), k, rows(3 * w), 0.0, &mut dqkv[h * dh..], rows(3 * w));
            gemm(l, l, dh, scale, &dp, trans(l), q, rows(3 * w), 0.0, &mut dqkv[w + h * dh..], rows(3 * w));
        }
        let dh1 = linear_grad(grads, b.qkv_w, b.qkv_b, &cache.h1, l, w, p(b.qkv_w, w * 3 * w), 3 * w, &dqkv, true).expect("dx requested");
        let dy1 = modulate_backward(&cache.y1, w, scale1, &dh1, has_mod.then_some((dshift1, dscale1)));
        let (mut dgam, mut dbet) = (vec![0.0; w], vec![0.0; w]);
        layer_norm_backward(&cache.ln1, w, p(b.ln1_g, w), &dy1, &mut dgam, &mut dbet, dx);
        add_into(grads, b.ln1_g, &dgam);
        add_into(grads, b.ln1_b, &dbet);
    }
}

/// Residual `x ← x + (1 + gate)·branch`: returns `∂/∂branch` and
/// accumulates `∂/∂gate`. The skip path leaves `dx` unchanged.
fn gated_backward(dx: &[f64], w: usize, branch: &[f64], gate: Option<&[f64]>, dgate: Option<&mut [f64]>) -> Vec<f64> {
    match (gate, dgate) {
        (Some(g), Some(dg)) => {
            let mut out = vec![0.0; dx.len()];
            for (r, drow) in dx.chunks_exact(w).enumerate() {
                for j in 0..w {
                    out[r * w + j] = drow[j] * (1.0 + g[j]);
                    dg[j] += drow[j] * branch[r * w + j];
                }
            }
            out
        }
        _ => dx.to_vec(),
    }
}

/// Backward of `m = sc·W + b` for a single conditioning vector.
fn mod_linear_backward(
    grads: &mut [f64],
    params: &[f64],
    w_off: usize,
    b_off: usize,
    sc: &[f64],
    dm: &[f64],
    dsc: &mut [f64],
) {
    let k = sc.len();
    let n = dm.len();
    let dx = linear_grad(grads, w_off, b_off, sc, 1, k, &params[w_off..w_off + k * n], n, dm, true).expect("dx requested");
    dsc.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
}

/// [`linear_backward`] accumulating straight into the weight and bias
/// ranges of `grads`.
#[allow(clippy::too_many_arguments)]
fn linear_grad(
    grads: &mut [f64],
    w_off: usize,
    b_off: usize,
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dy: &[f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (dw, db) = if w_off < b_off {
        let (lo, hi) = grads.split_at_mut(b_off);
        (&mut lo[w_off..w_off + k * n], &mut hi[..n])
    } else {
        let (lo, hi) = grads.split_at_mut(w_off);
        (&mut hi[..k * n], &mut lo[b_off..b_off + n])
    };
    linear_backward(x, m, k, w, n, dy, dw, db, want_dx)
}

fn add_into(grads: &mut [f64], offset: usize, delta: &[f64]) {
    grads[offset..offset + delta.len()]
        .iter_mut()
        .zip(delta)
        .for_each(|(a, b)| *a += b);
}
