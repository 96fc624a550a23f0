//! Forward and backward passes over the flat parameter buffer.
//!
//! The final block only computes its query, attention and feed-forward rows
//! at the mask position, since nothing downstream reads the other positions.

use super::ops::{
    add_bias, bias_grad, dot, gelu, gelu_grad, layernorm, layernorm_backward, logsumexp,
    matmul_add, matmul_at_add, matmul_bt_add, softmax_in_place, softplus, LnCache,
};
use super::{Architecture, BlockOffsets, Objective, ScorerParams};
use crate::scorer::{sigmoid, Aggregate, ScorerError};

struct BlockCache {
    rows: Vec<usize>,
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct ForwardCache {
    tokens: Vec<usize>,
    dropped: Vec<bool>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    z: Vec<f64>,
}

fn check_input(params: &ScorerParams, tokens: &[usize], mask: usize) -> Result<(), ScorerError> {
    let arch = params.architecture();
    if tokens.len() > arch.max_len {
        return Err(ScorerError::SequenceTooLong {
            len: tokens.len(),
            max: arch.max_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= arch.vocab_size) {
        return Err(ScorerError::TokenOutOfRange {
            token,
            vocab: arch.vocab_size,
        });
    }
    if mask >= tokens.len() {
        return Err(ScorerError::MaskPosition {
            position: mask,
            len: tokens.len(),
        });
    }
    Ok(())
}

fn slice(p: &[f64], offset: usize, len: usize) -> &[f64] {
    &p[offset..offset + len]
}

fn slice_mut(p: &mut [f64], offset: usize, len: usize) -> &mut [f64] {
    &mut p[offset..offset + len]
}

fn gather(x: &[f64], rows: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn block_forward(
    p: &[f64],
    o: &BlockOffsets,
    arch: &Architecture,
    x: &[f64],
    rows: Vec<usize>,
) -> (Vec<f64>, BlockCache) {
    let (d, f, heads, dh) = (arch.width, arch.ff_width, arch.heads, arch.head_width());
    let t_len = x.len() / d;
    let r_len = rows.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layernorm(x, slice(p, o.ln1_gain, d), slice(p, o.ln1_bias, d), d);
    let a_rows = gather(&a, &rows, d);
    let mut q = vec![0.0; r_len * d];
    matmul_add(&a_rows, slice(p, o.wq, d * d), &mut q, r_len, d, d);
    add_bias(&mut q, slice(p, o.bq, d));
    let mut k = vec![0.0; t_len * d];
    matmul_add(&a, slice(p, o.wk, d * d), &mut k, t_len, d, d);
    add_bias(&mut k, slice(p, o.bk, d));
    let mut v = vec![0.0; t_len * d];
    matmul_add(&a, slice(p, o.wv, d * d), &mut v, t_len, d, d);
    add_bias(&mut v, slice(p, o.bv, d));

    let mut probs = vec![0.0; heads * r_len * t_len];
    let mut ctx = vec![0.0; r_len * d];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for r in 0..r_len {
            let qr = &q[r * d + hs.start..r * d + hs.end];
            let row = &mut probs[(h * r_len + r) * t_len..(h * r_len + r + 1) * t_len];
            for (t, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qr, &k[t * d + hs.start..t * d + hs.end]);
            }
            softmax_in_place(row);
            let out = &mut ctx[r * d + hs.start..r * d + hs.end];
            for (t, &w) in row.iter().enumerate() {
                for (c, &vv) in out.iter_mut().zip(&v[t * d + hs.start..t * d + hs.end]) {
                    *c += w * vv;
                }
            }
        }
    }

    let mut h1 = gather(x, &rows, d);
    matmul_add(&ctx, slice(p, o.wo, d * d), &mut h1, r_len, d, d);
    add_bias(&mut h1, slice(p, o.bo, d));

    let (c, ln2) = layernorm(&h1, slice(p, o.ln2_gain, d), slice(p, o.ln2_bias, d), d);
    let mut u = vec![0.0; r_len * f];
    matmul_add(&c, slice(p, o.w1, d * f), &mut u, r_len, d, f);
    add_bias(&mut u, slice(p, o.b1, f));
    let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
    let mut out = h1;
    matmul_add(&g, slice(p, o.w2, f * d), &mut out, r_len, f, d);
    add_bias(&mut out, slice(p, o.b2, d));

    (
        out,
        BlockCache {
            rows,
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            c,
            u,
            g,
        },
    )
}

/// Returns the gradient with respect to the block input `x[T×d]`.
fn block_backward(
    p: &[f64],
    o: &BlockOffsets,
    arch: &Architecture,
    cache: &BlockCache,
    dout: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let (d, f, heads, dh) = (arch.width, arch.ff_width, arch.heads, arch.head_width());
    let t_len = cache.k.len() / d;
    let r_len = cache.rows.len();
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward
    let mut dh1 = dout.to_vec();
    matmul_at_add(&cache.g, dout, slice_mut(grad, o.w2, f * d), r_len, f, d);
    bias_grad(dout, slice_mut(grad, o.b2, d));
    let mut du = vec![0.0; r_len * f];
    matmul_bt_add(dout, slice(p, o.w2, f * d), &mut du, r_len, d, f);
    for (g, &u) in du.iter_mut().zip(&cache.u) {
        *g *= gelu_grad(u);
    }
    matmul_at_add(&cache.c, &du, slice_mut(grad, o.w1, d * f), r_len, d, f);
    bias_grad(&du, slice_mut(grad, o.b1, f));
    let mut dc = vec![0.0; r_len * d];
    matmul_bt_add(&du, slice(p, o.w1, d * f), &mut dc, r_len, f, d);
    {
        let (dg2, db2) = grad[o.ln2_gain..].split_at_mut(o.ln2_bias - o.ln2_gain);
        layernorm_backward(
            &dc,
            &cache.ln2,
            slice(p, o.ln2_gain, d),
            d,
            &mut dh1,
            &mut dg2[..d],
            &mut db2[..d],
        );
    }

    // attention
    let mut dx = vec![0.0; t_len * d];
    for (ri, &row) in cache.rows.iter().enumerate() {
        for j in 0..d {
            dx[row * d + j] += dh1[ri * d + j];
        }
    }
    matmul_at_add(&cache.ctx, &dh1, slice_mut(grad, o.wo, d * d), r_len, d, d);
    bias_grad(&dh1, slice_mut(grad, o.bo, d));
    let mut dctx = vec![0.0; r_len * d];
    matmul_bt_add(&dh1, slice(p, o.wo, d * d), &mut dctx, r_len, d, d);

    let mut dq = vec![0.0; r_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut ds = vec![0.0; t_len];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for r in 0..r_len {
            let pr = &cache.probs[(h * r_len + r) * t_len..(h * r_len + r + 1) * t_len];
            let dc_r = &dctx[r * d + hs.start..r * d + hs.end];
            let mut weighted = 0.0;
            for t in 0..t_len {
                let dp = dot(dc_r, &cache.v[t * d + hs.start..t * d + hs.end]);
                ds[t] = dp;
                weighted += dp * pr[t];
                for (g, &c) in dv[t * d + hs.start..t * d + hs.end].iter_mut().zip(dc_r) {
                    *g += pr[t] * c;
                }
            }
            let q_r = &cache.q[r * d + hs.start..r * d + hs.end];
            let dq_r = &mut dq[r * d + hs.start..r * d + hs.end];
            for t in 0..t_len {
                let s = pr[t] * (ds[t] - weighted) * scale;
                if s == 0.0 {
                    continue;
                }
                let k_t = &cache.k[t * d + hs.start..t * d + hs.end];
                for (g, &kv) in dq_r.iter_mut().zip(k_t) {
                    *g += s * kv;
                }
                for (g, &qv) in dk[t * d + hs.start..t * d + hs.end].iter_mut().zip(q_r) {
                    *g += s * qv;
                }
            }
        }
    }

    let mut da = vec![0.0; t_len * d];
    let a_rows = gather(&cache.a, &cache.rows, d);
    matmul_at_add(&a_rows, &dq, slice_mut(grad, o.wq, d * d), r_len, d, d);
    bias_grad(&dq, slice_mut(grad, o.bq, d));
    let mut da_rows = vec![0.0; r_len * d];
    matmul_bt_add(&dq, slice(p, o.wq, d * d), &mut da_rows, r_len, d, d);
    for (ri, &row) in cache.rows.iter().enumerate() {
        for j in 0..d {
            da[row * d + j] += da_rows[ri * d + j];
        }
    }
    matmul_at_add(&cache.a, &dk, slice_mut(grad, o.wk, d * d), t_len, d, d);
    bias_grad(&dk, slice_mut(grad, o.bk, d));
    matmul_bt_add(&dk, slice(p, o.wk, d * d), &mut da, t_len, d, d);
    matmul_at_add(&cache.a, &dv, slice_mut(grad, o.wv, d * d), t_len, d, d);
    bias_grad(&dv, slice_mut(grad, o.bv, d));
    matmul_bt_add(&dv, slice(p, o.wv, d * d), &mut da, t_len, d, d);

    let (dg1, db1) = grad[o.ln1_gain..].split_at_mut(o.ln1_bias - o.ln1_gain);
    layernorm_backward(
        &da,
        &cache.ln1,
        slice(p, o.ln1_gain, d),
        d,
        &mut dx,
        &mut dg1[..d],
        &mut db1[..d],
    );
    dx
}

/// Rows flagged in `dropped` carry only their position embedding.
fn forward(params: &ScorerParams, tokens: &[usize], mask: usize, dropped: &[bool]) -> ForwardCache {
    let arch = params.architecture();
    let off = params.offsets();
    let p = params.data();
    let d = arch.width;
    let t_len = tokens.len();

    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = slice(p, off.tok_emb + tok * d, d);
        let pe = slice(p, off.pos_emb + t * d, d);
        let keep = if dropped.get(t).copied().unwrap_or(false) { 0.0 } else { 1.0 };
        for j in 0..d {
            x[t * d + j] = keep * e[j] + pe[j];
        }
    }
    let mut blocks = Vec::with_capacity(arch.blocks);
    for (b, o) in off.blocks.iter().enumerate() {
        let rows = if b + 1 == arch.blocks {
            vec![mask]
        } else {
            (0..t_len).collect()
        };
        let (out, cache) = block_forward(p, o, arch, &x, rows);
        x = out;
        blocks.push(cache);
    }
    let (z, lnf) = layernorm(&x, slice(p, off.lnf_gain, d), slice(p, off.lnf_bias, d), d);
    ForwardCache {
        tokens: tokens.to_vec(),
        dropped: dropped.to_vec(),
        blocks,
        lnf,
        z,
    }
}

fn output_logit(params: &ScorerParams, z: &[f64], word: usize) -> f64 {
    let off = params.offsets();
    let d = params.architecture().width;
    dot(slice(params.data(), off.tok_emb + word * d, d), z) + params.data()[off.out_bias + word]
}

/// Adds the gradient of the selected output logits (weighted by `dlogits`) to
/// `grad`.
fn backward(params: &ScorerParams, cache: &ForwardCache, words: &[usize], dlogits: &[f64], grad: &mut [f64]) {
    let arch = params.architecture();
    let off = params.offsets();
    let p = params.data();
    let d = arch.width;

    let mut dz = vec![0.0; d];
    for (&w, &g) in words.iter().zip(dlogits) {
        let e = slice(p, off.tok_emb + w * d, d);
        let de = slice_mut(grad, off.tok_emb + w * d, d);
        for j in 0..d {
            dz[j] += g * e[j];
            de[j] += g * cache.z[j];
        }
        grad[off.out_bias + w] += g;
    }
    let mut dx = vec![0.0; d];
    {
        let (dg, db) = grad[off.lnf_gain..].split_at_mut(off.lnf_bias - off.lnf_gain);
        layernorm_backward(
            &dz,
            &cache.lnf,
            slice(p, off.lnf_gain, d),
            d,
            &mut dx,
            &mut dg[..d],
            &mut db[..d],
        );
    }
    for (o, bc) in off.blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(p, o, arch, bc, &dx, grad);
    }
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        if !cache.dropped.get(t).copied().unwrap_or(false) {
            for (g, v) in slice_mut(grad, off.tok_emb + tok * d, d).iter_mut().zip(row) {
                *g += v;
            }
        }
        for (g, v) in slice_mut(grad, off.pos_emb + t * d, d).iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Full vocabulary logits at the mask position.
pub(crate) fn mask_logits(params: &ScorerParams, tokens: &[usize], mask: usize) -> Result<Vec<f64>, ScorerError> {
    check_input(params, tokens, mask)?;
    let cache = forward(params, tokens, mask, &[]);
    Ok((0..params.architecture().vocab_size)
        .map(|w| output_logit(params, &cache.z, w))
        .collect())
}

/// Relevance logit `s` with `p1 = sigmoid(s)` and its derivative with respect
/// to each positive and negative word logit.
fn relevance_logit(pos: &[f64], neg: &[f64], aggregate: Aggregate) -> (f64, Vec<f64>, Vec<f64>) {
    match aggregate {
        Aggregate::Probs => {
            let (lp, wp) = logsumexp(pos);
            let (ln, wn) = logsumexp(neg);
            (lp - ln, wp, wn.into_iter().map(|w| -w).collect())
        }
        Aggregate::Logits => (
            pos.iter().sum::<f64>() - neg.iter().sum::<f64>(),
            vec![1.0; pos.len()],
            vec![-1.0; neg.len()],
        ),
    }
}

/// Binary cross-entropy of one pair. With `grad`, adds `scale · dL/dθ`.
pub(crate) fn loss_and_grad(
    params: &ScorerParams,
    tokens: &[usize],
    mask: usize,
    y: u8,
    objective: &Objective,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64, ScorerError> {
    loss_and_grad_dropped(params, tokens, mask, &[], y, objective, grad)
}

/// [`loss_and_grad`] with the token embeddings of `dropped` rows zeroed.
pub(crate) fn loss_and_grad_dropped(
    params: &ScorerParams,
    tokens: &[usize],
    mask: usize,
    dropped: &[bool],
    y: u8,
    objective: &Objective,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64, ScorerError> {
    check_input(params, tokens, mask)?;
    let cache = forward(params, tokens, mask, dropped);
    let mv = &objective.verbalizer;
    let pos: Vec<f64> = mv.positive().iter().map(|&w| output_logit(params, &cache.z, w)).collect();
    let neg: Vec<f64> = mv.negative().iter().map(|&w| output_logit(params, &cache.z, w)).collect();
    let (s, dpos, dneg) = relevance_logit(&pos, &neg, objective.aggregate);
    let loss = if y == 1 { softplus(-s) } else { softplus(s) };
    if let Some((grad, scale)) = grad {
        let dl_ds = (sigmoid(s) - y as f64) * scale;
        let words: Vec<usize> = mv.positive().iter().chain(mv.negative()).copied().collect();
        let dlogits: Vec<f64> = dpos.iter().chain(&dneg).map(|g| g * dl_ds).collect();
        backward(params, &cache, &words, &dlogits, grad);
    }
    Ok(loss)
}
