//! Forward pass with activation cache and the matching reverse pass.

use super::ops::{
    dot, matmul, matmul_nt, matmul_tn_acc, rmsnorm, rmsnorm_backward, rope_apply, rope_tables, sigmoid, softmax_rows,
};
use super::{DenoiserConfig, DenoiserParams, Scalar};
use crate::losses::WeightedCe;

struct LayerCache<F> {
    h_in: Vec<F>,
    inv1: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[heads, T, T]` attention probabilities
    probs: Vec<F>,
    attn: Vec<F>,
    h_mid: Vec<F>,
    inv2: Vec<F>,
    b: Vec<F>,
    up: Vec<F>,
    act: Vec<F>,
}

pub struct ForwardCache<F> {
    tokens: Vec<u32>,
    cos: Vec<F>,
    sin: Vec<F>,
    layers: Vec<LayerCache<F>>,
    h_last: Vec<F>,
    inv_f: Vec<F>,
    normed: Vec<F>,
    pub logits: Vec<F>,
}

pub fn forward<F: Scalar>(p: &DenoiserParams<F>, cfg: &DenoiserConfig, tokens: &[u32]) -> ForwardCache<F> {
    let t = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let nh = cfg.n_heads;
    let ff = cfg.ffn_hidden;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let (cos, sin) = rope_tables::<F>(t, hd, cfg.rope_theta);

    let mut h = Vec::with_capacity(t * d);
    for &tok in tokens {
        let r = tok as usize * d;
        h.extend_from_slice(&p.tok_emb.data[r..r + d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (a, inv1) = rmsnorm(&h, &lp.attn_norm.data, t, cfg.rms_norm_eps);
        let mut q = matmul(&a, &lp.wq.data, t, d, d);
        let mut k = matmul(&a, &lp.wk.data, t, d, d);
        let v = matmul(&a, &lp.wv.data, t, d, d);
        rope_apply(&mut q, t, d, hd, &cos, &sin, false);
        rope_apply(&mut k, t, d, hd, &cos, &sin, false);

        let mut probs = vec![F::zero(); nh * t * t];
        let mut attn = vec![F::zero(); t * d];
        for head in 0..nh {
            let off = head * hd;
            let pr = &mut probs[head * t * t..(head + 1) * t * t];
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + hd];
                for j in 0..t {
                    pr[i * t + j] = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                }
            }
            softmax_rows(pr, t);
            for i in 0..t {
                let out = &mut attn[i * d + off..i * d + off + hd];
                for j in 0..t {
                    let w = pr[i * t + j];
                    for (o, &vv) in out.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                        *o = *o + w * vv;
                    }
                }
            }
        }

        let proj = matmul(&attn, &lp.wo.data, t, d, d);
        let h_mid: Vec<F> = h.iter().zip(&proj).map(|(&x, &y)| x + y).collect();
        let (b, inv2) = rmsnorm(&h_mid, &lp.ffn_norm.data, t, cfg.rms_norm_eps);
        let up = matmul(&b, &lp.w_up.data, t, d, ff);
        let act: Vec<F> = up.iter().map(|&u| u * sigmoid(u)).collect();
        let down = matmul(&act, &lp.w_down.data, t, ff, d);
        let h_out: Vec<F> = h_mid.iter().zip(&down).map(|(&x, &y)| x + y).collect();

        layers.push(LayerCache { h_in: h, inv1, a, q, k, v, probs, attn, h_mid, inv2, b, up, act });
        h = h_out;
    }

    let (normed, inv_f) = rmsnorm(&h, &p.final_norm.data, t, cfg.rms_norm_eps);
    let logits = matmul(&normed, &p.lm_head.data, t, d, cfg.vocab_size);
    ForwardCache { tokens: tokens.to_vec(), cos, sin, layers, h_last: h, inv_f, normed, logits }
}

/// Loss `Σ coef·CE` and its gradient with respect to every parameter.
pub fn backward<F: Scalar>(
    p: &DenoiserParams<F>,
    cfg: &DenoiserConfig,
    cache: &ForwardCache<F>,
    objective: &WeightedCe,
) -> (f64, DenoiserParams<F>) {
    let t = cache.tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let nh = cfg.n_heads;
    let ff = cfg.ffn_hidden;
    let vs = cfg.vocab_size;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut g = p.zeros_like();

    // d loss / d logits
    let mut dlogits = vec![F::zero(); t * vs];
    let mut loss = 0.0f64;
    for term in &objective.terms {
        if term.coef == 0.0 {
            continue;
        }
        let row = &cache.logits[term.pos * vs..(term.pos + 1) * vs];
        let mut probs = row.to_vec();
        softmax_rows(&mut probs, vs);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).fold(F::zero(), |a, b| a + b).ln();
        let coef = F::from_f64(term.coef);
        loss += term.coef * Scalar::to_f64(lse - row[term.label as usize]);
        let drow = &mut dlogits[term.pos * vs..(term.pos + 1) * vs];
        for (j, (dz, &pj)) in drow.iter_mut().zip(&probs).enumerate() {
            let target = if j == term.label as usize { F::one() } else { F::zero() };
            *dz = *dz + coef * (pj - target);
        }
    }

    matmul_tn_acc(&cache.normed, &dlogits, &mut g.lm_head.data, t, d, vs);
    let dnormed = matmul_nt(&dlogits, &p.lm_head.data, t, vs, d);
    let mut dh = rmsnorm_backward(&cache.h_last, &p.final_norm.data, &cache.inv_f, &dnormed, &mut g.final_norm.data);

    for (li, (lp, lc)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut g.layers[li];

        // feed-forward branch: h_out = h_mid + silu(b W_up) W_down
        matmul_tn_acc(&lc.act, &dh, &mut lg.w_down.data, t, ff, d);
        let dact = matmul_nt(&dh, &lp.w_down.data, t, d, ff);
        let dup: Vec<F> = dact
            .iter()
            .zip(&lc.up)
            .map(|(&da, &u)| {
                let s = sigmoid(u);
                da * s * (F::one() + u * (F::one() - s))
            })
            .collect();
        matmul_tn_acc(&lc.b, &dup, &mut lg.w_up.data, t, d, ff);
        let db = matmul_nt(&dup, &lp.w_up.data, t, ff, d);
        let dmid_norm = rmsnorm_backward(&lc.h_mid, &lp.ffn_norm.data, &lc.inv2, &db, &mut lg.ffn_norm.data);
        let dh_mid: Vec<F> = dh.iter().zip(&dmid_norm).map(|(&x, &y)| x + y).collect();

        // attention branch: h_mid = h_in + attn W_o
        matmul_tn_acc(&lc.attn, &dh_mid, &mut lg.wo.data, t, d, d);
        let dattn = matmul_nt(&dh_mid, &lp.wo.data, t, d, d);

        let mut dq = vec![F::zero(); t * d];
        let mut dk = vec![F::zero(); t * d];
        let mut dv = vec![F::zero(); t * d];
        let mut dp = vec![F::zero(); t * t];
        for head in 0..nh {
            let off = head * hd;
            let pr = &lc.probs[head * t * t..(head + 1) * t * t];
            for i in 0..t {
                let doi = &dattn[i * d + off..i * d + off + hd];
                for j in 0..t {
                    dp[i * t + j] = dot(doi, &lc.v[j * d + off..j * d + off + hd]);
                    let w = pr[i * t + j];
                    for (dvv, &dov) in dv[j * d + off..j * d + off + hd].iter_mut().zip(doi) {
                        *dvv = *dvv + w * dov;
                    }
                }
            }
            // softmax backward, then the score scale
            for i in 0..t {
                let row = &pr[i * t..(i + 1) * t];
                let dprow = &mut dp[i * t..(i + 1) * t];
                let inner = dot(row, dprow);
                for (dpv, &pv) in dprow.iter_mut().zip(row) {
                    *dpv = pv * (*dpv - inner) * scale;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let ds = dp[i * t + j];
                    if ds == F::zero() {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * d + off + c] = dq[i * d + off + c] + ds * lc.k[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + ds * lc.q[i * d + off + c];
                    }
                }
            }
        }
        rope_apply(&mut dq, t, d, hd, &cache.cos, &cache.sin, true);
        rope_apply(&mut dk, t, d, hd, &cache.cos, &cache.sin, true);

        matmul_tn_acc(&lc.a, &dq, &mut lg.wq.data, t, d, d);
        matmul_tn_acc(&lc.a, &dk, &mut lg.wk.data, t, d, d);
        matmul_tn_acc(&lc.a, &dv, &mut lg.wv.data, t, d, d);
        let mut da = matmul_nt(&dq, &lp.wq.data, t, d, d);
        for (x, y) in da.iter_mut().zip(matmul_nt(&dk, &lp.wk.data, t, d, d)) {
            *x = *x + y;
        }
        for (x, y) in da.iter_mut().zip(matmul_nt(&dv, &lp.wv.data, t, d, d)) {
            *x = *x + y;
        }
        let dres = rmsnorm_backward(&lc.h_in, &lp.attn_norm.data, &lc.inv1, &da, &mut lg.attn_norm.data);
        dh = dh_mid.iter().zip(&dres).map(|(&x, &y)| x + y).collect();
    }

    for (pos, &tok) in cache.tokens.iter().enumerate() {
        let r = tok as usize * d;
        for (ge, &dv) in g.tok_emb.data[r..r + d].iter_mut().zip(&dh[pos * d..(pos + 1) * d]) {
            *ge = *ge + dv;
        }
    }
    (loss, g)
}
