//! Dense kernels on row-major slices.

use super::Scalar;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `grad[k,n] += a[m,k]ᵀ · d[m,n]`
pub fn matmul_tn_acc<F: Scalar>(a: &[F], d: &[F], grad: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(grad.len(), k * n);
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (g, &dv) in grad[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *g = *g + av * dv;
            }
        }
    }
}

/// `out[m,k] = d[m,n] · b[k,n]ᵀ`
pub fn matmul_nt<F: Scalar>(d: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// RMS normalization of each row; returns the normalized rows and the
/// per-row inverse RMS.
pub fn rmsnorm<F: Scalar>(x: &[F], gain: &[F], rows: usize, eps: f64) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let mut out = vec![F::zero(); rows * d];
    let mut inv = vec![F::zero(); rows];
    let eps = F::from_f64(eps);
    let dn = F::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / dn;
        let ir = (ms + eps).sqrt().recip();
        inv[r] = ir;
        for ((o, &xv), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * ir * g;
        }
    }
    (out, inv)
}

/// Backward of [`rmsnorm`]: accumulates the gain gradient and returns the
/// input gradient.
pub fn rmsnorm_backward<F: Scalar>(x: &[F], gain: &[F], inv: &[F], dy: &[F], dgain: &mut [F]) -> Vec<F> {
    let d = gain.len();
    let rows = inv.len();
    let dn = F::from_f64(d as f64);
    let mut dx = vec![F::zero(); rows * d];
    let mut gdy = vec![F::zero(); d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = inv[r];
        for j in 0..d {
            dgain[j] = dgain[j] + dyr[j] * xr[j] * ir;
            gdy[j] = dyr[j] * gain[j];
        }
        let proj = dot(&gdy, xr) / dn;
        let ir3 = ir * ir * ir;
        for j in 0..d {
            dx[r * d + j] = gdy[j] * ir - xr[j] * ir3 * proj;
        }
    }
    dx
}

/// Rotary angles for positions `0..len` over a head of width `head_dim`:
/// `(cos, sin)` tables of shape `[len, head_dim/2]`.
pub fn rope_tables<F: Scalar>(len: usize, head_dim: usize, theta: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for pos in 0..len {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let a = pos as f64 * freq;
            cos.push(F::from_f64(a.cos()));
            sin.push(F::from_f64(a.sin()));
        }
    }
    (cos, sin)
}

/// Rotates each head's adjacent pairs in place. `inverse` applies the
/// transpose rotation, which is the backward map.
pub fn rope_apply<F: Scalar>(x: &mut [F], rows: usize, d: usize, head_dim: usize, cos: &[F], sin: &[F], inverse: bool) {
    let half = head_dim / 2;
    for r in 0..rows {
        for h in 0..d / head_dim {
            let base = r * d + h * head_dim;
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let s = if inverse { -s } else { s };
                let (a, b) = (x[base + 2 * i], x[base + 2 * i + 1]);
                x[base + 2 * i] = a * c - b * s;
                x[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

/// In-place row softmax.
pub fn softmax_rows<F: Scalar>(x: &mut [F], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}
