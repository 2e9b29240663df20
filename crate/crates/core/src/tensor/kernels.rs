//! Slice-level numeric kernels. All reductions run in a fixed order.

use super::Float;

/// Dot product with eight fixed interleaved partial sums, combined pairwise.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, br, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Shapes for a multi-head attention call: `q` is `nq × d`, `k`/`v` are `nk × d`,
/// heads split the channel axis into contiguous `d / heads` slices.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Scaled dot-product attention. Returns the output and the per-(query, head)
/// log-sum-exp of the logits, which is all the backward pass needs.
///
/// Queries whose keys are all masked produce zeros and a `-inf` log-sum-exp.
pub fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    key_mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let AttnDims { nq, nk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut lse = vec![T::neg_infinity(); nq * heads];
    let mut logits = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = T::neg_infinity();
            for j in 0..nk {
                if key_mask.is_some_and(|m| !m[j]) {
                    logits[j] = T::neg_infinity();
                    continue;
                }
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                logits[j] = s;
                if s > max {
                    max = s;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            let inv = T::one() / sum;
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in logits.iter().enumerate() {
                if p != T::zero() {
                    axpy(p * inv, &v[j * d + off..j * d + off + dh], oi);
                }
            }
            lse[i * heads + h] = max + sum.ln();
        }
    }
    (out, lse)
}

/// Gradients of [`attention_forward`], recomputing probabilities row by row.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    d_out: &[T],
    dims: AttnDims,
    key_mask: Option<&[bool]>,
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let AttnDims { nq, nk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let l = lse[i * heads + h];
            if l == T::neg_infinity() {
                continue;
            }
            let qi = &q[i * d + off..i * d + off + dh];
            let doi = &d_out[i * d + off..i * d + off + dh];
            let delta = dot(doi, &out[i * d + off..i * d + off + dh]);
            for j in 0..nk {
                if key_mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let p = (dot(qi, kj) * scale - l).exp();
                if let Some(dv) = dv.as_deref_mut() {
                    axpy(p, doi, &mut dv[j * d + off..j * d + off + dh]);
                }
                let dp = dot(doi, &v[j * d + off..j * d + off + dh]);
                let ds = p * (dp - delta) * scale;
                if let Some(dq) = dq.as_deref_mut() {
                    axpy(ds, kj, &mut dq[i * d + off..i * d + off + dh]);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
}
