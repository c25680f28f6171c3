//! Building blocks with hand-written derivatives. Matrices are row-major;
//! functions taking `stride`/`off` address one head's columns inside a
//! packed `rows × d_emb` matrix.

use super::real::gemm;
use super::{ModelError, Real};

pub const RMS_EPS: f64 = 1e-6;

/// x / sqrt(mean(x²) + ε) ⊙ gain, row by row. Stores 1/rms per row in `rinv`.
pub fn rmsnorm_rows<T: Real>(x: &[T], gain: &[T], out: &mut [T], rinv: &mut [T]) {
    let d = gain.len();
    let eps = T::of(RMS_EPS);
    let inv_d = T::one() / T::of(d as f64);
    for ((xr, yr), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rinv.iter_mut()) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
        *r = T::one() / (ms + eps).sqrt();
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * *r * g;
        }
    }
}

/// Single-vector convenience form.
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut r = [T::zero()];
    rmsnorm_rows(x, gain, &mut out, &mut r);
    out
}

/// Accumulates dx and dgain.
pub fn rmsnorm_rows_backward<T: Real>(x: &[T], gain: &[T], rinv: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let d = gain.len();
    let inv_d = T::one() / T::of(d as f64);
    for (((xr, dyr), dxr), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(rinv) {
        let mut dot = T::zero();
        for i in 0..d {
            let gdy = gain[i] * dyr[i];
            dot += gdy * xr[i];
            dgain[i] += dyr[i] * xr[i] * r;
        }
        let c = dot * r * r * r * inv_d;
        for i in 0..d {
            dxr[i] += gain[i] * dyr[i] * r - c * xr[i];
        }
    }
}

/// Precomputed RoPE angles for positions `0..max_len` and one head width.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(d_head: usize, max_len: usize, base: f64) -> Result<Self, ModelError> {
        if !d_head.is_multiple_of(2) {
            return Err(ModelError::OddHeadDim(d_head));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        Ok(Self { half, cos, sin })
    }

    pub fn max_len(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotates pairs (2i, 2i+1) of one head vector by pos·base^(−2i/d).
    #[inline]
    pub fn rotate(&self, x: &mut [T], pos: usize) {
        let (c, s) = (&self.cos[pos * self.half..][..self.half], &self.sin[pos * self.half..][..self.half]);
        for i in 0..self.half {
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c[i] - b * s[i];
            x[2 * i + 1] = a * s[i] + b * c[i];
        }
    }

    /// Transpose of [`rotate`](Self::rotate), used for gradients.
    #[inline]
    pub fn rotate_back(&self, x: &mut [T], pos: usize) {
        let (c, s) = (&self.cos[pos * self.half..][..self.half], &self.sin[pos * self.half..][..self.half]);
        for i in 0..self.half {
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c[i] + b * s[i];
            x[2 * i + 1] = -a * s[i] + b * c[i];
        }
    }
}

/// Rotates each row of `x` (rows × d_head) at the given positions.
pub fn rope_apply<T: Real>(x: &[T], d_head: usize, positions: &[usize], base: f64) -> Result<Vec<T>, ModelError> {
    let max = positions.iter().copied().max().map_or(0, |m| m + 1);
    let table = RopeTable::new(d_head, max, base)?;
    let mut out = x.to_vec();
    for (row, &p) in out.chunks_exact_mut(d_head).zip(positions) {
        table.rotate(row, p);
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Offset of row `i` in a packed lower-triangular matrix.
#[inline]
pub fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

/// Causal attention for one head of one sequence.
///
/// `q`, `k`, `v` and `out` start at the sequence's first row, with row
/// stride `stride` and the head's columns at `off..off + dk`. Row `i` of the
/// softmax weights is written to `probs[tri(i)..tri(i) + i + 1]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_head<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    stride: usize,
    off: usize,
    dk: usize,
    len: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::one() / T::of(dk as f64).sqrt();
    for i in 0..len {
        let qi = &q[i * stride + off..][..dk];
        let row = &mut probs[tri(i)..tri(i) + i + 1];
        let mut max = T::neg_infinity();
        for (j, p) in row.iter_mut().enumerate() {
            let kj = &k[j * stride + off..][..dk];
            let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            *p = s;
            if s > max {
                max = s;
            }
        }
        let mut z = T::zero();
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            z += *p;
        }
        let zinv = T::one() / z;
        for p in row.iter_mut() {
            *p *= zinv;
        }
        let oi = &mut out[i * stride + off..][..dk];
        oi.iter_mut().for_each(|o| *o = T::zero());
        for (j, &p) in row.iter().enumerate() {
            let vj = &v[j * stride + off..][..dk];
            for (o, &x) in oi.iter_mut().zip(vj) {
                *o += p * x;
            }
        }
    }
}

/// Accumulates dq, dk, dv for one head of one sequence.
#[allow(clippy::too_many_arguments)]
pub fn attend_head_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    stride: usize,
    off: usize,
    dk: usize,
    len: usize,
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dkk: &mut [T],
    dv: &mut [T],
) {
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut dp = vec![T::zero(); len];
    for i in 0..len {
        let row = &probs[tri(i)..tri(i) + i + 1];
        let doi = &dout[i * stride + off..][..dk];
        let mut weighted = T::zero();
        for j in 0..=i {
            let vj = &v[j * stride + off..][..dk];
            dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
            weighted += row[j] * dp[j];
            let dvj = &mut dv[j * stride + off..][..dk];
            for (g, &x) in dvj.iter_mut().zip(doi) {
                *g += row[j] * x;
            }
        }
        for j in 0..=i {
            let ds = row[j] * (dp[j] - weighted) * scale;
            if ds == T::zero() {
                continue;
            }
            for c in 0..dk {
                dq[i * stride + off + c] += ds * k[j * stride + off + c];
                dkk[j * stride + off + c] += ds * q[i * stride + off + c];
            }
        }
    }
}

/// Single-head causal attention over `len` rows of width `dk`.
/// Returns the outputs and the dense `len × len` weight matrix.
pub fn masked_attention<T: Real>(q: &[T], k: &[T], v: &[T], dk: usize) -> (Vec<T>, Vec<T>) {
    let len = q.len() / dk;
    let mut probs = vec![T::zero(); tri(len)];
    let mut out = vec![T::zero(); len * dk];
    attend_head(q, k, v, dk, 0, dk, len, &mut probs, &mut out);
    let mut dense = vec![T::zero(); len * len];
    for i in 0..len {
        dense[i * len..i * len + i + 1].copy_from_slice(&probs[tri(i)..tri(i) + i + 1]);
    }
    (out, dense)
}

/// down(silu(x·W_gate) ⊙ x·W_up) for a batch of rows.
pub fn swiglu_ffn<T: Real>(x: &[T], w_gate: &[T], w_up: &[T], w_down: &[T], d: usize, f: usize) -> Vec<T> {
    let rows = x.len() / d;
    let mut g = vec![T::zero(); rows * f];
    let mut u = vec![T::zero(); rows * f];
    gemm(false, false, rows, f, d, x, w_gate, T::zero(), &mut g);
    gemm(false, false, rows, f, d, x, w_up, T::zero(), &mut u);
    for (gi, &ui) in g.iter_mut().zip(&u) {
        *gi = silu(*gi) * ui;
    }
    let mut out = vec![T::zero(); rows * d];
    gemm(false, false, rows, d, f, &g, w_down, T::zero(), &mut out);
    out
}
