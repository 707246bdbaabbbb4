//! Forward/backward kernels shared by the graph ops.

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Geometry of a multi-head attention call over `[batch, len, dim]` inputs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn base(&self, b: usize, h: usize) -> usize {
        b * self.len * self.dim + h * self.head_dim()
    }
}

/// Masked in-place softmax of one score row. Keys past `end` and keys whose
/// mask entry is false get probability zero; a row with no visible key is
/// all zeros.
fn softmax_row<T: Scalar>(row: &mut [T], end: usize, mask: Option<&[bool]>) {
    let (live, dead) = row.split_at_mut(end);
    dead.iter_mut().for_each(|x| *x = T::zero());
    let mut max = T::neg_infinity();
    match mask {
        None => live.iter().for_each(|&x| max = max.max(x)),
        Some(m) => live.iter().zip(m).for_each(|(&x, &keep)| {
            if keep {
                max = max.max(x)
            }
        }),
    }
    if max == T::neg_infinity() {
        live.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    match mask {
        None => live.iter_mut().for_each(|x| {
            *x = (*x - max).exp();
            total += *x;
        }),
        Some(m) => live.iter_mut().zip(m).for_each(|(x, &keep)| {
            *x = if keep { (*x - max).exp() } else { T::zero() };
            total += *x;
        }),
    }
    let inv = T::one() / total;
    live.iter_mut().for_each(|x| *x *= inv);
}

/// Scaled dot-product attention. Returns `(output, probs)` where `probs`
/// is laid out `[batch, heads, len, len]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let (l, d, dh) = (s.len, s.dim, s.head_dim());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); s.batch * l * d];
    let mut probs = vec![T::zero(); s.batch * s.heads * l * l];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let base = s.base(b, h);
            let p = &mut probs[(b * s.heads + h) * l * l..][..l * l];
            T::gemm(
                l,
                dh,
                l,
                scale,
                &q[base..],
                d as isize,
                1,
                &k[base..],
                1,
                d as isize,
                T::zero(),
                p,
                l as isize,
                1,
            );
            let mask = key_mask.map(|m| &m[b * l..(b + 1) * l]);
            for i in 0..l {
                let end = if causal { i + 1 } else { l };
                softmax_row(&mut p[i * l..(i + 1) * l], end, mask);
            }
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                l as isize,
                1,
                &v[base..],
                d as isize,
                1,
                T::zero(),
                &mut out[base..],
                d as isize,
                1,
            );
        }
    }
    (out, probs)
}

/// Gradients of attention w.r.t. `(q, k, v)` given the output gradient.
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (l, d, dh) = (s.len, s.dim, s.head_dim());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let n = s.batch * l * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = vec![T::zero(); l * l];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let base = s.base(b, h);
            let p = &probs[(b * s.heads + h) * l * l..][..l * l];
            // dP = dO V^T
            T::gemm(
                l,
                dh,
                l,
                T::one(),
                &dout[base..],
                d as isize,
                1,
                &v[base..],
                1,
                d as isize,
                T::zero(),
                &mut dp,
                l as isize,
                1,
            );
            // dV = P^T dO
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                1,
                l as isize,
                &dout[base..],
                d as isize,
                1,
                T::zero(),
                &mut dv[base..],
                d as isize,
                1,
            );
            // dS = P * (dP - rowsum(P * dP)), folded with the score scale.
            for i in 0..l {
                let prow = &p[i * l..(i + 1) * l];
                let drow = &mut dp[i * l..(i + 1) * l];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in drow.iter_mut().zip(prow) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                l as isize,
                1,
                &k[base..],
                d as isize,
                1,
                T::zero(),
                &mut dq[base..],
                d as isize,
                1,
            );
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                1,
                l as isize,
                &q[base..],
                d as isize,
                1,
                T::zero(),
                &mut dk[base..],
                d as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}

/// Row-wise layer normalization; returns `(y, mean, rstd)`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::from_usize(dim).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (c, out) in y[r * dim..(r + 1) * dim].iter_mut().enumerate() {
            *out = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub(crate) struct LayerNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dim: usize,
) -> LayerNormGrads<T> {
    let rows = x.len() / dim;
    let inv_d = T::one() / T::from_usize(dim).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    let mut xhat = vec![T::zero(); dim];
    for r in 0..rows {
        let (mean, rstd) = (means[r], rstds[r]);
        let xr = &x[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..dim {
            xhat[c] = (xr[c] - mean) * rstd;
            dxhat[c] = dyr[c] * gamma[c];
            dgamma[c] += dyr[c] * xhat[c];
            dbeta[c] += dyr[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for c in 0..dim {
            dx[r * dim + c] = rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` is several times slower.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let th = fast_tanh(c * (x + a * x * x * x));
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
