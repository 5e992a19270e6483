//! Normalization and softmax kernels.

use super::linalg::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) struct NormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch norm over `(N, H, W)` per channel of an NCHW buffer.
///
/// `stats` is `Some((mean, var))` to normalize with fixed statistics (eval
/// mode); otherwise batch statistics are used and returned through
/// `batch_stats` as `(mean, biased var)`.
pub(crate) fn batch_norm_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    batch_stats: &mut Vec<(T, T)>,
) -> NormOut<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let eps = T::from_f64(NORM_EPS);
    let count = T::from_f64((n * hw) as f64);
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s = s + x[off..off + hw].iter().copied().sum::<T>();
                }
                let mean = s / count;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for &v in &x[off..off + hw] {
                        let d = v - mean;
                        sq = sq + d * d;
                    }
                }
                let var = sq / count;
                batch_stats.push((mean, var));
                (mean, var)
            }
        };
        means[ch] = mean;
        inv_std[ch] = T::one() / (var + eps).sqrt();
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (m, is) = (means[ch], inv_std[ch]);
            for i in off..off + hw {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    NormOut { y, xhat, inv_std }
}

pub(crate) struct AffineGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    gout: &[T],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> AffineGrads<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_f64((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] = dgamma[ch] + gout[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + gout[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gout.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let g = gamma[ch];
            let is = inv_std[ch];
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    g * is * (gout[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / count)
                } else {
                    g * is * gout[i]
                };
            }
        }
    }
    AffineGrads { dx, dgamma, dbeta }
}

/// Layer norm over the last axis of extent `d`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    d: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
) -> NormOut<T> {
    let eps = T::from_f64(NORM_EPS);
    let dn = T::from_f64((d) as f64);
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[r * d + j] = xh;
            y[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    NormOut { y, xhat, inv_std }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    d: usize,
    gout: &[T],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
) -> AffineGrads<T> {
    let dn = T::from_f64((d) as f64);
    let rows = gout.len() / d;
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); gout.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let go = &gout[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + go[j] * xh[j];
            dbeta[j] = dbeta[j] + go[j];
            dxhat[j] = go[j] * gamma[j];
            s1 = s1 + dxhat[j];
            s2 = s2 + dxhat[j] * xh[j];
        }
        let is = inv_std[r];
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - (s1 + xh[j] * s2) / dn);
        }
    }
    AffineGrads { dx, dgamma, dbeta }
}

/// Max-shifted softmax over rows of length `d`.
pub(crate) fn softmax_rows<T: Scalar>(d: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total = total + *o;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|o| *o = *o * inv);
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Scalar>(d: usize, y: &[T], gout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(d).zip(gout.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    dx
}
