//! Convolution (im2col + GEMM) and 2x2 max pooling kernels.

use super::linalg::{gemm, Mat, Scalar};
use super::parallel;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unrolls one sample `[c_in, h, w]` into `[c_in*k*k, h_out*w_out]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    let drow = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into one sample's input gradient.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oh in 0..g.h_out {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            prow[iw as usize] = prow[iw as usize] + src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let area = g.out_area();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let mut out = vec![T::zero(); g.n * out_len];
    parallel::for_each_chunk(&mut out, out_len, |n, dst| {
        for (co, plane) in dst.chunks_mut(area).enumerate() {
            plane.fill(b[co]);
        }
        let xs = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.c_out, g.c_in, area, Mat::n(w), Mat::n(xs), T::one(), dst);
        } else {
            let mut cols = vec![T::zero(); g.patch_len() * area];
            im2col(g, xs, &mut cols);
            gemm(g.c_out, g.patch_len(), area, Mat::n(w), Mat::n(&cols), T::one(), dst);
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let area = g.out_area();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let plen = g.patch_len();

    // Per-sample partial weight gradients, reduced in sample order below.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = parallel::map_indices(g.n, |n| {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let go = &gout[n * out_len..(n + 1) * out_len];
        let cols_owned;
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            let mut c = vec![T::zero(); plen * area];
            im2col(g, xs, &mut c);
            cols_owned = c;
            &cols_owned
        };
        let dw = want.1.then(|| {
            let mut dw = vec![T::zero(); g.c_out * plen];
            gemm(g.c_out, area, plen, Mat::n(go), Mat::t(cols), T::zero(), &mut dw);
            dw
        });
        let dx = want.0.then(|| {
            let mut dx = vec![T::zero(); in_len];
            if g.is_pointwise() {
                gemm(g.c_in, g.c_out, area, Mat::t(w), Mat::n(go), T::zero(), &mut dx);
            } else {
                let mut dcols = vec![T::zero(); plen * area];
                gemm(plen, g.c_out, area, Mat::t(w), Mat::n(go), T::zero(), &mut dcols);
                col2im(g, &dcols, &mut dx);
            }
            dx
        });
        (dx, dw)
    });

    let mut dx_all = want.0.then(|| Vec::with_capacity(g.n * in_len));
    let mut dw_all = want.1.then(|| vec![T::zero(); g.c_out * plen]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_len + co * area;
                let s: T = gout[start..start + area].iter().copied().sum();
                *acc = *acc + s;
            }
        }
        db
    });
    ConvGrads {
        dx: dx_all,
        dw: dw_all,
        db,
    }
}

/// 2x2 stride-2 max pooling. Returns values and the flat input index of each
/// window's maximum (first maximum in row-major window order).
pub(crate) fn max_pool2_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let candidates = [
                    base + (2 * i) * w + 2 * j,
                    base + (2 * i) * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
