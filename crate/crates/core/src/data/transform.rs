use rand::seq::SliceRandom;

use super::manifest::Split;
use crate::error::{CtsError, Result};
use crate::metrics::LabelMap;
use crate::tensor::{RngState, Tensor};

/// Split sizes `(train, val, test)` for `n` items: floors of 70% and 10%,
/// the remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Deterministic seeded 70/10/20 assignment of `n` items, in item order.
pub fn split_assignment(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(CtsError::data(format!("splitting needs at least 10 samples, got {}", n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(seed));
    let (train, val, _) = split_sizes(n);
    let mut out = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < train {
            Split::Train
        } else if pos < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centres
/// (align-corners false), sampling positions clamped to the source.
pub fn resize_bilinear(img: &Tensor<f32>, out_w: usize, out_h: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = img.data();
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized above")
}

/// Nearest-neighbour label resize: destination index `d` reads source
/// index `floor(d * in / out)`.
pub fn resize_nearest(mask: &LabelMap, out_w: usize, out_h: usize) -> LabelMap {
    let mut labels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = y * mask.height / out_h;
        for x in 0..out_w {
            let sx = x * mask.width / out_w;
            labels.push(mask.labels[sy * mask.width + sx]);
        }
    }
    LabelMap { width: out_w, height: out_h, labels }
}
