use crate::error::{CtsError, Result};

/// Row-major boolean grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(CtsError::data(format!(
                "mask of {}x{} needs {} entries, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i / width, i % width)).collect();
        BinaryMask { width, height, bits }
    }

    /// Pixels of `labels` equal to `class`.
    pub fn from_labels(width: usize, height: usize, labels: &[u8], class: u8) -> Result<Self> {
        BinaryMask::new(width, height, labels.iter().map(|&l| l == class).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    pub(crate) fn check_extent(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(CtsError::data(format!(
                "mask extents differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Dice coefficient `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_extent(gt)?;
    let inter = pred.bits.iter().zip(&gt.bits).filter(|(&a, &b)| a && b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with a 4-neighbour that is background or outside the
/// image, as `(row, col)` in row-major order.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}
