use serde::{Deserialize, Serialize};

use crate::error::{CtsError, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Which loss terms skip classes absent from a sample's ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmptyClassMask {
    /// Every class enters the Dice mean.
    None,
    /// Absent classes leave the Dice class-mean; cross-entropy is untouched.
    Dice,
    /// As `Dice`, and the cross-entropy softmax is restricted to the classes
    /// present in the sample.
    DiceAndCe,
}

impl EmptyClassMask {
    pub fn as_str(self) -> &'static str {
        match self {
            EmptyClassMask::None => "none",
            EmptyClassMask::Dice => "dice",
            EmptyClassMask::DiceAndCe => "dice+ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "false" => Ok(EmptyClassMask::None),
            "dice" | "true" => Ok(EmptyClassMask::Dice),
            "dice+ce" => Ok(EmptyClassMask::DiceAndCe),
            other => Err(CtsError::config(format!(
                "empty-class mask must be none, dice or dice+ce, got `{}`",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Cross-entropy weight.
    pub alpha: f64,
    /// Soft-Dice weight.
    pub beta: f64,
    /// Dice smoothing term.
    pub smoothing: f64,
    pub mask_empty: EmptyClassMask,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            smoothing: 1.0,
            mask_empty: EmptyClassMask::Dice,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(CtsError::config(format!(
                "loss weights need alpha >= 0, beta >= 0, alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.smoothing >= 0.0) {
            return Err(CtsError::config("dice smoothing must be non-negative"));
        }
        Ok(())
    }
}

/// Loss value, its parts and the gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    /// `1 - mean Dice` over the counted (sample, class) pairs.
    pub soft_dice: f64,
    pub grad: Vec<f64>,
}

/// Weighted cross-entropy plus soft-Dice loss on `[N, C, H, W]` logits and
/// `[N, H, W]` class-index targets.
pub fn loss_parts<T: Scalar>(logits: &Tensor<T>, target: &[u8], cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let s = logits.shape();
    if s.len() != 4 {
        return Err(CtsError::config(format!("loss expects NCHW logits, got {:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    if target.len() != n * hw {
        return Err(CtsError::data(format!(
            "target has {} pixels, logits {:?} need {}",
            target.len(),
            s,
            n * hw
        )));
    }
    if let Some(pos) = target.iter().position(|&t| t as usize >= c) {
        let (i, px) = (pos / hw, pos % hw);
        return Err(CtsError::data(format!(
            "target class {} out of range [0, {}) in sample {} at pixel (row {}, col {})",
            target[pos],
            c,
            i,
            px / w,
            px % w
        )));
    }
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let at = |i: usize, k: usize, px: usize| (i * c + k) * hw + px;

    // Per-sample class presence.
    let mut present = vec![false; n * c];
    for i in 0..n {
        for &t in &target[i * hw..(i + 1) * hw] {
            present[i * c + t as usize] = true;
        }
    }

    let mut prob = vec![0.0; z.len()];
    let mut grad = vec![0.0; z.len()];
    let npx = (n * hw) as f64;
    let mut ce = 0.0;
    let mut q = vec![0.0; c];
    for i in 0..n {
        for px in 0..hw {
            let mx = (0..c).map(|k| z[at(i, k, px)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..c).map(|k| (z[at(i, k, px)] - mx).exp()).sum();
            for k in 0..c {
                prob[at(i, k, px)] = (z[at(i, k, px)] - mx).exp() / denom;
            }
            let t = target[i * hw + px] as usize;
            let restrict = cfg.mask_empty == EmptyClassMask::DiceAndCe;
            let allowed = |k: usize| !restrict || present[i * c + k];
            let mx_r = (0..c).filter(|&k| allowed(k)).map(|k| z[at(i, k, px)]).fold(f64::NEG_INFINITY, f64::max);
            let denom_r: f64 = (0..c).filter(|&k| allowed(k)).map(|k| (z[at(i, k, px)] - mx_r).exp()).sum();
            for (k, qk) in q.iter_mut().enumerate() {
                *qk = if allowed(k) { (z[at(i, k, px)] - mx_r).exp() / denom_r } else { 0.0 };
            }
            ce -= (z[at(i, t, px)] - mx_r) - denom_r.ln();
            for k in 0..c {
                let onehot = if k == t { 1.0 } else { 0.0 };
                if allowed(k) {
                    grad[at(i, k, px)] = cfg.alpha * (q[k] - onehot) / npx;
                }
            }
        }
    }
    ce /= npx;

    // Soft Dice per (sample, class), gradient with respect to probabilities.
    let eps = cfg.smoothing;
    let counted: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..c).map(move |k| (i, k)))
        .filter(|&(i, k)| cfg.mask_empty == EmptyClassMask::None || present[i * c + k])
        .collect();
    let kcount = counted.len() as f64;
    let mut dprob = vec![0.0; z.len()];
    let mut dice_sum = 0.0;
    for &(i, k) in &counted {
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for px in 0..hw {
            let p = prob[at(i, k, px)];
            let g = if target[i * hw + px] as usize == k { 1.0 } else { 0.0 };
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let den = psum + gsum + eps;
        let d = (2.0 * inter + eps) / den;
        dice_sum += d;
        for px in 0..hw {
            let g = if target[i * hw + px] as usize == k { 1.0 } else { 0.0 };
            dprob[at(i, k, px)] = -cfg.beta / kcount * (2.0 * g - d) / den;
        }
    }
    let soft_dice = 1.0 - dice_sum / kcount;

    // Chain through the per-pixel softmax.
    for i in 0..n {
        for px in 0..hw {
            let dot: f64 = (0..c).map(|k| prob[at(i, k, px)] * dprob[at(i, k, px)]).sum();
            for k in 0..c {
                let idx = at(i, k, px);
                grad[idx] += prob[idx] * (dprob[idx] - dot);
            }
        }
    }

    Ok(LossParts {
        total: cfg.alpha * ce + cfg.beta * soft_dice,
        cross_entropy: ce,
        soft_dice,
        grad,
    })
}

/// Records the combined loss of `logits` as a scalar node on `tape`.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    let parts = loss_parts(tape.value(logits), target, cfg)?;
    let grad = parts.grad.iter().map(|&g| T::from_f64(g)).collect();
    Ok(tape.push_precomputed(logits, T::from_f64(parts.total), grad))
}
