use serde::{Deserialize, Serialize};

use super::mask::{boundary, BinaryMask};
use crate::error::Result;

/// Outcome class of an ASSD evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssdStatus {
    /// Both boundary sets non-empty.
    Defined,
    /// Ground truth empty, prediction not; value is the image diagonal.
    GtEmpty,
    /// Prediction empty, ground truth not; value is the image diagonal.
    PredEmpty,
    /// Both empty; value undefined (NaN) and never aggregated.
    Undefined,
}

impl AssdStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AssdStatus::Defined => "true",
            AssdStatus::GtEmpty => "gt_empty",
            AssdStatus::PredEmpty => "pred_empty",
            AssdStatus::Undefined => "false",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "true" => AssdStatus::Defined,
            "gt_empty" => AssdStatus::GtEmpty,
            "pred_empty" => AssdStatus::PredEmpty,
            "false" => AssdStatus::Undefined,
            _ => return None,
        })
    }

    /// Whether the ground-truth mask was non-empty.
    pub fn gt_present(self) -> bool {
        matches!(self, AssdStatus::Defined | AssdStatus::PredEmpty)
    }

    /// Whether the value enters ASSD aggregates.
    pub fn has_value(self) -> bool {
        self != AssdStatus::Undefined
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assd {
    pub value: f64,
    pub status: AssdStatus,
}

const FAR: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance from every pixel to the nearest site
/// (separable lower-envelope transform). Rows without any reachable site
/// hold `FAR`.
pub fn squared_distance_transform(width: usize, height: usize, sites: &[(usize, usize)]) -> Vec<i64> {
    // Column pass: vertical distance to the nearest site in the same column.
    let mut g = vec![FAR; width * height];
    for &(r, c) in sites {
        g[r * width + c] = 0;
    }
    for c in 0..width {
        let mut last: Option<usize> = None;
        for r in 0..height {
            if g[r * width + c] == 0 {
                last = Some(r);
            } else if let Some(s) = last {
                g[r * width + c] = (r - s) as i64;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..height).rev() {
            if g[r * width + c] == 0 {
                next = Some(r);
            } else if let Some(s) = next {
                let d = (s - r) as i64;
                if d < g[r * width + c] {
                    g[r * width + c] = d;
                }
            }
        }
    }
    // Row pass: lower envelope of parabolas (x - q)^2 + g(q)^2.
    let mut out = vec![FAR; width * height];
    let mut v: Vec<i64> = Vec::with_capacity(width);
    let mut z: Vec<f64> = Vec::with_capacity(width + 1);
    for r in 0..height {
        let f = |q: i64| {
            let d = g[r * width + q as usize];
            d * d
        };
        v.clear();
        z.clear();
        for q in 0..width as i64 {
            if g[r * width + q as usize] == FAR {
                continue;
            }
            loop {
                match v.last() {
                    None => {
                        v.push(q);
                        z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = ((f(q) + q * q) - (f(p) + p * p)) as f64 / (2 * (q - p)) as f64;
                        if s <= *z.last().unwrap() {
                            v.pop();
                            z.pop();
                        } else {
                            v.push(q);
                            z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if v.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..width as i64 {
            while k + 1 < v.len() && z[k + 1] < x as f64 {
                k += 1;
            }
            let q = v[k];
            out[r * width + x as usize] = (x - q) * (x - q) + f(q);
        }
    }
    out
}

/// Average symmetric surface distance between two masks, using 4-connected
/// boundaries and pixel-centre Euclidean distances.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<Assd> {
    pred.check_extent(gt)?;
    let sp = boundary(pred);
    let sg = boundary(gt);
    let status = match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(Assd { value: f64::NAN, status: AssdStatus::Undefined }),
        (false, true) => AssdStatus::GtEmpty,
        (true, false) => AssdStatus::PredEmpty,
        (false, false) => AssdStatus::Defined,
    };
    if status != AssdStatus::Defined {
        return Ok(Assd { value: pred.diagonal(), status });
    }
    let (w, h) = (pred.width(), pred.height());
    let to_g = squared_distance_transform(w, h, &sg);
    let to_p = squared_distance_transform(w, h, &sp);
    let mut total = 0.0;
    for &(r, c) in &sp {
        total += (to_g[r * w + c] as f64).sqrt();
    }
    for &(r, c) in &sg {
        total += (to_p[r * w + c] as f64).sqrt();
    }
    Ok(Assd { value: total / (sp.len() + sg.len()) as f64, status })
}
