//! Central finite-difference gradient checking in double precision.
//!
//! A non-scalar output is reduced to a scalar with a fixed random
//! projection, `L = sum(out * R)`, so every output element contributes.

use rand::seq::index::sample;

use super::{RngState, Tape, Tensor, Var};
use crate::error::{CtsError, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Maximum accepted error, `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Relative step: `h = step * max(1, |x|)`.
    pub step: f64,
    /// Coordinates checked per input; `0` checks all of them.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: 1e-4,
            floor: 1e-3,
            step: 1e-4,
            max_coords: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Worst coordinate, as a flat index.
    pub worst: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// A failing coordinate whose one-sided differences disagree, i.e. the
    /// sample landed on a kink (relu at 0, pooling tie).
    pub kink_hit: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.kink_hit && self.max_rel_error() <= self.tolerance
    }
}

fn projected_loss<F>(f: &mut F, inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>, grads: bool) -> Result<(f64, Tape<f64>, Vec<Var>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(grads);
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = RngState::new(0x5eed_0f_9ad);
        Tensor::from_fn(&shape, |_| rng.next_f64() * 2.0 - 1.0)
    });
    if r.shape() != &shape[..] {
        return Err(CtsError::usage("gradcheck: output shape changed between evaluations"));
    }
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    Ok((value, tape, vars.into_iter().chain(std::iter::once(loss)).collect()))
}

/// Compares analytic gradients of `f` with central finite differences.
///
/// `f` receives a fresh tape with the inputs recorded as leaves and returns
/// the output node. It is called once for the analytic pass and twice per
/// checked coordinate, so any internal randomness must be re-seeded per
/// call.
pub fn gradcheck<F>(mut f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let (base, mut tape, vars) = projected_loss(&mut f, inputs, &mut proj, true)?;
    let loss = *vars.last().unwrap();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars[..inputs.len()]
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let mut rng = RngState::new(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut kink_hit = false;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if opts.max_coords == 0 || opts.max_coords >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        let mut worst_at = 0;
        for &j in &coords {
            let x0 = input.data()[j];
            let h = opts.step * x0.abs().max(1.0);
            perturbed[i].data_mut()[j] = x0 + h;
            let (fp, _, _) = projected_loss(&mut f, &perturbed, &mut proj, false)?;
            perturbed[i].data_mut()[j] = x0 - h;
            let (fm, _, _) = projected_loss(&mut f, &perturbed, &mut proj, false)?;
            perturbed[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > opts.tolerance {
                let fwd = (fp - base) / h;
                let bwd = (base - fm) / h;
                if (fwd - bwd).abs() > 1e-3 * numeric.abs().max(1.0) {
                    kink_hit = true;
                }
            }
            if err > worst {
                worst = err;
                worst_at = j;
            }
        }
        reports.push(InputReport {
            index: i,
            checked: coords.len(),
            max_rel_error: worst,
            worst: worst_at,
        });
    }
    Ok(GradcheckReport {
        inputs: reports,
        tolerance: opts.tolerance,
        kink_hit,
    })
}

/// Runs [`gradcheck`] on inputs drawn by `make_inputs(attempt_seed)`,
/// drawing fresh inputs whenever a sample lands on a kink.
pub fn gradcheck_resampling<F, G>(
    mut f: F,
    mut make_inputs: G,
    opts: &GradcheckOptions,
    attempts: usize,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    G: FnMut(u64) -> Vec<Tensor<f64>>,
{
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        let inputs = make_inputs(opts.seed.wrapping_add(attempt as u64));
        let report = gradcheck(&mut f, &inputs, opts)?;
        if !report.kink_hit {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu gradient is fine, but scale a constant-valued op by a bogus
        // amount through `push_precomputed` to make the analytic path wrong.
        let x = Tensor::<f64>::from_fn(&[4], |i| 0.3 + i as f64);
        let report = gradcheck(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.sum(sq);
                let value = tape.value(s).item();
                Ok(tape.push_precomputed(v[0], value, vec![1.0; 4]))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| (i as f64 - 2.5) * 0.7);
        let report = gradcheck(
            |tape, v| {
                let y = tape.softmax_lastdim(v[0])?;
                tape.mul(y, v[0])
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn kink_is_flagged() {
        // relu exactly at zero: one-sided slopes 0 and 1.
        let x = Tensor::<f64>::from_fn(&[1], |_| 0.0);
        let report = gradcheck(|tape, v| Ok(tape.relu(v[0])), &[x], &GradcheckOptions::default()).unwrap();
        assert!(report.kink_hit);
        let ok = gradcheck_resampling(
            |tape, v| Ok(tape.relu(v[0])),
            |seed| vec![Tensor::from_fn(&[1], |_| if seed == 0 { 0.0 } else { 0.5 })],
            &GradcheckOptions::default(),
            3,
        )
        .unwrap();
        assert!(ok.passed());
    }
}
