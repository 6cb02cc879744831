//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose analytic gradient is exactly zero and whose numeric
    /// estimate is within the rounding noise of the difference quotient.
    /// Relative error means nothing there, so they do not enter
    /// `max_rel_err`.
    pub noise_limited: usize,
}

/// Resolution of `(up - down) / 2h` when `up` and `down` carry a few ulps of
/// rounding each.
pub fn fd_noise(up: f64, down: f64, h: f64) -> f64 {
    16.0 * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * h)
}

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `inputs` against central differences
/// with step `h`. At most `max_coords` coordinates per input are probed
/// (chosen with `seed`); `None` probes all of them.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        noise_limited: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            report.checked += 1;
            if a == 0.0 && numeric.abs() <= fd_noise(up, down, h) {
                report.noise_limited += 1;
            } else {
                report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            }
        }
    }
    Ok(report)
}
