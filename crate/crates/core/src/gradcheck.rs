//! Central finite-difference gradient checking in double precision.
//!
//! The finite-difference side only ever evaluates the forward pass, so it
//! stays independent of the backward rules it is checking.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Worst element found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central difference of a scalar function at `x` along every coordinate.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |replaced: usize, values: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == replaced {
                    Ok(tape.constant(&Tensor::new(t.shape(), values.to_vec())?))
                } else {
                    Ok(tape.constant(t))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&tape, &vars)?.value().values()[0])
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_difference(input.values(), h, |v| eval(i, v))?;
        for (j, (a, n)) in analytic[i].iter().zip(&numeric).enumerate() {
            let err = relative_error(*a, *n);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = *a;
                report.numeric = *n;
            }
        }
    }
    Ok(report)
}
