//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest `|analytic - numeric|` divided by the largest analytic
    /// magnitude within the same input tensor. Insensitive to entries whose
    /// gradient happens to be near zero.
    pub max_scaled_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Checks the gradient of the scalar `f` with respect to every element of
/// every tensor in `inputs`. `f` is evaluated on fresh tapes and must be
/// deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        match tape.value(out) {
            [v] => Ok(*v),
            other => Err(Error::Contract(format!(
                "grad_check needs a scalar function, got {} values",
                other.len()
            ))),
        }
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_scaled_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
    };
    for (i, grad) in analytic.iter().enumerate() {
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if scale > 0.0 {
                report.max_scaled_error = report.max_scaled_error.max(abs / scale);
            } else if abs > 0.0 {
                report.max_scaled_error = f64::INFINITY;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
