//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so it
//! is independent of the backward rules it verifies. Always run it in f64:
//! the f32 quantization floor sits above the tolerances used here.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (input, element, analytic, numeric)
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_abs_err <= abs_tol
    }
}

/// Compare analytic gradients of `f` against central differences with step
/// `h` for every element of every input. Elements whose analytic gradient is
/// below `abs_floor` in magnitude are compared absolutely; the rest
/// relatively.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    abs_floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_of(v)).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data[ei];
            probe[ti].data[ei] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data[ei] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ei];
            report.checked += 1;
            if a.abs() < abs_floor {
                let err = (a - numeric).abs();
                if err > report.max_abs_err {
                    report.max_abs_err = err;
                    report.worst = Some((ti, ei, a, numeric));
                }
            } else {
                let err = (a - numeric).abs() / a.abs().max(numeric.abs());
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

/// Standard tolerance used across the verification suites: relative 1e-4,
/// absolute 1e-8 below the 1e-8 analytic floor, step 1e-5.
pub fn assert_grads_close<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, 1e-5, 1e-8, f).expect("gradient check forward failed");
    assert!(
        report.passes(1e-4, 1e-8),
        "gradient check failed: rel {:.3e}, abs {:.3e}, worst {:?}",
        report.max_rel_err,
        report.max_abs_err,
        report.worst
    );
}
