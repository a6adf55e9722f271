//! Finite-difference oracle shared by unit tests.

use crate::tape::{GradientTape, Var};
use crate::{Matrix, Result};

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error between two gradients.
pub fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.sub(numeric).unwrap().frobenius_norm();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds the loss on a fresh tape with every input registered as a
/// parameter, then compares tape gradients to central differences.
/// Returns the worst relative error over all inputs.
pub fn grad_check<F>(inputs: &[Matrix], build: F) -> f64
where
    F: Fn(&mut GradientTape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Matrix]| -> f64 {
        let mut tape = GradientTape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item().unwrap()
    };

    let mut tape = GradientTape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].as_mut_slice()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].as_mut_slice()[e] -= FD_STEP;
            numeric.as_mut_slice()[e] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&grads.get(vars[k]), &numeric));
    }
    worst
}
