//! Central finite-difference oracle for tape gradients.
//!
//! The numerical side only ever evaluates the forward function on a
//! non-recording tape, so it shares no code with the backward rules it checks.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by every check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors below this magnitude of gradient are measured against it instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares autodiff gradients of `f` against central differences.
///
/// `f` maps the inputs to any tensor; the checked scalar is `sum(w ⊙ f)` with a
/// fixed random `w`, so symmetric errors cannot cancel. `coords` limits how
/// many coordinates per input are probed (`None` = all), chosen at random.
pub fn check<F>(inputs: &[Tensor<f64>], coords: Option<usize>, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = SplitMix64::new(seed);

    let weights = {
        let mut tape = Tape::no_grad();
        let vars = inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let shape = tape.value(out).shape().to_vec();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.normal()).collect())?
    };

    let objective = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let w = tape.constant(weights.clone())?;
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };

    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = objective(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = perturbed.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = objective(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match coords {
            Some(k) if k < n => (0..k).map(|_| rng.below(n as u64) as usize).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let mut work: Vec<Tensor<f64>> = inputs.to_vec();
            work[ti].data_mut()[idx] = input[idx] + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[idx] = input[idx] - FD_STEP;
            let minus = eval(&work)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, idx);
            }
        }
    }
    Ok(report)
}
