//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{IclError, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor], frozen: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::replaying(frozen.to_vec());
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(IclError::Argument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(IclError::Numeric(format!(
            "function value {v} is not finite"
        )));
    }
    Ok(v)
}

/// Max relative error between the tape gradient of `f` and central differences,
/// over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(f, inputs, &all)
}

/// Like [`grad_check`], restricted to the `(input, element)` coordinates given.
///
/// Stop-gradient values are frozen at the unperturbed point while probing,
/// so the differences measure the same function the tape differentiates.
pub fn grad_check_at<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let frozen = tape.detached_values().to_vec();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t))
        .collect();

    let mut worst = 0f64;
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + FD_STEP;
        let plus = evaluate(&f, &probe, &frozen)?;
        probe[i].data_mut()[j] = orig - FD_STEP;
        let minus = evaluate(&f, &probe, &frozen)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&mut tape, &[xv]).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(grad_check(f, &[x]).unwrap() < 1e-7);
    }

    #[test]
    fn non_finite_function_is_a_numeric_error() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.scale(v[0], f64::INFINITY);
            Ok(t.sum(s))
        };
        assert!(matches!(grad_check(f, &[x]), Err(IclError::Numeric(_))));
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-3, 0.0), 1e-3);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
