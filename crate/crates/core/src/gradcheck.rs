//! Central finite-difference checks for tape gradients.
//!
//! Relative error is measured per input against the gradient's own scale:
//! `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞)`, which stays meaningful when
//! individual components are near zero.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradError {
    pub max_abs: f64,
    pub max_rel: f64,
    pub checked: usize,
}

impl GradError {
    pub fn merge(self, other: GradError) -> GradError {
        GradError {
            max_abs: self.max_abs.max(other.max_abs),
            max_rel: self.max_rel.max(other.max_rel),
            checked: self.checked + other.checked,
        }
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol && self.max_rel.is_finite()
    }
}

/// Compares analytic and numeric gradients over the same coordinates.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradError {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let max_abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradError {
        max_abs,
        max_rel: max_abs / scale,
        checked: analytic.len(),
    }
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_differences(
    x: &mut [f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(x);
            x[i] = orig - step;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Checks every coordinate of every input of a scalar-valued tape function.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(inputs, &coords, step, f)
}

/// Like [`check`] but only over the given coordinates of each input.
pub fn check_coords<F>(inputs: &[Tensor<f64>], coords: &[Vec<usize>], step: f64, f: F) -> Result<GradError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).into_data()).collect();
    drop(grads);

    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = ts.iter().map(|t| tape.leaf(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = GradError {
        max_abs: 0.0,
        max_rel: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, cs) in coords.iter().enumerate() {
        let mut numeric = Vec::with_capacity(cs.len());
        for &i in cs {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let a: Vec<f64> = cs.iter().map(|&i| analytic[k][i]).collect();
        worst = worst.merge(compare(&a, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x^2) computed as x instead of 2x by detaching one factor
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = check(&[x], 1e-5, |_, v| Ok(v[0].mul(v[0].detach())?.sum())).unwrap();
        assert!(err.max_rel > 0.4);
    }

    #[test]
    fn central_differences_of_cubic() {
        let mut x = vec![2.0];
        let d = central_differences(&mut x, &[0], 1e-4, |v| v[0].powi(3));
        assert!((d[0] - 12.0).abs() < 1e-7);
    }
}
