//! Central finite differences, the reference for every analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    /// Same `h` for every element.
    Absolute(f64),
    /// `h = eps * (1 + |x_i|)`.
    Relative(f64),
}

impl Step {
    fn at(self, x: f64) -> f64 {
        match self {
            Step::Absolute(h) => h,
            Step::Relative(e) => e * (1.0 + x.abs()),
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, step: Step) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_at(f, x, step, &all)?;
    Tensor::new(x.shape().to_vec(), vals)
}

/// Central differences at a subset of flat indices, in the given order.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor, step: Step, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x.data()[i];
        let h = step.at(orig);
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at element {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new([3], vec![0.5, -7.0, 100.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, Step::Relative(1e-5)).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_sum_matches_2x() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            Step::Absolute(1e-5),
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0].signum().max(0.0)), &x, Step::Absolute(1e-3));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
