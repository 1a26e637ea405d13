//! Dense row-major `f64` tensors.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        assert!(value.is_finite(), "fill value must be finite");
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1], value)
    }

    /// Builds a tensor from values an op has just produced, rejecting NaN/Inf.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// `[N, C, H, W]` extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Index into a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * h + y) * w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(Tensor::new([2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(Tensor::new([2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new([1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn item_requires_one_element() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros([2]).item().is_err());
    }
}
