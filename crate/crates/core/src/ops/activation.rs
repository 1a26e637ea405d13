use crate::error::Result;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_op(x.shape().to_vec(), data, "relu")
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Softmax over the channel axis of `[N, M, H, W]`, per pixel, with the
/// per-pixel maximum subtracted before exponentiation.
pub fn softmax_channels_forward(x: &Tensor) -> Result<Tensor> {
    let (n, m, h, w) = x.dims4()?;
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut buf = vec![0.0; m];
    for b in 0..n {
        let base = b * m * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..m {
                max = max.max(xd[base + c * plane + p]);
            }
            let mut sum = 0.0;
            for (c, e) in buf.iter_mut().enumerate() {
                *e = (xd[base + c * plane + p] - max).exp();
                sum += *e;
            }
            for (c, e) in buf.iter().enumerate() {
                out[base + c * plane + p] = e / sum;
            }
        }
    }
    Tensor::from_op(vec![n, m, h, w], out, "softmax_channels")
}

pub(crate) fn softmax_backward(dims: (usize, usize, usize, usize), y: &[f64], dy: &[f64]) -> Vec<f64> {
    let (n, m, h, w) = dims;
    let plane = h * w;
    let mut dx = vec![0.0; y.len()];
    for b in 0..n {
        let base = b * m * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..m {
                let i = base + c * plane + p;
                dot += y[i] * dy[i];
            }
            for c in 0..m {
                let i = base + c * plane + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu_forward(self.value(x))?;
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels_forward(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let x = Tensor::full([1, 4, 2, 2], 3.0);
        let p = softmax_channels_forward(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shift_invariance() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let x = Tensor::new([2, 3, 2, 2], data.clone()).unwrap();
        let shifted = Tensor::new([2, 3, 2, 2], data.iter().map(|v| v + 11.5).collect()).unwrap();
        let (a, b) = (
            softmax_channels_forward(&x).unwrap(),
            softmax_channels_forward(&shifted).unwrap(),
        );
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_scalar_formula_and_is_stable() {
        let x = Tensor::new([1, 3, 1, 2], vec![1.0, 800.0, -2.0, 799.0, 0.5, -1.0]).unwrap();
        let p = softmax_channels_forward(&x).unwrap();
        for px in 0..2 {
            let logits: Vec<f64> = (0..3).map(|c| x.data()[c * 2 + px]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..3 {
                let expect = (logits[c] - mx).exp() / z;
                assert!((p.data()[c * 2 + px] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new([4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        assert_eq!(relu_forward(&x).unwrap().data(), &[0.0, 0.0, 2.0, 0.0]);
    }
}
