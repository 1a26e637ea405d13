//! Average pooling: windowed and global.

use crate::error::{shape_err, Error, Result};
use crate::ops::conv::out_extent;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

type Dims4 = (usize, usize, usize, usize);

/// Mean over each `window`×`window` patch. Windows are summed row-major and
/// the sum is divided by `window²`.
pub fn avg_pool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if h < window || w < window {
        return shape_err(format!("pool window {window} larger than input {h}x{w}"));
    }
    let oh = out_extent(h, window, stride, 0)?;
    let ow = out_extent(w, window, stride, 0)?;
    let area = (window * window) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xd.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..][..window];
                    for v in row {
                        acc += v;
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::from_op(vec![n, c, oh, ow], out, "avg_pool2d")
}

pub(crate) fn avg_pool2d_backward(dims: Dims4, dy: &[f64], window: usize, stride: usize) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let area = (window * window) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let share = gplane[oy * ow + ox] / area;
                for ky in 0..window {
                    for v in &mut plane[(oy * stride + ky) * w + ox * stride..][..window] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let area = (h * w) as f64;
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Tensor::from_op(vec![n, c, 1, 1], out, "global_avg_pool")
}

pub(crate) fn global_avg_pool_backward(dims: Dims4, dy: &[f64]) -> Vec<f64> {
    let (_, _, h, w) = dims;
    let area = (h * w) as f64;
    dy.iter()
        .flat_map(|g| std::iter::repeat_n(g / area, h * w))
        .collect()
}

impl Tape {
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = avg_pool2d_forward(self.value(x), window, stride)?;
        Ok(self.push(out, Op::AvgPool { x, window, stride }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool_forward(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }
}
