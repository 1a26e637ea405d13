//! 2-D cross-correlation with zero padding.
//!
//! Every output element accumulates `bias`, then the products in
//! `(in_channel, ky, kx)` order, skipping taps that fall in the padding.
//! A plain six-loop convolution with the same order reproduces the result
//! bit for bit.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            pad,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (co, ci, _, _) = self.weight.dims4()?;
        if co == 0 || ci == 0 {
            return shape_err("conv weight needs Co, Ci >= 1");
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [co] {
                return shape_err(format!("conv bias {:?} for Co={co}", b.shape()));
            }
        }
        Ok(())
    }
}

/// Output extent of a strided window sweep.
///
/// `(input + 2*pad - kernel) / stride` may leave a remainder only when the
/// uncovered tail is padding; dropping real input pixels is an error.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return shape_err(format!("kernel {kernel} larger than padded input {padded}"));
    }
    if (padded - kernel) % stride > pad {
        return shape_err(format!(
            "non-integral output extent: ({input} + 2*{pad} - {kernel}) / {stride}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output columns whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox * stride + k - pad must satisfy 0 <= ix < len.
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn geometry(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if c != ci {
        return shape_err(format!("conv input has {c} channels, weight expects {ci}"));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    let oh = out_extent(h, kh, stride, pad)?;
    let ow = out_extent(w, kw, stride, pad)?;
    Ok(ConvGeom {
        n,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return shape_err(format!("conv bias {:?} for Co={}", b.shape(), g.co));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut out = vec![0.0; g.n * g.co * out_plane];

    let col_ranges: Vec<(usize, usize)> = (0..g.kw)
        .map(|kx| valid_range(g.w, g.ow, kx, g.stride, g.pad))
        .collect();

    for b in 0..g.n {
        for oc in 0..g.co {
            let dst = &mut out[(b * g.co + oc) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias.data()[oc]);
            }
            for ic in 0..g.ci {
                let src = &xd[(b * g.ci + ic) * in_plane..][..in_plane];
                let wbase = (oc * g.ci + ic) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx];
                        let (lo, hi) = col_ranges[kx];
                        for oy in 0..g.oh {
                            let iy = oy * g.stride + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let row = &src[(iy - g.pad) * g.w..][..g.w];
                            let drow = &mut dst[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = lo + kx - g.pad;
                                for (d, s) in drow[lo..hi].iter_mut().zip(&row[off..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(vec![g.n, g.co, g.oh, g.ow], out, "conv2d")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GradRequest {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &[f64],
    stride: usize,
    pad: usize,
    want: GradRequest,
) -> Result<ConvGrads> {
    let g = geometry(x, weight, stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let col_ranges: Vec<(usize, usize)> = (0..g.kw)
        .map(|kx| valid_range(g.w, g.ow, kx, g.stride, g.pad))
        .collect();

    let input = want.input.then(|| {
        let mut dx = vec![0.0; xd.len()];
        for b in 0..g.n {
            for ic in 0..g.ci {
                let dst = &mut dx[(b * g.ci + ic) * in_plane..][..in_plane];
                for oc in 0..g.co {
                    let src = &dy[(b * g.co + oc) * out_plane..][..out_plane];
                    let wbase = (oc * g.ci + ic) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wd[wbase + ky * g.kw + kx];
                            let (lo, hi) = col_ranges[kx];
                            for oy in 0..g.oh {
                                let iy = oy * g.stride + ky;
                                if iy < g.pad || iy - g.pad >= g.h {
                                    continue;
                                }
                                let drow = &mut dst[(iy - g.pad) * g.w..][..g.w];
                                let grow = &src[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    let off = lo + kx - g.pad;
                                    for (d, s) in drow[off..].iter_mut().zip(&grow[lo..hi]) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    let weight_grad = want.weight.then(|| {
        let mut dw = vec![0.0; wd.len()];
        for b in 0..g.n {
            for oc in 0..g.co {
                let src = &dy[(b * g.co + oc) * out_plane..][..out_plane];
                for ic in 0..g.ci {
                    let img = &xd[(b * g.ci + ic) * in_plane..][..in_plane];
                    let wbase = (oc * g.ci + ic) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let (lo, hi) = col_ranges[kx];
                            let mut acc = 0.0;
                            for oy in 0..g.oh {
                                let iy = oy * g.stride + ky;
                                if iy < g.pad || iy - g.pad >= g.h {
                                    continue;
                                }
                                let row = &img[(iy - g.pad) * g.w..][..g.w];
                                let grow = &src[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    let off = lo + kx - g.pad;
                                    acc += grow[lo..hi]
                                        .iter()
                                        .zip(&row[off..])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ox in lo..hi {
                                        acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                            dw[wbase + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        dw
    });

    let bias = want.bias.then(|| {
        let mut db = vec![0.0; g.co];
        for b in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dy[(b * g.co + oc) * out_plane..][..out_plane]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });

    Ok(ConvGrads {
        input,
        weight: weight_grad,
        bias,
    })
}

impl Tape {
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Direct six-loop convolution in the documented accumulation order.
    pub(crate) fn naive_conv2d(
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (co, ci, kh, kw) = w.dims4().unwrap();
        assert_eq!(c, ci);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Vec::with_capacity(n * co * oh * ow);
        for bi in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at4(o, i, ky, kx)
                                        * x.at4(bi, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::new([n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = Tensor::new([1, 1, 2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.25]).unwrap();
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = Tensor::new([1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.5).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new([1, 1, 3, 3], k).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fixed_case_matches_naive_oracle() {
        let x = Tensor::new([1, 2, 5, 5], (0..50).map(|v| ((v * 7) % 11) as f64 - 5.0).collect())
            .unwrap();
        let w =
            Tensor::new([3, 2, 3, 3], (0..54).map(|v| ((v * 5) % 13) as f64 * 0.1 - 0.6).collect())
                .unwrap();
        let b = Tensor::new([3], vec![0.5, -1.0, 0.25]).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            assert_eq!(fast, naive_conv2d(&x, &w, Some(&b), stride, pad));
        }
    }

    #[test]
    fn errors_on_channel_mismatch_and_non_integral_extent() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, None, 1, 1), Err(Error::Shape(_))));
        let w = Tensor::zeros([1, 2, 3, 3]);
        // (4 + 0 - 3) / 2 is not integral
        assert!(matches!(conv2d_forward(&x, &w, None, 2, 0), Err(Error::Shape(_))));
    }
}
