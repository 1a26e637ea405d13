//! Bilinear upsampling with half-pixel centres.
//!
//! Output row `i` samples source coordinate `u = (i + 0.5) * H / H' - 0.5`,
//! clamped to `[0, H - 1]`, and blends the two neighbouring rows; columns
//! work the same way.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

type Dims4 = (usize, usize, usize, usize);

/// Per-output-index `(low, high, frac)` interpolation taps along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let u = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample_forward(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return shape_err(format!("upsample target {th}x{tw} smaller than source {h}x{w}"));
    }
    let rows = axis_taps(h, th);
    let cols = axis_taps(w, tw);
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &rows {
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            for &(x0, x1, fx) in &cols {
                let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                let bottom = (1.0 - fx) * r1[x0] + fx * r1[x1];
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Tensor::from_op(vec![n, c, th, tw], out, "bilinear_upsample")
}

pub(crate) fn bilinear_backward(dims: Dims4, target: (usize, usize), dy: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let (th, tw) = target;
    let rows = axis_taps(h, th);
    let cols = axis_taps(w, tw);
    let mut dx = vec![0.0; n * c * h * w];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(th * tw)) {
        for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gplane[i * tw + j];
                let (gt, gb) = ((1.0 - fy) * g, fy * g);
                plane[y0 * w + x0] += (1.0 - fx) * gt;
                plane[y0 * w + x1] += fx * gt;
                plane[y1 * w + x0] += (1.0 - fx) * gb;
                plane[y1 * w + x1] += fx * gb;
            }
        }
    }
    dx
}

impl Tape {
    /// Upsamples to `target`; returns `x` unchanged if it already has that size.
    pub fn upsample_to(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if (h, w) == target {
            return Ok(x);
        }
        self.bilinear_upsample(x, target)
    }

    pub fn bilinear_upsample(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let out = bilinear_upsample_forward(self.value(x), target)?;
        Ok(self.push(out, Op::Upsample(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_to_four_by_four_hand_values() {
        // Source coordinates along each axis: [0, 0.25, 0.75, 1] after clamping.
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_upsample_forward(&x, (4, 4)).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::new([1, 2, 3, 2], (0..12).map(|v| v as f64 * 0.7 - 3.0).collect()).unwrap();
        assert_eq!(bilinear_upsample_forward(&x, (3, 2)).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full([1, 1, 3, 5], -0.5);
        let y = bilinear_upsample_forward(&x, (12, 17)).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn shrinking_is_rejected() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(bilinear_upsample_forward(&x, (2, 8)).is_err());
    }
}
