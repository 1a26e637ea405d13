//! Per-pixel negative log-likelihood.

use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Flattens a label batch into per-pixel targets matching `[N, M, H, W]`.
pub(crate) fn targets_for(probs: &Tensor, labels: &[LabelMap]) -> Result<Vec<Option<usize>>> {
    let (n, m, h, w) = probs.dims4()?;
    if labels.len() != n {
        return shape_err(format!("{} label maps for batch of {n}", labels.len()));
    }
    let mut targets = Vec::with_capacity(n * h * w);
    for lm in labels {
        if (lm.height(), lm.width()) != (h, w) {
            return shape_err(format!(
                "label map {}x{} vs prediction {h}x{w}",
                lm.height(),
                lm.width()
            ));
        }
        for idx in 0..h * w {
            match lm.class_at(idx) {
                Some(c) if c >= m => {
                    return Err(Error::LabelOutOfRange {
                        label: c as u32,
                        classes: m,
                    })
                }
                t => targets.push(t),
            }
        }
    }
    Ok(targets)
}

fn ce_values(probs: &Tensor, targets: &[Option<usize>]) -> Result<Vec<f64>> {
    let (_, m, h, w) = probs.dims4()?;
    let plane = h * w;
    let pd = probs.data();
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, t)| match t {
            None => 0.0,
            Some(c) => {
                let (b, p) = (i / plane, i % plane);
                -pd[(b * m + c) * plane + p].max(PROB_FLOOR).ln()
            }
        })
        .collect())
}

/// `-ln(max(p[label], floor))` per pixel, `0` at ignored pixels; `[N, H, W]`.
pub fn cross_entropy_map_forward(probs: &Tensor, labels: &[LabelMap]) -> Result<Tensor> {
    let (n, _, h, w) = probs.dims4()?;
    let targets = targets_for(probs, labels)?;
    Tensor::from_op(vec![n, h, w], ce_values(probs, &targets)?, "cross_entropy_map")
}

pub(crate) fn cross_entropy_backward(
    probs: &Tensor,
    targets: &[Option<usize>],
    dy: &[f64],
) -> Result<Vec<f64>> {
    let (_, m, h, w) = probs.dims4()?;
    let plane = h * w;
    let pd = probs.data();
    let mut dp = vec![0.0; pd.len()];
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = t {
            let (b, p) = (i / plane, i % plane);
            let j = (b * m + c) * plane + p;
            if pd[j] > PROB_FLOOR {
                dp[j] = -dy[i] / pd[j];
            }
        }
    }
    Ok(dp)
}

impl Tape {
    pub fn cross_entropy_map(&mut self, probs: Var, labels: &[LabelMap]) -> Result<Var> {
        let p = self.value(probs);
        let (n, _, h, w) = p.dims4()?;
        let targets = targets_for(p, labels)?;
        let out = Tensor::from_op(vec![n, h, w], ce_values(p, &targets)?, "cross_entropy_map")?;
        Ok(self.push(out, Op::CrossEntropy { probs, targets }))
    }

    /// Mean of a cross-entropy map over non-ignored pixels; zero when every
    /// pixel is ignored.
    pub fn masked_mean_ce(&mut self, ce: Var, labels: &[LabelMap]) -> Result<Var> {
        let mut indices = Vec::new();
        let mut offset = 0;
        for lm in labels {
            let len = lm.labels().len();
            indices.extend((0..len).filter(|&i| lm.class_at(i).is_some()).map(|i| offset + i));
            offset += len;
        }
        if offset != self.value(ce).numel() {
            return shape_err("label batch does not cover the loss map");
        }
        let denom = indices.len().max(1) as f64;
        self.select_mean(ce, indices, denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_2x(p0: f64, h: usize, w: usize) -> Tensor {
        let plane = h * w;
        let mut d = vec![p0; plane];
        d.extend(vec![1.0 - p0; plane]);
        Tensor::new([1, 2, h, w], d).unwrap()
    }

    #[test]
    fn exact_one_hot_gives_zero() {
        let lm = LabelMap::filled(2, 2, 2, 0).unwrap();
        let ce = cross_entropy_map_forward(&probs_2x(1.0, 2, 2), &[lm]).unwrap();
        assert!(ce.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_half_gives_ln2() {
        let lm = LabelMap::filled(1, 3, 2, 0).unwrap();
        let ce = cross_entropy_map_forward(&probs_2x(0.5, 1, 3), &[lm]).unwrap();
        assert_eq!(ce.shape(), &[1, 1, 3]);
        for v in ce.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn floor_caps_zero_probability() {
        let lm = LabelMap::filled(1, 1, 2, 1).unwrap();
        let ce = cross_entropy_map_forward(&probs_2x(1.0, 1, 1), &[lm]).unwrap();
        assert!((ce.data()[0] + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_are_zero_and_excluded_from_mean() {
        let lm = LabelMap::new(1, 2, 2, 255, vec![0, 255]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(probs_2x(0.5, 1, 2));
        let ce = tape.cross_entropy_map(p, &[lm.clone()]).unwrap();
        assert_eq!(tape.value(ce).data()[1], 0.0);
        let m = tape.masked_mean_ce(ce, &[lm]).unwrap();
        assert!((tape.value(m).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_beyond_channel_count_is_rejected() {
        let lm = LabelMap::filled(1, 1, 3, 2).unwrap();
        assert!(matches!(
            cross_entropy_map_forward(&probs_2x(0.5, 1, 1), &[lm]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
