//! Boundary corrected loss.
//!
//! The ground truth is "flipped" by swapping the two halves of every full
//! `2s`-wide block of columns (`row_flip`) or rows (`col_flip`). Cross-entropy
//! against a flipped map is large exactly where a label changes within `s`
//! pixels, so its largest values mark boundary-hard pixels. Per sample, each
//! flipped loss map is thinned by non-maximum suppression, the survivors are
//! ranked, and the top fraction is averaged into
//!
//! ```text
//! L_b = λ1 · mean(selected L_row) + λ2 · mean(selected L_col)
//! L_t = mean CE + α · L_b
//! ```
//!
//! Selection runs on detached values; gradients flow only through the
//! selected cross-entropy terms.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::ops::activation::softmax_channels_forward;
use crate::ops::loss::cross_entropy_map_forward;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BclConfig {
    /// Flip step `s` in pixels; 0 disables flipping.
    pub step: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the boundary term in the total objective.
    pub alpha: f64,
    /// Odd NMS window side.
    pub nms_window: usize,
    /// Fraction of NMS survivors kept, in `(0, 1]`.
    pub keep_fraction: f64,
    pub min_kept: usize,
}

impl Default for BclConfig {
    fn default() -> Self {
        BclConfig {
            step: 1,
            lambda1: 0.5,
            lambda2: 0.5,
            alpha: 0.4,
            nms_window: 3,
            keep_fraction: 0.25,
            min_kept: 64,
        }
    }
}

impl BclConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("bcl: {m}")));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be finite and >= 0");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2 must be finite and >= 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if self.nms_window == 0 || self.nms_window % 2 == 0 {
            return bad("nms window must be odd and >= 1");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

fn swap_blocks(len: usize, step: usize, mut swap: impl FnMut(usize, usize)) {
    if step == 0 {
        return;
    }
    let mut start = 0;
    while start + 2 * step <= len {
        for k in 0..step {
            swap(start + k, start + step + k);
        }
        start += 2 * step;
    }
}

/// Swaps the first and second `step` columns of every full `2·step` block
/// in each row. A trailing partial block is left alone.
pub fn row_flip(gt: &LabelMap, step: usize) -> LabelMap {
    let (h, w) = (gt.height(), gt.width());
    let mut out = gt.labels().to_vec();
    for y in 0..h {
        let row = &mut out[y * w..(y + 1) * w];
        swap_blocks(w, step, |a, b| row.swap(a, b));
    }
    gt.with_labels(out)
}

/// [`row_flip`] along the vertical axis.
pub fn col_flip(gt: &LabelMap, step: usize) -> LabelMap {
    let (h, w) = (gt.height(), gt.width());
    let mut out = gt.labels().to_vec();
    swap_blocks(h, step, |a, b| {
        for x in 0..w {
            out.swap(a * w + x, b * w + x);
        }
    });
    gt.with_labels(out)
}

/// Cross-entropy maps against the row- and column-flipped ground truth.
pub fn flip_ce_maps(probs: &Tensor, gt: &[LabelMap], step: usize) -> Result<(Tensor, Tensor)> {
    let rows: Vec<_> = gt.iter().map(|g| row_flip(g, step)).collect();
    let cols: Vec<_> = gt.iter().map(|g| col_flip(g, step)).collect();
    Ok((
        cross_entropy_map_forward(probs, &rows)?,
        cross_entropy_map_forward(probs, &cols)?,
    ))
}

/// Maximum over the `window`×`window` neighbourhood of every pixel, clipped
/// at the image border. Separable: row pass, then column pass.
fn neighbourhood_max(values: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut rows = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = values[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi)
                .map(|yy| rows[yy * w + x])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Keeps `(position, value)` for every pixel that is `>=` all values in its
/// clipped `window`×`window` neighbourhood, in row-major order.
pub fn nms_filter(loss_map: &[f64], h: usize, w: usize, window: usize) -> Result<Vec<(usize, f64)>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "NMS window must be odd and >= 1, got {window}"
        )));
    }
    if loss_map.len() != h * w {
        return Err(Error::Shape(format!(
            "loss map of {} values for {h}x{w}",
            loss_map.len()
        )));
    }
    if window == 1 {
        return Ok(loss_map.iter().copied().enumerate().collect());
    }
    let nmax = neighbourhood_max(loss_map, h, w, window);
    Ok(loss_map
        .iter()
        .zip(&nmax)
        .enumerate()
        .filter(|(_, (v, m))| v >= m)
        .map(|(i, (&v, _))| (i, v))
        .collect())
}

/// Number of entries [`select_hard`] keeps out of `kept`.
pub fn selection_size(kept: usize, keep_fraction: f64, min_kept: usize) -> usize {
    // The small offset stops products like 0.3 * 10 = 3.0000000000000004
    // from rounding up.
    let by_fraction = (keep_fraction * kept as f64 - 1e-9).ceil().max(0.0) as usize;
    by_fraction.max(min_kept.min(kept)).min(kept)
}

/// Top entries by value (descending, ties by ascending position).
pub fn select_hard(kept: &[(usize, f64)], keep_fraction: f64, min_kept: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = kept.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.truncate(selection_size(kept.len(), keep_fraction, min_kept));
    order.into_iter().map(|(p, _)| p).collect()
}

/// Hard-sample positions chosen from one flipped loss map of one sample.
///
/// Candidates are NMS survivors whose flipped label is not ignored and
/// whose loss is positive: a pixel already predicted with certainty cannot
/// be a hard sample.
pub fn hard_positions(
    loss_map: &[f64],
    flipped: &LabelMap,
    cfg: &BclConfig,
) -> Result<Vec<usize>> {
    let (h, w) = (flipped.height(), flipped.width());
    let kept: Vec<(usize, f64)> = nms_filter(loss_map, h, w, cfg.nms_window)?
        .into_iter()
        .filter(|&(p, v)| v > 0.0 && flipped.class_at(p).is_some())
        .collect();
    Ok(select_hard(&kept, cfg.keep_fraction, cfg.min_kept))
}

/// Selected positions per sample for the row and column terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub row: Vec<Vec<usize>>,
    pub col: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryLoss {
    pub value: Var,
    pub row_term: Option<Var>,
    pub col_term: Option<Var>,
}

fn select_term(
    tape: &mut Tape,
    map: Var,
    flipped: &[LabelMap],
    cfg: &BclConfig,
) -> Result<(Option<Var>, Vec<Vec<usize>>)> {
    let mut per_sample = Vec::with_capacity(flipped.len());
    let mut flat = Vec::new();
    let mut offset = 0;
    for lm in flipped {
        let plane = lm.height() * lm.width();
        let values = &tape.value(map).data()[offset..offset + plane];
        let sel = hard_positions(values, lm, cfg)?;
        flat.extend(sel.iter().map(|p| offset + p));
        per_sample.push(sel);
        offset += plane;
    }
    if flat.is_empty() {
        return Ok((None, per_sample));
    }
    let denom = flat.len() as f64;
    Ok((Some(tape.select_mean(map, flat, denom)?), per_sample))
}

impl Tape {
    /// Records the boundary loss of `probs` (softmax output) against `gt`.
    pub fn boundary_loss(
        &mut self,
        probs: Var,
        gt: &[LabelMap],
        cfg: &BclConfig,
    ) -> Result<(BoundaryLoss, Selection)> {
        cfg.validate()?;
        let rows: Vec<_> = gt.iter().map(|g| row_flip(g, cfg.step)).collect();
        let cols: Vec<_> = gt.iter().map(|g| col_flip(g, cfg.step)).collect();
        let row_map = self.cross_entropy_map(probs, &rows)?;
        let col_map = self.cross_entropy_map(probs, &cols)?;
        let (row_term, row_sel) = select_term(self, row_map, &rows, cfg)?;
        let (col_term, col_sel) = select_term(self, col_map, &cols, cfg)?;

        let mut parts = Vec::new();
        if let Some(t) = row_term {
            parts.push(self.scale(t, cfg.lambda1)?);
        }
        if let Some(t) = col_term {
            parts.push(self.scale(t, cfg.lambda2)?);
        }
        let value = match parts[..] {
            [] => self.constant(Tensor::scalar(0.0)),
            [a] => a,
            [a, b] => self.add(a, b)?,
            _ => unreachable!(),
        };
        Ok((
            BoundaryLoss {
                value,
                row_term,
                col_term,
            },
            Selection {
                row: row_sel,
                col: col_sel,
            },
        ))
    }

    /// `mean CE + α · L_b` on raw logits.
    pub fn total_loss(
        &mut self,
        logits: Var,
        gt: &[LabelMap],
        cfg: &BclConfig,
    ) -> Result<TotalLoss> {
        cfg.validate()?;
        let probs = self.softmax_channels(logits)?;
        let ce_map = self.cross_entropy_map(probs, gt)?;
        let ce = self.masked_mean_ce(ce_map, gt)?;
        if cfg.alpha == 0.0 {
            // The boundary term is still reported, but stays off the graph.
            let boundary = boundary_loss(self.value(probs), gt, cfg)?;
            return Ok(TotalLoss {
                total: ce,
                ce,
                boundary,
            });
        }
        let (lb, _) = self.boundary_loss(probs, gt, cfg)?;
        let boundary = self.value(lb.value).item()?;
        let weighted = self.scale(lb.value, cfg.alpha)?;
        let total = self.add(ce, weighted)?;
        Ok(TotalLoss {
            total,
            ce,
            boundary,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub ce: Var,
    /// Value of the (unweighted) boundary term.
    pub boundary: f64,
}

/// Boundary loss value of softmax probabilities, without recording gradients.
pub fn boundary_loss(probs: &Tensor, gt: &[LabelMap], cfg: &BclConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let (lb, _) = tape.boundary_loss(p, gt, cfg)?;
    tape.value(lb.value).item()
}

/// Total objective value on logits, without recording gradients.
pub fn total_loss(logits: &Tensor, gt: &[LabelMap], cfg: &BclConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let t = tape.total_loss(l, gt, cfg)?;
    tape.value(t.total).item()
}

/// Softmax probabilities of raw logits.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    softmax_channels_forward(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_map(labels: &[u32]) -> LabelMap {
        LabelMap::new(1, labels.len(), 8, 255, labels.to_vec()).unwrap()
    }

    #[test]
    fn zero_step_is_identity() {
        let g = LabelMap::new(2, 3, 4, 255, vec![0, 1, 2, 3, 255, 1]).unwrap();
        assert_eq!(row_flip(&g, 0), g);
        assert_eq!(col_flip(&g, 0), g);
    }

    #[test]
    fn adjacent_pairs_swap_for_step_one() {
        assert_eq!(row_flip(&row_map(&[0, 1, 2, 3]), 1).labels(), &[1, 0, 3, 2]);
    }

    #[test]
    fn trailing_partial_block_is_untouched() {
        assert_eq!(
            row_flip(&row_map(&[0, 1, 2, 3, 4, 5]), 2).labels(),
            &[2, 3, 0, 1, 4, 5]
        );
        // s >= W/2 with W odd: one full block at most
        assert_eq!(row_flip(&row_map(&[0, 1, 2]), 1).labels(), &[1, 0, 2]);
        assert_eq!(row_flip(&row_map(&[0, 1, 2]), 2).labels(), &[0, 1, 2]);
    }

    #[test]
    fn col_flip_acts_on_rows() {
        let g = LabelMap::new(4, 2, 8, 255, vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(col_flip(&g, 1).labels(), &[2, 3, 0, 1, 6, 7, 4, 5]);
    }

    #[test]
    fn nms_keeps_plateaus_and_rejects_even_windows() {
        let flat = vec![2.0; 12];
        assert_eq!(nms_filter(&flat, 3, 4, 3).unwrap().len(), 12);
        assert!(nms_filter(&flat, 3, 4, 2).is_err());
        let kept = nms_filter(&[1.0, 3.0, 2.0], 1, 3, 1).unwrap();
        assert_eq!(kept, vec![(0, 1.0), (1, 3.0), (2, 2.0)]);
    }

    #[test]
    fn spike_suppresses_its_neighbours() {
        let mut m = vec![0.0; 25];
        m[2 * 5 + 2] = 1.0;
        let kept = nms_filter(&m, 5, 5, 3).unwrap();
        // 25 pixels minus the 8 neighbours of the spike
        assert_eq!(kept.len(), 17);
        assert!(kept.contains(&(12, 1.0)));
        assert!(!kept.iter().any(|&(p, _)| p == 11 || p == 6 || p == 18));
    }

    #[test]
    fn selection_rules() {
        let kept = vec![(0, 5.0), (1, 3.0), (2, 3.0), (3, 1.0)];
        assert_eq!(select_hard(&kept, 0.5, 0), vec![0, 1]);
        assert_eq!(select_hard(&kept, 1.0, 0).len(), 4);
        let ten: Vec<_> = (0..10).map(|i| (i, i as f64)).collect();
        assert_eq!(select_hard(&ten, 0.1, 4).len(), 4);
        assert_eq!(selection_size(10, 0.3, 0), 3);
        assert_eq!(selection_size(3, 0.5, 10), 3);
        assert_eq!(selection_size(0, 0.5, 10), 0);
    }

    #[test]
    fn config_validation() {
        assert!(BclConfig::default().validate().is_ok());
        for bad in [
            BclConfig { nms_window: 2, ..Default::default() },
            BclConfig { keep_fraction: 0.0, ..Default::default() },
            BclConfig { keep_fraction: 1.5, ..Default::default() },
            BclConfig { lambda1: -1.0, ..Default::default() },
            BclConfig { alpha: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn all_ignored_batch_gives_zero_boundary_loss() {
        let gt = LabelMap::new(2, 2, 2, 255, vec![255; 4]).unwrap();
        let probs = Tensor::full([1, 2, 2, 2], 0.5);
        assert_eq!(boundary_loss(&probs, &[gt], &BclConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambdas_give_zero() {
        let gt = LabelMap::new(2, 2, 2, 255, vec![0, 1, 1, 0]).unwrap();
        let probs = Tensor::new([1, 2, 2, 2], vec![0.3, 0.6, 0.2, 0.9, 0.7, 0.4, 0.8, 0.1]).unwrap();
        let cfg = BclConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        assert_eq!(boundary_loss(&probs, &[gt], &cfg).unwrap(), 0.0);
    }
}
