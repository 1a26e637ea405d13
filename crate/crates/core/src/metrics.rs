//! Confusion matrix, IoU and boundary F-score.

use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::datagen::boundary_mask;
use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;

/// `counts[true][predicted]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return shape_err("confusion matrix must be square");
        }
        Ok(ConfusionMatrix {
            classes: m,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return shape_err(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let m = self.classes;
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if gt.class_at(i).is_none() {
                continue;
            }
            if g as usize >= m {
                return Err(Error::LabelOutOfRange { label: g, classes: m });
            }
            if p as usize >= m {
                return Err(Error::LabelOutOfRange { label: p, classes: m });
            }
            self.counts[g as usize * m + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return shape_err("merging confusion matrices of different sizes");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Miou {
    /// `None` for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<Miou> {
    let m = cm.classes;
    let per_class: Vec<Option<f64>> = (0..m)
        .map(|c| {
            let diag = cm.get(c, c);
            let row: u64 = (0..m).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..m).map(|t| cm.get(t, c)).sum();
            let union = row + col - diag;
            (union > 0).then(|| diag as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(
            "mIoU undefined: every class has an empty union".into(),
        ));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(Miou { per_class, mean })
}

/// Matched/total boundary pixel counts; sums across images before scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_total: u64,
    pub pred_matched: u64,
    pub gt_total: u64,
    pub gt_matched: u64,
}

impl AddAssign for BoundaryCounts {
    fn add_assign(&mut self, o: Self) {
        self.pred_total += o.pred_total;
        self.pred_matched += o.pred_matched;
        self.gt_total += o.gt_total;
        self.gt_matched += o.gt_matched;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BoundaryCounts {
    pub fn score(&self) -> BoundaryScore {
        match (self.pred_total, self.gt_total) {
            (0, 0) => BoundaryScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
            (0, _) | (_, 0) => BoundaryScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            },
            (pt, gtt) => {
                let precision = self.pred_matched as f64 / pt as f64;
                let recall = self.gt_matched as f64 / gtt as f64;
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                BoundaryScore {
                    precision,
                    recall,
                    f1,
                }
            }
        }
    }
}

/// Counts of `mask` pixels that have a `target` pixel within Chebyshev
/// distance `d`, using a summed-area table over `target`.
fn matched(mask: &[bool], target: &[bool], h: usize, w: usize, d: usize) -> (u64, u64) {
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += target[y * w + x] as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let (mut total, mut hit) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            total += 1;
            let (y0, y1) = (y.saturating_sub(d), (y + d + 1).min(h));
            let (x0, x1) = (x.saturating_sub(d), (x + d + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
            if s > 0 {
                hit += 1;
            }
        }
    }
    (total, hit)
}

pub fn boundary_counts(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<BoundaryCounts> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) {
        return shape_err("prediction and ground truth differ in size");
    }
    let pb = boundary_mask(pred);
    let gb = boundary_mask(gt);
    let (pred_total, pred_matched) = matched(&pb, &gb, h, w, d);
    let (gt_total, gt_matched) = matched(&gb, &pb, h, w, d);
    Ok(BoundaryCounts {
        pred_total,
        pred_matched,
        gt_total,
        gt_matched,
    })
}

pub fn boundary_fscore(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<BoundaryScore> {
    Ok(boundary_counts(pred, gt, d)?.score())
}

/// Flat `key = value` report.
pub fn report(cm: &ConfusionMatrix, boundary: &BoundaryCounts, tolerance: usize) -> Result<String> {
    let m = miou(cm)?;
    let b = boundary.score();
    let mut s = String::new();
    writeln!(s, "pixels = {}", cm.total()).unwrap();
    writeln!(s, "miou = {:.6}", m.mean).unwrap();
    for (c, iou) in m.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(s, "iou.{c} = {v:.6}").unwrap(),
            None => writeln!(s, "iou.{c} = none").unwrap(),
        }
    }
    writeln!(s, "boundary.tolerance = {tolerance}").unwrap();
    writeln!(s, "boundary.precision = {:.6}", b.precision).unwrap();
    writeln!(s, "boundary.recall = {:.6}", b.recall).unwrap();
    writeln!(s, "boundary.f1 = {:.6}", b.f1).unwrap();
    Ok(s)
}
