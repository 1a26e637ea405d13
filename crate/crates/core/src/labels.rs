//! Per-pixel class-id grids.

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u32,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        ignore_index: u32,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err("label map must have non-zero extents");
        }
        if labels.len() != height * width {
            return shape_err(format!(
                "label map {height}x{width} with {} labels",
                labels.len()
            ));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::InvalidArgument(format!(
                "ignore index {ignore_index} collides with {num_classes} classes"
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != ignore_index && l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            ignore_index,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u32) -> Result<Self> {
        Self::new(
            height,
            width,
            num_classes,
            DEFAULT_IGNORE_INDEX,
            vec![class; height * width],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn is_ignored(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == self.ignore_index
    }

    /// Class at a flat position, `None` when ignored.
    pub fn class_at(&self, idx: usize) -> Option<usize> {
        let l = self.labels[idx];
        (l != self.ignore_index).then_some(l as usize)
    }

    /// Same geometry and classes, different contents.
    pub(crate) fn with_labels(&self, labels: Vec<u32>) -> Self {
        debug_assert_eq!(labels.len(), self.labels.len());
        LabelMap {
            labels,
            ..self.clone()
        }
    }
}
