//! Mask grids and box prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{Interpolation, ResizePlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Logits,
    Binary,
}

/// A row-major `height × width` grid of logits or binary occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub kind: MaskKind,
    pub values: Vec<f32>,
}

impl MaskGrid {
    pub fn logits(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width);
        MaskGrid {
            height,
            width,
            kind: MaskKind::Logits,
            values,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        MaskGrid {
            height,
            width,
            kind: MaskKind::Binary,
            values: vec![0.0; height * width],
        }
    }

    /// A binary grid from booleans in row-major order.
    pub fn from_bools(height: usize, width: usize, bits: impl IntoIterator<Item = bool>) -> Self {
        let values: Vec<f32> = bits.into_iter().map(|b| b as u8 as f32).collect();
        assert_eq!(values.len(), height * width);
        MaskGrid {
            height,
            width,
            kind: MaskKind::Binary,
            values,
        }
    }

    /// Binary grid from 8-bit data where any non-zero byte is foreground.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::from_bools(height, width, bytes.iter().map(|&b| b != 0))
    }

    pub fn is_binary(&self) -> bool {
        self.kind == MaskKind::Binary
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] > 0.5
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.values[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn same_shape(&self, other: &MaskGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect()
    }

    /// Tight box around the foreground with exclusive far edges.
    pub fn tight_bbox(&self) -> Option<BoxPrompt> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_set(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoxPrompt::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

/// Bilinearly resamples a logit grid to `target_h × target_w`.
pub fn upsample_logits(grid: &MaskGrid, target_h: usize, target_w: usize) -> Result<MaskGrid> {
    if grid.kind != MaskKind::Logits {
        return Err(Error::input("upsample_logits expects a logit grid"));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::input("upsample target size must be positive"));
    }
    if target_h == grid.height && target_w == grid.width {
        return Ok(grid.clone());
    }
    let plan = ResizePlan::new(grid.height, grid.width, target_h, target_w, Interpolation::Bilinear);
    let src: Vec<f64> = grid.values.iter().map(|&v| v as f64).collect();
    let values = plan.apply(&src, 1).into_iter().map(|v| v as f32).collect();
    Ok(MaskGrid::logits(target_h, target_w, values))
}

/// `1` where the logit is strictly above `threshold`, `0` elsewhere.
pub fn binarize(grid: &MaskGrid, threshold: f32) -> MaskGrid {
    MaskGrid::from_bools(grid.height, grid.width, grid.values.iter().map(|&v| v > threshold))
}

/// Axis-aligned box `[x0, x1) × [y0, y1)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxPrompt {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxPrompt { x0, y0, x1, y1 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxPrompt::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Rejects degenerate, non-finite, or out-of-frame boxes.
    pub fn validate(&self, frame_w: f64, frame_h: f64) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::input(format!("degenerate box {:?}", self.to_array())));
        }
        if self.x0 < 0.0 || self.y0 < 0.0 || self.x1 > frame_w || self.y1 > frame_h {
            return Err(Error::input(format!(
                "box {:?} outside {frame_w}x{frame_h} frame",
                self.to_array()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_uses_strict_threshold() {
        let g = MaskGrid::logits(1, 3, vec![-5.0, 0.0, 5.0]);
        assert_eq!(binarize(&g, 0.0).values, vec![0.0, 0.0, 1.0]);
        let neg = MaskGrid::logits(2, 2, vec![-5.0; 4]);
        assert_eq!(binarize(&neg, 0.0).area(), 0);
        let pos = MaskGrid::logits(2, 2, vec![5.0; 4]);
        assert_eq!(binarize(&pos, 0.0).area(), 4);
    }

    #[test]
    fn upsample_shapes_and_constants() {
        let g = MaskGrid::logits(64, 64, vec![1.5; 64 * 64]);
        let up = upsample_logits(&g, 256, 256).unwrap();
        assert_eq!((up.height, up.width), (256, 256));
        assert!(up.values.iter().all(|&v| v == 1.5));
        assert_eq!(upsample_logits(&g, 64, 64).unwrap(), g);
        assert!(upsample_logits(&g, 0, 4).is_err());
        assert!(upsample_logits(&binarize(&g, 0.0), 4, 4).is_err());
    }

    #[test]
    fn tight_bbox_has_exclusive_far_edge() {
        let mut m = MaskGrid::empty(10, 10);
        assert!(m.tight_bbox().is_none());
        m.set(3, 4, 1.0);
        m.set(6, 5, 1.0);
        assert_eq!(m.tight_bbox().unwrap(), BoxPrompt::new(3.0, 4.0, 7.0, 6.0));
    }

    #[test]
    fn box_validation() {
        assert!(BoxPrompt::new(0.0, 0.0, 4.0, 4.0).validate(4.0, 4.0).is_ok());
        assert!(BoxPrompt::new(2.0, 0.0, 2.0, 4.0).validate(4.0, 4.0).is_err());
        assert!(BoxPrompt::new(0.0, 0.0, 5.0, 4.0).validate(4.0, 4.0).is_err());
    }
}
