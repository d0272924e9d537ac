//! Training-time geometry augmentation: large-scale jitter with crop or
//! bottom-right gray padding, and rotation about the canvas centre.
//!
//! Images are resampled bilinearly and masks by nearest neighbour; boxes are
//! always recomputed from the transformed masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::MaskGrid;
use crate::raster::{RgbImage, GRAY_FILL};
use crate::resample::{taps_1d, Interpolation};

use super::dataset::{LabeledImage, ObjectAnnotation};

/// Scale range used by large-scale jitter.
pub const LSJ_SCALE_RANGE: (f64, f64) = (0.1, 4.0);

/// Objects with fewer foreground pixels after a transform are dropped.
pub const MIN_OBJECT_AREA: usize = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub scale: f64,
    pub angle_deg: f64,
    /// `(x, y)` offset of the crop inside the rescaled image.
    pub crop_offset: (usize, usize),
}

/// A canvas-sized training image with its transformed objects.
///
/// Pixels stay 8-bit here and are normalised when fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image: RgbImage,
    pub objects: Vec<ObjectAnnotation>,
    pub log: AugmentLog,
}

impl TrainingSample {
    pub fn canvas(&self) -> usize {
        self.image.width
    }
}

fn retain_objects(masks: Vec<(MaskGrid, String)>) -> Vec<ObjectAnnotation> {
    masks
        .into_iter()
        .filter(|(m, _)| m.area() >= MIN_OBJECT_AREA)
        .filter_map(|(mask, category)| {
            let bbox = mask.tight_bbox()?;
            Some(ObjectAnnotation { bbox, mask, category })
        })
        .collect()
}

/// Resizes by `scale`, then takes the canvas-sized window at `offset`
/// (enlargement) or pads bottom-right with gray (shrink).
fn scale_and_place(item: &LabeledImage, canvas: usize, scale: f64, offset: (usize, usize)) -> TrainingSample {
    let src = &item.image;
    let new_w = ((src.width as f64 * scale).round() as usize).max(1);
    let new_h = ((src.height as f64 * scale).round() as usize).max(1);
    let (ox, oy) = offset;
    let vis_w = new_w.saturating_sub(ox).min(canvas);
    let vis_h = new_h.saturating_sub(oy).min(canvas);

    let xt_lin = taps_1d(src.width, new_w, Interpolation::Bilinear);
    let yt_lin = taps_1d(src.height, new_h, Interpolation::Bilinear);
    let xt_nn = taps_1d(src.width, new_w, Interpolation::Nearest);
    let yt_nn = taps_1d(src.height, new_h, Interpolation::Nearest);

    let mut image = RgbImage::filled(canvas, canvas, GRAY_FILL);
    for y in 0..vis_h {
        for x in 0..vis_w {
            let mut acc = [0.0f64; 3];
            for &(sy, wy) in &yt_lin[oy + y] {
                for &(sx, wx) in &xt_lin[ox + x] {
                    let p = src.pixel(sx, sy);
                    let w = wy * wx;
                    for c in 0..3 {
                        acc[c] += w * p[c] as f64;
                    }
                }
            }
            image.put(x, y, acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }

    let masks = item
        .objects
        .iter()
        .map(|obj| {
            let mut m = MaskGrid::empty(canvas, canvas);
            for y in 0..vis_h {
                let sy = yt_nn[oy + y][0].0;
                for x in 0..vis_w {
                    let sx = xt_nn[ox + x][0].0;
                    if obj.mask.is_set(sx, sy) {
                        m.set(x, y, 1.0);
                    }
                }
            }
            (m, obj.category.clone())
        })
        .collect();

    TrainingSample {
        image,
        objects: retain_objects(masks),
        log: AugmentLog {
            scale,
            angle_deg: 0.0,
            crop_offset: offset,
        },
    }
}

/// Large-scale jitter at a fixed `scale`; `rng` only picks the crop offset.
pub fn jitter_with_scale<R: Rng + ?Sized>(item: &LabeledImage, canvas: usize, scale: f64, rng: &mut R) -> TrainingSample {
    let new_w = ((item.image.width as f64 * scale).round() as usize).max(1);
    let new_h = ((item.image.height as f64 * scale).round() as usize).max(1);
    let ox = if new_w > canvas { rng.random_range(0..=new_w - canvas) } else { 0 };
    let oy = if new_h > canvas { rng.random_range(0..=new_h - canvas) } else { 0 };
    scale_and_place(item, canvas, scale, (ox, oy))
}

/// Samples a scale uniformly from `scale_range` and applies
/// [`jitter_with_scale`].
pub fn large_scale_jitter<R: Rng + ?Sized>(
    item: &LabeledImage,
    canvas: usize,
    scale_range: (f64, f64),
    rng: &mut R,
) -> TrainingSample {
    let (lo, hi) = scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    jitter_with_scale(item, canvas, scale, rng)
}

/// Resizes the longer side to the canvas and pads bottom-right; used when
/// jitter is disabled.
pub fn fit_to_canvas(item: &LabeledImage, canvas: usize) -> TrainingSample {
    let longest = item.image.width.max(item.image.height) as f64;
    scale_and_place(item, canvas, canvas as f64 / longest, (0, 0))
}

fn rotate_exact(sample: &TrainingSample, quarter_turns: u32) -> TrainingSample {
    let n = sample.canvas();
    // one quarter turn maps (x, y) to (y, n-1-x)
    let map = |x: usize, y: usize| -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        for _ in 0..quarter_turns {
            (x, y) = (y, n - 1 - x);
        }
        (x, y)
    };
    let mut image = RgbImage::filled(n, n, GRAY_FILL);
    for y in 0..n {
        for x in 0..n {
            let (nx, ny) = map(x, y);
            image.put(nx, ny, sample.image.pixel(x, y));
        }
    }
    let masks = sample
        .objects
        .iter()
        .map(|obj| {
            let mut m = MaskGrid::empty(n, n);
            for y in 0..n {
                for x in 0..n {
                    if obj.mask.is_set(x, y) {
                        let (nx, ny) = map(x, y);
                        m.set(nx, ny, 1.0);
                    }
                }
            }
            (m, obj.category.clone())
        })
        .collect();
    TrainingSample {
        image,
        objects: retain_objects(masks),
        log: sample.log.clone(),
    }
}

fn rotate_resampled(sample: &TrainingSample, angle_deg: f64) -> TrainingSample {
    let n = sample.canvas();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    // inverse of (dx, dy) -> (cos dx + sin dy, -sin dx + cos dy)
    let source = |x: usize, y: usize| -> (f64, f64) {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        (cos * dx - sin * dy + c, sin * dx + cos * dy + c)
    };
    let src = &sample.image;
    let mut image = RgbImage::filled(n, n, GRAY_FILL);
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = source(x, y);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut acc = [0.0f64; 3];
            for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let w = wx * wy;
                    if w == 0.0 {
                        continue;
                    }
                    let (px, py) = (x0 as i64 + ox, y0 as i64 + oy);
                    let p = if px >= 0 && py >= 0 && (px as usize) < n && (py as usize) < n {
                        src.pixel(px as usize, py as usize)
                    } else {
                        [GRAY_FILL; 3]
                    };
                    for ch in 0..3 {
                        acc[ch] += w * p[ch] as f64;
                    }
                }
            }
            image.put(x, y, acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    let masks = sample
        .objects
        .iter()
        .map(|obj| {
            let mut m = MaskGrid::empty(n, n);
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy) = source(x, y);
                    let (rx, ry) = (sx.round(), sy.round());
                    if rx >= 0.0 && ry >= 0.0 && rx < n as f64 && ry < n as f64 && obj.mask.is_set(rx as usize, ry as usize) {
                        m.set(x, y, 1.0);
                    }
                }
            }
            (m, obj.category.clone())
        })
        .collect();
    TrainingSample {
        image,
        objects: retain_objects(masks),
        log: sample.log.clone(),
    }
}

/// Rotates by `angle_deg` about the canvas centre. Multiples of 90° take a
/// lossless pixel-permutation path.
pub fn rotate(sample: &TrainingSample, angle_deg: f64) -> TrainingSample {
    let a = angle_deg.rem_euclid(360.0);
    let mut out = if a % 90.0 == 0.0 {
        rotate_exact(sample, (a / 90.0) as u32)
    } else {
        rotate_resampled(sample, a)
    };
    out.log.angle_deg = a;
    out
}

/// Rotation by an angle drawn uniformly from `[0, 360)`.
pub fn random_rotate<R: Rng + ?Sized>(sample: &TrainingSample, rng: &mut R) -> TrainingSample {
    let angle = rng.random_range(0.0..360.0);
    rotate(sample, angle)
}

/// True when every object's box is the tight box of its canvas-sized mask.
pub fn boxes_match_masks(sample: &TrainingSample) -> bool {
    sample
        .objects
        .iter()
        .all(|o| o.mask.tight_bbox() == Some(o.bbox) && o.mask.height == sample.canvas() && o.mask.width == sample.canvas())
}
