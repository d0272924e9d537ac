//! Prompt-centred crop, upsample, segment, and restore.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{upsample_logits, BoxPrompt, MaskGrid};
use crate::model::{decode, encode_box_prompt, encoder_forward, Head, ModelState};
use crate::raster::{FloatImage, Normalization, RgbImage, GRAY_FILL};
use crate::resample::{Interpolation, ResizePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub window_size: usize,
    pub sampling_rate: usize,
    pub interpolation: Interpolation,
    /// One window centred on each object; otherwise objects share tiles.
    pub single_object: bool,
    pub logit_threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window_size: 512,
            sampling_rate: 2,
            interpolation: Interpolation::Bicubic,
            single_object: true,
            logit_threshold: 0.0,
        }
    }
}

impl InferenceConfig {
    /// The default pipeline for a model with the given canvas.
    pub fn for_canvas(canvas: usize) -> Self {
        InferenceConfig {
            window_size: canvas / 2,
            ..Default::default()
        }
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        if ![1, 2, 4].contains(&self.sampling_rate) {
            return Err(Error::config("sampling_rate", "must be 1, 2 or 4"));
        }
        if self.window_size == 0 || self.window_size * self.sampling_rate != canvas {
            return Err(Error::config(
                "window_size",
                format!(
                    "window {} x rate {} must equal the canvas {canvas}",
                    self.window_size, self.sampling_rate
                ),
            ));
        }
        if self.interpolation == Interpolation::Nearest {
            return Err(Error::config("interpolation", "must be bilinear or bicubic"));
        }
        if !self.logit_threshold.is_finite() {
            return Err(Error::config("logit_threshold", "must be finite"));
        }
        Ok(())
    }
}

/// The seven sampling-rate / kernel / object-mode combinations of the
/// inference ablation, for a model with `canvas` input.
pub fn ablation_configs(canvas: usize) -> Vec<(String, InferenceConfig)> {
    let row = |rate: usize, interp: Interpolation, single: bool| {
        let name = format!("rate{rate}-{interp}-{}", if single { "single" } else { "multi" });
        let cfg = InferenceConfig {
            window_size: canvas / rate,
            sampling_rate: rate,
            interpolation: interp,
            single_object: single,
            logit_threshold: 0.0,
        };
        (name, cfg)
    };
    use Interpolation::{Bicubic, Bilinear};
    vec![
        row(1, Bilinear, false),
        row(2, Bilinear, false),
        row(2, Bicubic, false),
        row(4, Bilinear, false),
        row(4, Bicubic, false),
        row(2, Bicubic, true),
        row(4, Bicubic, true),
    ]
}

/// Square window in full-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    /// Gray columns/rows filling the part of the window past the image.
    pub pad_right: usize,
    pub pad_bottom: usize,
    /// The object does not fit inside the window.
    pub truncated: bool,
}

impl CropWindow {
    pub fn visible_width(&self) -> usize {
        self.size - self.pad_right
    }

    pub fn visible_height(&self) -> usize {
        self.size - self.pad_bottom
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.origin_x
            && y >= self.origin_y
            && x < self.origin_x + self.visible_width()
            && y < self.origin_y + self.visible_height()
    }

    fn fits(&self, height: usize, width: usize) -> bool {
        self.origin_x + self.visible_width() <= width && self.origin_y + self.visible_height() <= height
    }

    fn covers(&self, b: &BoxPrompt) -> bool {
        b.x0 >= self.origin_x as f64
            && b.y0 >= self.origin_y as f64
            && b.x1 <= (self.origin_x + self.size) as f64
            && b.y1 <= (self.origin_y + self.size) as f64
    }
}

/// `(origin, pad)` along one axis for a window whose ideal start is `start`.
fn place_axis(start: f64, dim: usize, size: usize) -> (usize, usize) {
    if dim <= size {
        return (0, size - dim);
    }
    let max = (dim - size) as f64;
    (start.round().clamp(0.0, max) as usize, 0)
}

fn check_boxes(boxes: &[BoxPrompt], image_size: (usize, usize)) -> Result<()> {
    let (h, w) = image_size;
    boxes.iter().try_for_each(|b| b.validate(w as f64, h as f64))
}

/// One window per box, centred on the box and clamped inside the image.
pub fn plan_crops(boxes: &[BoxPrompt], image_size: (usize, usize), window_size: usize) -> Result<Vec<CropWindow>> {
    check_boxes(boxes, image_size)?;
    if window_size == 0 {
        return Err(Error::input("window size must be positive"));
    }
    let (h, w) = image_size;
    let half = window_size as f64 / 2.0;
    Ok(boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (cx, cy) = b.center();
            let (ox, pr) = place_axis(cx - half, w, window_size);
            let (oy, pb) = place_axis(cy - half, h, window_size);
            let mut win = CropWindow {
                origin_x: ox,
                origin_y: oy,
                size: window_size,
                pad_right: pr,
                pad_bottom: pb,
                truncated: false,
            };
            win.truncated = !win.covers(b);
            if win.truncated {
                log::warn!("box {i} {:?} does not fit a {window_size}px window", b.to_array());
            }
            win
        })
        .collect())
}

/// Shared tiles: the image is covered by a grid of windows and every box uses
/// the tile containing its centre.
pub fn plan_tiles(boxes: &[BoxPrompt], image_size: (usize, usize), window_size: usize) -> Result<Vec<CropWindow>> {
    check_boxes(boxes, image_size)?;
    if window_size == 0 {
        return Err(Error::input("window size must be positive"));
    }
    let (h, w) = image_size;
    let tile = |c: f64, dim: usize| {
        let idx = ((c / window_size as f64).floor() as usize).min(dim.saturating_sub(1) / window_size);
        place_axis((idx * window_size) as f64, dim, window_size)
    };
    Ok(boxes
        .iter()
        .map(|b| {
            let (cx, cy) = b.center();
            let (ox, pr) = tile(cx, w);
            let (oy, pb) = tile(cy, h);
            let mut win = CropWindow {
                origin_x: ox,
                origin_y: oy,
                size: window_size,
                pad_right: pr,
                pad_bottom: pb,
                truncated: false,
            };
            win.truncated = !win.covers(b);
            win
        })
        .collect())
}

/// Model input for one window plus the prompt in canvas coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: FloatImage,
    pub bbox: BoxPrompt,
}

/// Crops `window` (gray past the image edge), normalises, and resamples by
/// the sampling rate. `bbox` is mapped into the patch frame.
pub fn extract_and_upsample(
    image: &RgbImage,
    window: &CropWindow,
    cfg: &InferenceConfig,
    bbox: &BoxPrompt,
) -> Result<Patch> {
    if !window.fits(image.height, image.width) {
        return Err(Error::input(format!("window {window:?} exceeds the image")));
    }
    let norm = Normalization::default();
    let s = window.size;
    let mut crop = vec![0.0; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let rgb = if x < window.visible_width() && y < window.visible_height() {
                image.pixel(window.origin_x + x, window.origin_y + y)
            } else {
                [GRAY_FILL; 3]
            };
            for c in 0..3 {
                crop[(y * s + x) * 3 + c] = (rgb[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
    }
    let out = s * cfg.sampling_rate;
    let data = if cfg.sampling_rate == 1 {
        crop
    } else {
        ResizePlan::new(s, s, out, out, cfg.interpolation).apply(&crop, 3)
    };
    let r = cfg.sampling_rate as f64;
    let map = |v: f64, o: usize| ((v - o as f64) * r).clamp(0.0, out as f64);
    let bbox = BoxPrompt::new(
        map(bbox.x0, window.origin_x),
        map(bbox.y0, window.origin_y),
        map(bbox.x1, window.origin_x),
        map(bbox.y1, window.origin_y),
    );
    Ok(Patch {
        image: FloatImage {
            width: out,
            height: out,
            data,
        },
        bbox,
    })
}

/// A restored object: full-size binary mask plus the logits of the visible
/// part of its window.
#[derive(Clone, Debug, PartialEq)]
pub struct Restored {
    pub mask: MaskGrid,
    pub window: CropWindow,
    /// `visible_height × visible_width` logits at image resolution.
    pub window_logits: MaskGrid,
}

impl Restored {
    /// Logit at full-image pixel `(x, y)`; `-inf` outside the window.
    pub fn logit_at(&self, x: usize, y: usize) -> f32 {
        if self.window.contains(x, y) {
            self.window_logits.get(x - self.window.origin_x, y - self.window.origin_y)
        } else {
            f32::NEG_INFINITY
        }
    }

    pub fn max_logit(&self) -> f32 {
        self.window_logits.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Full-size logit grid with `-inf` outside the window.
    pub fn full_logits(&self) -> MaskGrid {
        let (h, w) = (self.mask.height, self.mask.width);
        MaskGrid::logits(h, w, (0..h * w).map(|i| self.logit_at(i % w, i / w)).collect())
    }
}

/// Downsamples canvas logits to the window, drops the padding, thresholds,
/// and pastes into an empty `full_size` mask.
pub fn restore_mask(
    patch_logits: &MaskGrid,
    window: &CropWindow,
    cfg: &InferenceConfig,
    full_size: (usize, usize),
) -> Result<Restored> {
    let (h, w) = full_size;
    let canvas = window.size * cfg.sampling_rate;
    if patch_logits.height != canvas || patch_logits.width != canvas {
        return Err(Error::input(format!(
            "patch logits are {}x{}, expected {canvas}x{canvas}",
            patch_logits.width, patch_logits.height
        )));
    }
    if window.pad_right >= window.size || window.pad_bottom >= window.size || !window.fits(h, w) {
        return Err(Error::input(format!("window {window:?} does not fit a {w}x{h} image")));
    }
    let s = window.size;
    let small: Vec<f32> = if cfg.sampling_rate == 1 {
        patch_logits.values.clone()
    } else {
        let src: Vec<f64> = patch_logits.values.iter().map(|&v| v as f64).collect();
        ResizePlan::new(canvas, canvas, s, s, Interpolation::Bilinear)
            .apply(&src, 1)
            .into_iter()
            .map(|v| v as f32)
            .collect()
    };
    let (vw, vh) = (window.visible_width(), window.visible_height());
    let mut logits = Vec::with_capacity(vw * vh);
    let mut mask = MaskGrid::empty(h, w);
    for y in 0..vh {
        for x in 0..vw {
            let v = small[y * s + x];
            logits.push(v);
            if v > cfg.logit_threshold {
                mask.set(window.origin_x + x, window.origin_y + y, 1.0);
            }
        }
    }
    Ok(Restored {
        mask,
        window: *window,
        window_logits: MaskGrid::logits(vh, vw, logits),
    })
}

fn head_logits(state: &ModelState, patch: &FloatImage, boxes: &[BoxPrompt], head: Head) -> Result<Vec<MaskGrid>> {
    let enc = encoder_forward(state, patch)?;
    let canvas = state.config.canvas_size;
    boxes
        .iter()
        .map(|b| {
            let prompt = encode_box_prompt(state, b)?;
            let out = decode(state, &enc, &prompt)?;
            let grid = match head {
                Head::Sam => out.sam_logits,
                Head::Hq => out.hq_logits,
            };
            upsample_logits(&grid, canvas, canvas)
        })
        .collect()
}

/// Segments every box; results are in box order.
pub fn segment_objects(
    state: &ModelState,
    image: &RgbImage,
    boxes: &[BoxPrompt],
    cfg: &InferenceConfig,
    head: Head,
) -> Result<Vec<Restored>> {
    cfg.validate(state.config.canvas_size)?;
    let size = (image.height, image.width);
    let windows = if cfg.single_object {
        plan_crops(boxes, size, cfg.window_size)?
    } else {
        plan_tiles(boxes, size, cfg.window_size)?
    };
    // Boxes sharing a window share one encoder pass.
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        let key = if cfg.single_object { (i, 0) } else { (w.origin_x, w.origin_y) };
        groups.entry(key).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let done: Vec<Result<Vec<(usize, Restored)>>> = groups
        .par_iter()
        .map(|members| {
            let window = windows[members[0]];
            let mut patch = None;
            let mut prompts = Vec::with_capacity(members.len());
            for &i in members {
                let p = extract_and_upsample(image, &window, cfg, &boxes[i])?;
                prompts.push(p.bbox);
                patch.get_or_insert(p.image);
            }
            let logits = head_logits(state, patch.as_ref().expect("non-empty group"), &prompts, head)?;
            members
                .iter()
                .zip(logits)
                .map(|(&i, l)| Ok((i, restore_mask(&l, &windows[i], cfg, size)?)))
                .collect()
        })
        .collect();
    let mut out: Vec<Option<Restored>> = vec![None; boxes.len()];
    for group in done {
        for (i, r) in group? {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every box restored")).collect())
}

/// Label map (`0` background, `i + 1` for instance `i`). A pixel claimed by
/// several masks goes to the highest logit; ties go to the lower index.
pub fn merge_instance_masks(masks: &[MaskGrid], logits: &[MaskGrid]) -> Result<Vec<u16>> {
    if masks.len() != logits.len() {
        return Err(Error::input("one logit grid is needed per mask"));
    }
    let Some(first) = masks.first() else { return Ok(Vec::new()) };
    if masks.iter().chain(logits).any(|m| !m.same_shape(first)) {
        return Err(Error::input("instance masks differ in size"));
    }
    if masks.len() >= u16::MAX as usize {
        return Err(Error::input("too many instances for a 16-bit label map"));
    }
    let n = first.width * first.height;
    Ok((0..n)
        .map(|p| {
            let mut best: Option<(usize, f32)> = None;
            for (i, m) in masks.iter().enumerate() {
                if m.values[p] > 0.5 {
                    let l = logits[i].values[p];
                    if best.is_none_or(|(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
            }
            best.map_or(0, |(i, _)| i as u16 + 1)
        })
        .collect())
}

/// [`merge_instance_masks`] over restored objects.
pub fn merge_restored(objects: &[Restored]) -> Result<Vec<u16>> {
    let masks: Vec<MaskGrid> = objects.iter().map(|r| r.mask.clone()).collect();
    let logits: Vec<MaskGrid> = objects.iter().map(Restored::full_logits).collect();
    merge_instance_masks(&masks, &logits)
}
