#![allow(dead_code)]

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use rosam::data::{LabeledImage, ObjectAnnotation};
use rosam::raster::{FloatImage, RgbImage};
use rosam::{BoxPrompt, MaskGrid};

pub enum Shape {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Dark background with bright objects; one annotation per shape.
pub fn synthetic_item(name: &str, width: usize, height: usize, shapes: &[Shape]) -> LabeledImage {
    let mut image = RgbImage::filled(width, height, 50);
    let mut objects = Vec::new();
    for s in shapes {
        let mask = MaskGrid::from_bools(height, width, (0..width * height).map(|i| s.contains(i % width, i / width)));
        for y in 0..height {
            for x in 0..width {
                if mask.is_set(x, y) {
                    image.put(x, y, [210, 190, 120]);
                }
            }
        }
        objects.push(ObjectAnnotation {
            bbox: mask.tight_bbox().expect("shape inside the image"),
            mask,
            category: "ship".into(),
        });
    }
    LabeledImage {
        name: name.into(),
        image,
        objects,
    }
}

/// The two-sample fixture: a rectangle and a disk on 128×128 frames.
pub fn overfit_pair() -> Vec<LabeledImage> {
    vec![
        synthetic_item("rect", 128, 128, &[Shape::Rect { x0: 30, y0: 40, x1: 90, y1: 80 }]),
        synthetic_item("disk", 128, 128, &[Shape::Disk { cx: 70.0, cy: 60.0, r: 24.0 }]),
    ]
}

pub fn random_float_image<R: Rng>(rng: &mut R, side: usize) -> FloatImage {
    FloatImage {
        width: side,
        height: side,
        data: (0..side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn random_box<R: Rng>(rng: &mut R, side: usize) -> BoxPrompt {
    let x0 = rng.random_range(0..side - 8) as f64;
    let y0 = rng.random_range(0..side - 8) as f64;
    let x1 = rng.random_range(x0 as usize + 4..=side) as f64;
    let y1 = rng.random_range(y0 as usize + 4..=side) as f64;
    BoxPrompt::new(x0, y0, x1, y1)
}

/// Random blob: union of a few rectangles.
pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize) -> MaskGrid {
    let mut m = MaskGrid::empty(h, w);
    for _ in 0..rng.random_range(1..4) {
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let x1 = rng.random_range(x0 + 1..=w.min(x0 + w / 2 + 1));
        let y1 = rng.random_range(y0 + 1..=h.min(y0 + h / 2 + 1));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, 1.0);
            }
        }
    }
    m
}

/// Runs one acceptance criterion, prints a single PASS/FAIL line past the
/// test harness's output capture, and fails the test on a miss.
pub fn criterion(id: u32, name: &str, budget: Duration, check: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(d) => (false, d),
    };
    let line = format!(
        "{} criterion {id:>2} {name}: {detail} [{:.1}s]\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
