//! Separable resampling with half-pixel-centred kernels.
//!
//! A resize is described by two lists of 1-D taps (rows and columns). The
//! same taps drive image resizing in the data and inference pipelines and
//! the differentiable logit upsampling inside the model, whose backward pass
//! is the transposed application.

use serde::{Deserialize, Serialize};

/// Cubic convolution coefficient (the common `-0.75` variant).
const CUBIC_A: f64 = -0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for Interpolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(format!("unknown interpolation `{other}`")),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
        })
    }
}

pub type Taps = Vec<Vec<(usize, f64)>>;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Taps mapping `dst` output samples onto `src` input samples.
pub fn taps_1d(src: usize, dst: usize, kernel: Interpolation) -> Taps {
    assert!(src > 0 && dst > 0, "resample sizes must be positive");
    let ratio = src as f64 / dst as f64;
    let clamp = |i: i64| i.clamp(0, src as i64 - 1) as usize;
    (0..dst)
        .map(|i| {
            let centre = (i as f64 + 0.5) * ratio;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut push = |idx: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                if let Some(t) = taps.iter_mut().find(|t| t.0 == idx) {
                    t.1 += w;
                } else {
                    taps.push((idx, w));
                }
            };
            match kernel {
                Interpolation::Nearest => push(clamp(centre.floor() as i64), 1.0),
                Interpolation::Bilinear => {
                    let x = (centre - 0.5).max(0.0);
                    let x0 = x.floor();
                    let f = x - x0;
                    push(clamp(x0 as i64), 1.0 - f);
                    push(clamp(x0 as i64 + 1), f);
                }
                Interpolation::Bicubic => {
                    let x = centre - 0.5;
                    let x0 = x.floor();
                    let t = x - x0;
                    for k in -1..=2i64 {
                        push(clamp(x0 as i64 + k), cubic(t - k as f64));
                    }
                }
            }
            taps
        })
        .collect()
}

/// Resize plan for an `in_h × in_w` grid to `out_h × out_w`.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Taps,
    cols: Taps,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize, kernel: Interpolation) -> Self {
        ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: taps_1d(in_h, out_h, kernel),
            cols: taps_1d(in_w, out_w, kernel),
        }
    }

    /// Applies the resize to interleaved `in_h × in_w × channels` data.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.in_h * self.in_w * channels);
        let mut tmp = vec![0.0; self.in_h * self.out_w * channels];
        for y in 0..self.in_h {
            for (x, taps) in self.cols.iter().enumerate() {
                let o = (y * self.out_w + x) * channels;
                for &(sx, w) in taps {
                    let s = (y * self.in_w + sx) * channels;
                    for c in 0..channels {
                        tmp[o + c] += w * input[s + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; self.out_h * self.out_w * channels];
        let stride = self.out_w * channels;
        for (y, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[y * stride..(y + 1) * stride];
            for &(sy, w) in taps {
                let src = &tmp[sy * stride..(sy + 1) * stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`ResizePlan::apply`]: maps output-space gradients back to
    /// input space.
    pub fn apply_transpose(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.out_h * self.out_w * channels);
        let stride = self.out_w * channels;
        let mut tmp = vec![0.0; self.in_h * stride];
        for (y, taps) in self.rows.iter().enumerate() {
            let src = &grad_out[y * stride..(y + 1) * stride];
            for &(sy, w) in taps {
                let dst = &mut tmp[sy * stride..(sy + 1) * stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mut out = vec![0.0; self.in_h * self.in_w * channels];
        for y in 0..self.in_h {
            for (x, taps) in self.cols.iter().enumerate() {
                let o = (y * self.out_w + x) * channels;
                for &(sx, w) in taps {
                    let s = (y * self.in_w + sx) * channels;
                    for c in 0..channels {
                        out[s + c] += w * tmp[o + c];
                    }
                }
            }
        }
        out
    }
}

/// Convenience wrapper around [`ResizePlan`].
pub fn resize(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
    kernel: Interpolation,
) -> Vec<f64> {
    if in_h == out_h && in_w == out_w {
        return input.to_vec();
    }
    ResizePlan::new(in_h, in_w, out_h, out_w, kernel).apply(input, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_partitions_of_unity() {
        for kernel in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
            for (src, dst) in [(5, 11), (64, 256), (256, 64), (7, 7), (512, 51)] {
                for t in taps_1d(src, dst, kernel) {
                    let s: f64 = t.iter().map(|x| x.1).sum();
                    assert!((s - 1.0).abs() < 1e-12, "{kernel} {src}->{dst}: {s}");
                }
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        for kernel in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
            let plan = ResizePlan::new(6, 4, 6, 4, kernel);
            let data: Vec<f64> = (0..24).map(|v| v as f64 * 1.5).collect();
            assert_eq!(plan.apply(&data, 1), data);
        }
    }

    #[test]
    fn constants_survive_any_kernel() {
        let data = vec![3.25; 9 * 5 * 2];
        for kernel in [Interpolation::Bilinear, Interpolation::Bicubic] {
            let out = resize(&data, 9, 5, 2, 20, 13, kernel);
            assert!(out.iter().all(|v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn factor_two_bilinear_downsample_averages_pairs() {
        let data = vec![0.0, 2.0, 4.0, 6.0];
        let out = resize(&data, 1, 4, 1, 1, 2, Interpolation::Bilinear);
        assert_eq!(out, vec![1.0, 5.0]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let plan = ResizePlan::new(5, 4, 9, 7, Interpolation::Bicubic);
        let x: Vec<f64> = (0..5 * 4 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..9 * 7 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = plan.apply(&x, 2);
        let aty = plan.apply_transpose(&y, 2);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
