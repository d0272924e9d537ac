//! 8-bit RGB images, normalised float images and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::resample::{resize, Interpolation};

/// Pixel value used for padding and exposed rotation corners.
pub const GRAY_FILL: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        RgbImage {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::input(format!(
                "expected {} bytes for a {width}x{height} RGB image, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Resamples to `width × height`, rounding back to bytes.
    pub fn resized(&self, width: usize, height: usize, kernel: Interpolation) -> RgbImage {
        let src: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let out = resize(&src, self.height, self.width, 3, height, width, kernel);
        RgbImage {
            width,
            height,
            data: out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(RgbImage {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn normalized(&self, norm: &Normalization) -> FloatImage {
        normalize_image(&self.data, self.height, self.width, 3, norm).expect("RGB data is 3-channel")
    }
}

/// Three-channel floating-point image in interleaved row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Per-channel `(v / 255 - mean) / std`.
pub fn normalize_image(
    raw: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    norm: &Normalization,
) -> Result<FloatImage> {
    if channels != 3 {
        return Err(Error::input(format!("expected 3 channels, got {channels}")));
    }
    if raw.len() != height * width * 3 {
        return Err(Error::input("raw buffer does not match the declared size"));
    }
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % 3;
            (v as f64 / 255.0 - norm.mean[c]) / norm.std[c]
        })
        .collect();
    Ok(FloatImage {
        width,
        height,
        data,
    })
}

/// Reads a single-channel mask PNG; any non-zero value is foreground.
pub fn load_mask(path: &Path) -> Result<MaskGrid> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(MaskGrid::from_bytes(h as usize, w as usize, img.as_raw()))
}

/// Writes a binary mask as an 8-bit PNG with values 0/255.
pub fn save_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    image::save_buffer(
        path,
        &mask.to_bytes(),
        mask.width as u32,
        mask.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a 16-bit single-channel label map.
pub fn save_label_map(path: &Path, labels: &[u16], width: usize, height: usize) -> Result<()> {
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(width as u32, height as u32, labels.to_vec())
            .ok_or_else(|| Error::input("label map size mismatch"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_label_map(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_examples() {
        let norm = Normalization::default();
        let gray = normalize_image(&[128; 12], 2, 2, 3, &norm).unwrap();
        let expected = (128.0 / 255.0 - 0.5) / 0.5;
        assert!(gray.data.iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.0039).abs() < 1e-4);
        let black = normalize_image(&[0; 12], 2, 2, 3, &norm).unwrap();
        assert!(black.data.iter().all(|&v| v == -1.0));
        let white = normalize_image(&[255; 12], 2, 2, 3, &norm).unwrap();
        assert!(white.data.iter().all(|&v| v == 1.0));
        assert!(normalize_image(&[0; 8], 2, 2, 2, &norm).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 3, 10);
        img.put(4, 2, [1, 2, 3]);
        let p = dir.path().join("a.png");
        img.save(&p).unwrap();
        assert_eq!(RgbImage::load(&p).unwrap(), img);

        let mask = MaskGrid::from_bools(3, 5, (0..15).map(|i| i % 4 == 0));
        let mp = dir.path().join("m.png");
        save_mask(&mp, &mask).unwrap();
        assert_eq!(load_mask(&mp).unwrap(), mask);

        let labels: Vec<u16> = (0..15).map(|i| i * 1000).collect();
        let lp = dir.path().join("l.png");
        save_label_map(&lp, &labels, 5, 3).unwrap();
        assert_eq!(load_label_map(&lp).unwrap(), (labels, 5, 3));
    }
}
