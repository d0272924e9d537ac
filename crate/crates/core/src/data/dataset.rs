//! Annotation index ingestion and export.
//!
//! A dataset root holds `annotations.json`:
//!
//! ```json
//! {"images":[{"file":"a.png","height":H,"width":W,
//!   "objects":[{"bbox":[x0,y0,x1,y1],"mask":"masks/a_0.png","category":"ship"}]}]}
//! ```
//!
//! Masks are single-channel PNGs (0 background, 255 object) the size of the
//! image. Records without masks are accepted by [`load_tracking`] only.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BoxPrompt, MaskGrid};
use crate::raster::{load_mask, save_mask, RgbImage};

pub const INDEX_FILE: &str = "annotations.json";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IndexFile {
    pub images: Vec<IndexImage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexImage {
    pub file: String,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub objects: Vec<IndexObject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexObject {
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default = "default_category")]
    pub category: String,
}

fn default_category() -> String {
    "object".to_string()
}

/// One ground-truth object: tight box, image-sized mask, category.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub bbox: BoxPrompt,
    pub mask: MaskGrid,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_path: PathBuf,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub objects: Vec<ObjectAnnotation>,
}

impl AnnotationRecord {
    /// File stem used to name per-object outputs.
    pub fn stem(&self) -> String {
        image_stem(&self.image_path)
    }

    /// Loads the pixels and pairs them with the annotations.
    pub fn load(&self) -> Result<LabeledImage> {
        let image = RgbImage::load(&self.image_path)?;
        if (image.height, image.width) != self.image_size {
            return Err(Error::Ingest {
                record: self.image_path.display().to_string(),
                message: format!(
                    "image is {}x{} but the index says {}x{}",
                    image.width, image.height, self.image_size.1, self.image_size.0
                ),
            });
        }
        Ok(LabeledImage {
            name: self.stem(),
            image,
            objects: self.objects.clone(),
        })
    }
}

/// An image held in memory together with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub image: RgbImage,
    pub objects: Vec<ObjectAnnotation>,
}

/// A frame with boxes only (tracking annotations).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingRecord {
    pub image_path: PathBuf,
    pub image_size: (usize, usize),
    pub boxes: Vec<BoxPrompt>,
    pub categories: Vec<String>,
}

impl TrackingRecord {
    pub fn stem(&self) -> String {
        image_stem(&self.image_path)
    }
}

pub fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_index(root: &Path) -> Result<IndexFile> {
    let path = root.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

fn ingest_error(record: &str, message: impl Into<String>) -> Error {
    Error::Ingest {
        record: record.to_string(),
        message: message.into(),
    }
}

/// Loads and validates a segmentation dataset.
///
/// Boxes are replaced by the tight box of their mask, objects with empty
/// masks are dropped, and records are returned sorted by image path.
pub fn load_dataset(root: &Path) -> Result<Vec<AnnotationRecord>> {
    let index = read_index(root)?;
    let mut records = Vec::with_capacity(index.images.len());
    for img in &index.images {
        let image_path = root.join(&img.file);
        if !image_path.is_file() {
            return Err(ingest_error(&img.file, "image file not found"));
        }
        let mut objects = Vec::with_capacity(img.objects.len());
        for (i, obj) in img.objects.iter().enumerate() {
            let Some(rel) = &obj.mask else {
                return Err(ingest_error(&img.file, format!("object {i} has no mask")));
            };
            let mask_path = root.join(rel);
            if !mask_path.is_file() {
                return Err(ingest_error(&img.file, format!("mask file `{rel}` not found")));
            }
            let mask = load_mask(&mask_path)?;
            if (mask.height, mask.width) != (img.height, img.width) {
                return Err(ingest_error(
                    &img.file,
                    format!(
                        "mask `{rel}` is {}x{}, image is {}x{}",
                        mask.width, mask.height, img.width, img.height
                    ),
                ));
            }
            let Some(tight) = mask.tight_bbox() else {
                warn!("{}: object {i} has an empty mask; dropped", img.file);
                continue;
            };
            let given = BoxPrompt::from_array(obj.bbox);
            if given != tight {
                debug!("{}: object {i} box {:?} tightened to {:?}", img.file, obj.bbox, tight.to_array());
            }
            objects.push(ObjectAnnotation {
                bbox: tight,
                mask,
                category: obj.category.clone(),
            });
        }
        records.push(AnnotationRecord {
            image_path,
            image_size: (img.height, img.width),
            objects,
        });
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(records)
}

/// Loads box-only annotations; any mask references are ignored.
pub fn load_tracking(root: &Path) -> Result<Vec<TrackingRecord>> {
    let index = read_index(root)?;
    let mut records = Vec::with_capacity(index.images.len());
    for img in &index.images {
        let image_path = root.join(&img.file);
        if !image_path.is_file() {
            return Err(ingest_error(&img.file, "image file not found"));
        }
        let mut boxes = Vec::new();
        let mut categories = Vec::new();
        for obj in &img.objects {
            let b = BoxPrompt::from_array(obj.bbox);
            b.validate(img.width as f64, img.height as f64)
                .map_err(|e| ingest_error(&img.file, e.to_string()))?;
            boxes.push(b);
            categories.push(obj.category.clone());
        }
        records.push(TrackingRecord {
            image_path,
            image_size: (img.height, img.width),
            boxes,
            categories,
        });
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(records)
}

/// Writes images, masks and the index so that [`load_dataset`] can read
/// the directory back. Masks go to `masks/{stem}_{index}.png`.
pub fn write_dataset(root: &Path, items: &[LabeledImage]) -> Result<()> {
    let mask_dir = root.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut index = IndexFile::default();
    for item in items {
        let file = format!("{}.png", item.name);
        item.image.save(&root.join(&file))?;
        let mut objects = Vec::new();
        for (i, obj) in item.objects.iter().enumerate() {
            let rel = format!("masks/{}_{i}.png", item.name);
            save_mask(&root.join(&rel), &obj.mask)?;
            objects.push(IndexObject {
                bbox: obj.bbox.to_array(),
                mask: Some(rel),
                category: obj.category.clone(),
            });
        }
        index.images.push(IndexImage {
            file,
            height: item.image.height,
            width: item.image.width,
            objects,
        });
    }
    let path = root.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
