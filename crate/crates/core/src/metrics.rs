//! IoU, Boundary IoU and the evaluation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::raster::load_mask;

/// Fraction of the image diagonal used as the default boundary width.
pub const BOUNDARY_DILATION_RATIO: f64 = 0.02;

fn check_shapes(a: &MaskGrid, b: &MaskGrid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::input(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn counts(a: &MaskGrid, b: &MaskGrid) -> (usize, usize) {
    a.values.iter().zip(&b.values).fold((0, 0), |(i, u), (&x, &y)| {
        let (x, y) = (x > 0.5, y > 0.5);
        (i + (x && y) as usize, u + (x || y) as usize)
    })
}

/// `|P ∩ G| / |P ∪ G|`; two empty masks score 1.
pub fn iou(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, u) = counts(pred, gt);
    Ok(ratio(i, u))
}

/// One-dimensional squared Euclidean distance transform (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from each pixel to the nearest background pixel, where
/// everything outside the grid counts as background.
fn squared_distance_to_background(mask: &MaskGrid) -> Vec<f64> {
    const FAR: f64 = 1e18;
    let (w, h) = (mask.width + 2, mask.height + 2);
    let mut grid = vec![0.0; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.is_set(x, y) {
                grid[(y + 1) * w + x + 1] = FAR;
            }
        }
    }
    let n = w.max(h);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    let mut dist = Vec::with_capacity(mask.width * mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            dist.push(grid[(y + 1) * w + x + 1]);
        }
    }
    dist
}

/// Mask pixels within Euclidean distance `d` of the contour: the mask minus
/// its erosion by a disk of radius `d`. The image border counts as contour.
pub fn boundary_region(mask: &MaskGrid, d: usize) -> MaskGrid {
    let d = d.max(1);
    let dist = squared_distance_to_background(mask);
    let limit = (d * d) as f64;
    MaskGrid::from_bools(
        mask.height,
        mask.width,
        mask.values
            .iter()
            .zip(&dist)
            .map(|(&m, &s)| m > 0.5 && s <= limit),
    )
}

/// IoU restricted to each mask's boundary band of width `d`.
pub fn biou(pred: &MaskGrid, gt: &MaskGrid, d: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    let pb = boundary_region(pred, d);
    let gb = boundary_region(gt, d);
    let (i, u) = counts(&pb, &gb);
    Ok(ratio(i, u))
}

/// `max(1, round(0.02 · diagonal))`.
pub fn default_boundary_width(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((BOUNDARY_DILATION_RATIO * diag).round() as usize).max(1)
}

/// Boundary band width used by an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundaryWidth {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl BoundaryWidth {
    pub const AUTO: BoundaryWidth = BoundaryWidth::Auto(AutoTag::Auto);

    pub fn resolve(self, height: usize, width: usize) -> usize {
        match self {
            BoundaryWidth::Fixed(d) => d.max(1),
            BoundaryWidth::Auto(_) => default_boundary_width(height, width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub index: usize,
    pub category: String,
    pub iou: f64,
    pub biou: f64,
    pub d: usize,
    /// No prediction file existed; the row scores zero.
    pub missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub mean_iou: f64,
    pub mean_biou: f64,
    pub n_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Unweighted mean over objects.
    pub mean_iou: f64,
    pub mean_biou: f64,
    pub per_category: BTreeMap<String, CategorySummary>,
    pub d: BoundaryWidth,
    pub n_objects: usize,
    pub n_missing: usize,
    pub aggregation: String,
    /// Mean over images of each image's mean object IoU.
    pub image_mean_iou: f64,
    /// Pixel IoU pooled over every object.
    pub pooled_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One evaluated object: prediction (if any) against ground truth.
pub struct EvalItem<'a> {
    pub image: String,
    pub index: usize,
    pub category: String,
    pub pred: Option<MaskGrid>,
    pub gt: &'a MaskGrid,
}

/// Scores every item and aggregates; missing predictions score zero.
pub fn evaluate_items(items: Vec<EvalItem<'_>>, width: BoundaryWidth) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(items.len());
    let (mut pooled_i, mut pooled_u) = (0usize, 0usize);
    for item in items {
        let d = width.resolve(item.gt.height, item.gt.width);
        let (iou_v, biou_v, missing) = match &item.pred {
            Some(p) => {
                check_shapes(p, item.gt)?;
                let (i, u) = counts(p, item.gt);
                pooled_i += i;
                pooled_u += u;
                (ratio(i, u), biou(p, item.gt, d)?, false)
            }
            None => {
                pooled_u += item.gt.area();
                (0.0, 0.0, true)
            }
        };
        rows.push(EvalRow {
            image: item.image,
            index: item.index,
            category: item.category,
            iou: iou_v,
            biou: biou_v,
            d,
            missing,
        });
    }
    let mut per_category = BTreeMap::new();
    let mut categories: Vec<&str> = rows.iter().map(|r| r.category.as_str()).collect();
    categories.sort();
    categories.dedup();
    for cat in categories {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.category == cat).collect();
        per_category.insert(
            cat.to_string(),
            CategorySummary {
                mean_iou: mean(sel.iter().map(|r| r.iou)),
                mean_biou: mean(sel.iter().map(|r| r.biou)),
                n_objects: sel.len(),
            },
        );
    }
    let mut by_image: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_image.entry(r.image.as_str()).or_default().push(r.iou);
    }
    let summary = EvalSummary {
        mean_iou: mean(rows.iter().map(|r| r.iou)),
        mean_biou: mean(rows.iter().map(|r| r.biou)),
        per_category,
        d: width,
        n_objects: rows.len(),
        n_missing: rows.iter().filter(|r| r.missing).count(),
        aggregation: "mean over objects".into(),
        image_mean_iou: mean(by_image.values().map(|v| mean(v.iter().copied()))),
        pooled_iou: if pooled_u == 0 { 0.0 } else { pooled_i as f64 / pooled_u as f64 },
    };
    Ok(EvalReport { rows, summary })
}

/// Evaluates `{image_stem}_{index}.png` predictions in `pred_dir` against
/// the ground-truth records.
pub fn evaluate(pred_dir: &Path, records: &[AnnotationRecord], width: BoundaryWidth) -> Result<EvalReport> {
    let mut items = Vec::new();
    for rec in records {
        let stem = rec.stem();
        for (index, obj) in rec.objects.iter().enumerate() {
            let path = pred_dir.join(format!("{stem}_{index}.png"));
            let pred = if path.is_file() { Some(load_mask(&path)?) } else { None };
            items.push(EvalItem {
                image: stem.clone(),
                index,
                category: obj.category.clone(),
                pred,
                gt: &obj.mask,
            });
        }
    }
    evaluate_items(items, width)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# aggregate: {}; d: {}\nimage,index,category,iou,biou,d,missing\n",
            self.summary.aggregation,
            serde_json::to_string(&self.summary.d).unwrap_or_default()
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                r.image, r.index, r.category, r.iou, r.biou, r.d, r.missing
            ));
        }
        out
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(&self.summary).expect("summary serialises");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}
