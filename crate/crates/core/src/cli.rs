//! `rosam` command-line interface: train, infer, eval, convert.
//!
//! Settings come from one flat JSON file (`--config`); command-line flags
//! override file values, which override built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, load_tracking, write_dataset, LabeledImage, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::infer::{merge_restored, segment_objects, InferenceConfig, Restored};
use crate::mask::BoxPrompt;
use crate::metrics::{evaluate, BoundaryWidth};
use crate::model::{build_adapted_model, Head, ModelConfig, ModelState};
use crate::raster::{save_label_map, save_mask, RgbImage};
use crate::resample::Interpolation;
use crate::train::{
    history_csv, load_checkpoint, save_checkpoint, Alternation, Checkpoint, LossRecord, TrainConfig, Trainer,
};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Every tunable setting in one flat document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub canvas_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub lora_rank: usize,
    pub mask_stride: usize,
    // training
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alternation: Alternation,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub weight_decay: f64,
    pub lsj: bool,
    pub scale_range: (f64, f64),
    pub rotation: bool,
    // inference
    pub window_size: Option<usize>,
    pub sampling_rate: usize,
    pub interpolation: Interpolation,
    pub single_object: bool,
    pub logit_threshold: f32,
    pub head: Head,
    // evaluation
    pub boundary_width: BoundaryWidth,
    // shared
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let i = InferenceConfig::default();
        RunConfig {
            canvas_size: m.canvas_size,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            num_blocks: m.num_blocks,
            num_heads: m.num_heads,
            lora_rank: m.lora_rank,
            mask_stride: m.mask_stride,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            alternation: t.alternation,
            bce_weight: t.bce_weight,
            dice_weight: t.dice_weight,
            weight_decay: t.weight_decay,
            lsj: t.lsj,
            scale_range: t.scale_range,
            rotation: t.rotation,
            window_size: None,
            sampling_rate: i.sampling_rate,
            interpolation: i.interpolation,
            single_object: i.single_object,
            logit_threshold: i.logit_threshold,
            head: Head::Hq,
            boundary_width: BoundaryWidth::AUTO,
            seed: 0,
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            canvas_size: self.canvas_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            lora_rank: self.lora_rank,
            mask_stride: self.mask_stride,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            alternation: self.alternation,
            bce_weight: self.bce_weight,
            dice_weight: self.dice_weight,
            weight_decay: self.weight_decay,
            seed: self.seed,
            lsj: self.lsj,
            scale_range: self.scale_range,
            rotation: self.rotation,
        }
    }

    /// Inference settings for a model with `canvas` input; the window
    /// defaults to `canvas / sampling_rate`.
    pub fn inference(&self, canvas: usize) -> InferenceConfig {
        InferenceConfig {
            window_size: self.window_size.unwrap_or(canvas / self.sampling_rate.max(1)),
            sampling_rate: self.sampling_rate,
            interpolation: self.interpolation,
            single_object: self.single_object,
            logit_threshold: self.logit_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.model().validate_rank(self.lora_rank)?;
        self.train().validate()?;
        self.inference(self.canvas_size).validate(self.canvas_size)?;
        if self.jobs == Some(0) {
            return Err(Error::config("jobs", "must be positive"));
        }
        Ok(())
    }

    /// Writes the resolved configuration to `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "rosam", version, about = "Box-prompted segmentation of small objects in large frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// Flat JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fine-tune adapters, the last encoder block and both decoders.
    Train(TrainArgs),
    /// Segment boxed objects and write per-object masks.
    Infer(InferArgs),
    /// Score predicted masks against a dataset.
    Eval(EvalArgs),
    /// Turn a box-only tracking dataset into a mask dataset.
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Dataset root containing `annotations.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, loss history and the config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alternation: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InferFlags {
    #[arg(long)]
    pub head: Option<Head>,
    #[arg(long)]
    pub rate: Option<usize>,
    #[arg(long)]
    pub interp: Option<Interpolation>,
    /// One window centred on each object.
    #[arg(long, conflicts_with = "multi")]
    pub single: bool,
    /// Objects share tiles.
    #[arg(long)]
    pub multi: bool,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON list of `{"image": "f.png", "boxes": [[x0, y0, x1, y1], ...]}`.
    #[arg(long)]
    pub boxes: PathBuf,
    /// Directory the image names resolve against (default: the boxes file's).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: InferFlags,
    /// Also write image/mask composites.
    #[arg(long)]
    pub save_overlays: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Directory of `{stem}_{index}.png` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Boundary width in pixels (default: 2% of the image diagonal).
    #[arg(long)]
    pub d: Option<usize>,
    /// Report directory (default: the prediction directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Tracking dataset root (`annotations.json` with boxes only).
    #[arg(long)]
    pub tracking: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: InferFlags,
}

fn resolve(shared: &Shared) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if let Some(j) = shared.jobs {
        cfg.jobs = Some(j);
    }
    Ok(cfg)
}

fn apply_infer_flags(cfg: &mut RunConfig, f: &InferFlags) {
    if let Some(h) = f.head {
        cfg.head = h;
    }
    if let Some(r) = f.rate {
        cfg.sampling_rate = r;
        if f.window.is_none() {
            cfg.window_size = None;
        }
    }
    if let Some(i) = f.interp {
        cfg.interpolation = i;
    }
    if f.single {
        cfg.single_object = true;
    }
    if f.multi {
        cfg.single_object = false;
    }
    if let Some(w) = f.window {
        cfg.window_size = Some(w);
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.shared)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(a) = &args.alternation {
        cfg.alternation = serde_json::from_value(serde_json::Value::String(a.clone()))
            .map_err(|_| Error::config("alternation", "expected per_iteration or per_epoch"))?;
    }
    cfg.validate()?;
    let records = load_dataset(&args.data)?;
    if records.is_empty() {
        return Err(Error::input(format!("dataset {} has no images", args.data.display())));
    }
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        if ck.state.config.canvas_size != cfg.canvas_size {
            return Err(Error::config("canvas_size", "differs from the resumed checkpoint"));
        }
    }
    let data: Vec<LabeledImage> = records.iter().map(|r| r.load()).collect::<Result<_>>()?;

    create_dir(&args.out)?;
    cfg.echo(&args.out)?;
    let out = args.out.clone();
    with_pool(cfg.jobs, move || {
        let mut trainer = match resume {
            Some(ck) => Trainer::from_checkpoint(ck, Some(cfg.train()))?,
            None => Trainer::new(build_adapted_model(&cfg.model())?, cfg.train())?,
        };
        let mut history: Vec<LossRecord> = Vec::new();
        let loss_path = out.join("loss.csv");
        let result = trainer.run(&data, |t, recs| {
            history.extend_from_slice(recs);
            fs::write(&loss_path, history_csv(&history)).map_err(|e| Error::io(&loss_path, e))?;
            save_checkpoint(&t.checkpoint(), &out.join(format!("epoch_{:03}.ckpt", t.epoch)))
        });
        if let Err(e) = &result {
            log::error!("{e}");
        }
        result?;
        fs::write(&loss_path, history_csv(&history)).map_err(|e| Error::io(&loss_path, e))?;
        save_checkpoint(&trainer.checkpoint(), &out.join("final.ckpt"))?;
        log::info!("wrote {}", out.join("final.ckpt").display());
        Ok(())
    })
}

#[derive(Clone, Debug, Deserialize)]
struct BoxEntry {
    image: String,
    boxes: Vec<[f64; 4]>,
}

#[derive(Serialize)]
struct ObjectResult {
    index: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    window_origin: [usize; 2],
    window_size: usize,
    truncated: bool,
    max_logit: f32,
    area: usize,
    mask: String,
}

#[derive(Serialize)]
struct ImageResult {
    image: String,
    head: Head,
    labels: String,
    objects: Vec<ObjectResult>,
}

#[derive(Serialize)]
struct InferResults {
    head: Head,
    config: InferenceConfig,
    images: Vec<ImageResult>,
}

fn load_model(path: &Path) -> Result<ModelState> {
    Ok(load_checkpoint(path)?.state)
}

fn overlay(image: &RgbImage, objects: &[Restored]) -> RgbImage {
    const COLORS: [[u8; 3]; 6] = [
        [255, 64, 64],
        [64, 255, 64],
        [64, 128, 255],
        [255, 224, 64],
        [255, 64, 255],
        [64, 255, 255],
    ];
    let (w, h) = (image.width, image.height);
    let mut out = RgbImage::filled(2 * w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(x, y);
            out.put(x, y, p);
            let mut q = p;
            for (i, o) in objects.iter().enumerate() {
                if o.mask.is_set(x, y) {
                    let c = COLORS[i % COLORS.len()];
                    q = [0, 1, 2].map(|k| ((p[k] as u16 + c[k] as u16) / 2) as u8);
                }
            }
            out.put(w + x, y, q);
        }
    }
    out
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let mut cfg = resolve(&args.shared)?;
    apply_infer_flags(&mut cfg, &args.flags);
    let state = load_model(&args.ckpt)?;
    let canvas = state.config.canvas_size;
    let icfg = cfg.inference(canvas);
    icfg.validate(canvas)?;

    let text = fs::read_to_string(&args.boxes).map_err(|e| Error::io(&args.boxes, e))?;
    let entries: Vec<BoxEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: args.boxes.clone(),
        source,
    })?;
    let base = match &args.images {
        Some(d) => d.clone(),
        None => args.boxes.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut jobs = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = base.join(&e.image);
        let image = RgbImage::load(&path)?;
        let boxes: Vec<BoxPrompt> = e.boxes.iter().map(|&b| BoxPrompt::from_array(b)).collect();
        for b in &boxes {
            b.validate(image.width as f64, image.height as f64)
                .map_err(|err| Error::input(format!("{}: {err}", path.display())))?;
        }
        jobs.push((crate::data::image_stem(&path), image, boxes));
    }

    create_dir(&args.out)?;
    cfg.echo(&args.out)?;
    let head = cfg.head;
    let mut images = Vec::new();
    with_pool(cfg.jobs, || {
        for (stem, image, boxes) in &jobs {
            let restored = segment_objects(&state, image, boxes, &icfg, head)?;
            let mut objects = Vec::new();
            for (i, r) in restored.iter().enumerate() {
                let name = format!("{stem}_{i}.png");
                save_mask(&args.out.join(&name), &r.mask)?;
                objects.push(ObjectResult {
                    index: i,
                    bbox: boxes[i].to_array(),
                    window_origin: [r.window.origin_x, r.window.origin_y],
                    window_size: r.window.size,
                    truncated: r.window.truncated,
                    max_logit: r.max_logit(),
                    area: r.mask.area(),
                    mask: name,
                });
            }
            let labels = format!("{stem}_labels.png");
            let map = if restored.is_empty() {
                vec![0; image.width * image.height]
            } else {
                merge_restored(&restored)?
            };
            save_label_map(&args.out.join(&labels), &map, image.width, image.height)?;
            if args.save_overlays {
                overlay(image, &restored).save(&args.out.join(format!("{stem}_overlay.png")))?;
            }
            images.push(ImageResult {
                image: stem.clone(),
                head,
                labels,
                objects,
            });
        }
        Ok(())
    })?;
    let results = InferResults {
        head,
        config: icfg,
        images,
    };
    let path = args.out.join("results.json");
    fs::write(&path, serde_json::to_string_pretty(&results).expect("results serialise")).map_err(|e| Error::io(&path, e))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.shared)?;
    if let Some(d) = args.d {
        cfg.boundary_width = BoundaryWidth::Fixed(d);
    }
    if !args.pred.is_dir() {
        return Err(Error::input(format!("prediction directory {} not found", args.pred.display())));
    }
    let records = load_dataset(&args.data)?;
    let any = records.iter().any(|r| {
        let stem = r.stem();
        (0..r.objects.len()).any(|i| args.pred.join(format!("{stem}_{i}.png")).is_file())
    });
    if !any {
        return Err(Error::input("no predictions match the dataset's image/object ids"));
    }
    let report = with_pool(cfg.jobs, || evaluate(&args.pred, &records, cfg.boundary_width))?;
    let out = args.out.clone().unwrap_or_else(|| args.pred.clone());
    create_dir(&out)?;
    report.write(&out)?;
    let s = &report.summary;
    println!("mean IoU  {:.3}", s.mean_iou);
    println!("mean BIoU {:.3}", s.mean_biou);
    println!("objects   {} ({} missing)", s.n_objects, s.n_missing);
    Ok(())
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let mut cfg = resolve(&args.shared)?;
    apply_infer_flags(&mut cfg, &args.flags);
    let state = load_model(&args.ckpt)?;
    let canvas = state.config.canvas_size;
    let icfg = cfg.inference(canvas);
    icfg.validate(canvas)?;
    let records = load_tracking(&args.tracking)?;
    let images: Vec<RgbImage> = records.iter().map(|r| RgbImage::load(&r.image_path)).collect::<Result<_>>()?;

    let head = cfg.head;
    let items = with_pool(cfg.jobs, || {
        records
            .iter()
            .zip(images)
            .map(|(rec, image)| {
                let restored = segment_objects(&state, &image, &rec.boxes, &icfg, head)?;
                let objects = restored
                    .into_iter()
                    .zip(&rec.boxes)
                    .zip(&rec.categories)
                    .map(|((r, b), c)| ObjectAnnotation {
                        bbox: r.mask.tight_bbox().unwrap_or(*b),
                        mask: r.mask,
                        category: c.clone(),
                    })
                    .collect();
                Ok(LabeledImage {
                    name: rec.stem(),
                    image,
                    objects,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    create_dir(&args.out)?;
    write_dataset(&args.out, &items)?;
    cfg.echo(&args.out)
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        Error::State(_) => 1,
        _ => EXIT_INVALID,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Convert(a) => cmd_convert(a),
    }
}

/// Saves the freshly initialised model, e.g. for pipeline smoke tests.
pub fn write_initial_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    cfg.validate()?;
    save_checkpoint(&Checkpoint::from_state(build_adapted_model(&cfg.model())?), path)
}
