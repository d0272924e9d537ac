//! Promptable segmentation of small objects in large remote-sensing frames.
//!
//! The crate bundles a compact ViT encoder with low-rank adapters on its
//! query/value projections, an original mask decoder plus a high-quality
//! branch fed by early encoder features, alternating-update training with
//! BCE + Dice supervision, scale/rotation augmentation, prompt-centred
//! crop-and-upsample inference, and IoU / Boundary IoU evaluation.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod lora;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod resample;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{binarize, upsample_logits, BoxPrompt, MaskGrid, MaskKind};
pub use model::{build_adapted_model, build_model, Head, ModelConfig, ModelState};
