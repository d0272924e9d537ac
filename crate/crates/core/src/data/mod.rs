//! Dataset ingestion and training-time augmentation.

pub mod augment;
pub mod dataset;

pub use augment::{
    boxes_match_masks, fit_to_canvas, jitter_with_scale, large_scale_jitter, random_rotate, rotate, AugmentLog,
    TrainingSample, LSJ_SCALE_RANGE,
};
pub use dataset::{
    image_stem, load_dataset, load_tracking, write_dataset, AnnotationRecord, LabeledImage, ObjectAnnotation,
    TrackingRecord,
};
