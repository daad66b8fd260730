//! Synthetic multi-camera identity data, augmentation and retrieval metrics.

mod augment;
mod eval;
mod synth;

pub use augment::{
    flip_horizontal, random_crop, random_flip, AugmentConfig, Augmenter, PatchPool, RandomErasing, RandomPatch, Rect,
};
pub use eval::{
    cosine_distance_matrix, evaluate_cmc_map, evaluate_model, relative_change, style_gap, Meta, RankingResult,
};
pub use synth::{generate_dataset, stack_images, Dataset, PersonImage, Split, StyleProfile, SynthConfig};
