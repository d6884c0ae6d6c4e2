//! Dataset manifests, augmentation and the synthetic dataset generator.

pub mod augment;
pub mod manifest;
pub mod synthetic;

pub use augment::{
    channel_stats, original_view, test_transform, test_transform_image, two_view_augment,
    two_view_from_image, AugPolicy, ViewPair,
};
pub use manifest::{ImageRecord, Manifest, Split};
pub use synthetic::{generate_synthetic, render_sample, SyntheticSpec};
