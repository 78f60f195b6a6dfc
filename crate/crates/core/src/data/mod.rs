pub mod augment;
pub mod fer;
pub mod image;
pub mod mask;
pub mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use fer::{ClassCounts, Dataset, LabeledExample, Split, EMOTION_NAMES, NUM_CLASSES};
pub use image::{GrayImage, HEIGHT, PIXELS, WIDTH};
pub use mask::{apply_mask, generate_maskfer, Fill, MaskSpec, Region};
