//! Face alignment, Eulerian motion magnification and clip augmentation.

mod align;
mod augment;
mod evm;
mod landmarks;

pub use align::{align_and_crop, Aligned, CropGeometry, Similarity};
pub use augment::{apply_augment, augment, sample_augment, AugmentConfig, AugmentParams};
pub use evm::{evm_magnify, EvmConfig};
pub use landmarks::{parse_landmarks_csv, read_landmarks_csv, LandmarkSet, INNER_EYE_LEFT, INNER_EYE_RIGHT, LANDMARK_COUNT};
