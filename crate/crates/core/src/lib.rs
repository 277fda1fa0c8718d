//! Micro-expression recognition from dynamic images and optical-flow
//! features with a multi-scale multi-modal transformer.

pub mod clip;
pub mod config;
pub mod diffmath;
pub mod dynimg;
pub mod error;
pub mod evalharness;
pub mod flow;
pub mod imaging;
pub mod losses;
pub mod manifest;
pub mod msmmt;
pub mod pipeline;
pub mod prep;

pub use clip::{ClipMeta, VideoClip};
pub use config::RunConfig;
pub use diffmath::{Tape, Tensor};
pub use error::{Error, Result};
pub use evalharness::{LosoReport, MetricsReport, SampleFeatures, SyntheticSpec};
pub use imaging::Image;
pub use manifest::{Label, Manifest, ManifestEntry};
pub use msmmt::{ModelConfig, Msmmt};
