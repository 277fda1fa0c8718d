//! Metrics, leave-one-subject-out evaluation, composite relabeling and the
//! synthetic micro-motion dataset.

mod cde;
mod loso;
mod metrics;
mod synth;
mod train;

pub use cde::{cde_relabel, CdeMap, CDE_CLASSES};
pub use loso::{loso_split, Fold, LosoPlan};
pub use metrics::{compute_metrics, MetricsReport};
pub use synth::{gen_synthetic, subject_id, subject_texture, SyntheticClip, SyntheticSpec};
pub use train::{
    alpha_sweep, default_alpha_grid, predict, run_loso, train_model, EpochLog, FoldReport, LosoReport,
    Prediction, SampleFeatures, Settings, SweepRow, TrainConfig, TrainStats,
};
