//! The multi-scale multi-modal transformer.
//!
//! Each modality image is viewed at several scales; every view is patch
//! embedded and run through that modality's encoder. The attention of all
//! but the last layer is rolled up into a per-patch importance that scales
//! the patch tokens entering the last layer. The per-scale cls outputs of
//! both modalities feed a two-layer classifier.

mod config;
mod fusion;
mod net;
mod params;

pub use config::{
    multiscale_views, patchify, FusionConfig, ImportanceReduction, LayerNormalization, ModelConfig,
};
pub use fusion::{
    attention_rollup, layer_attention_normalize, patch_importance, tape_importance, tape_layer_normalize,
    tape_rollup, tape_weighted_tokens, weighted_tokens, AttentionStack, ROW_SUM_TOLERANCE,
};
pub use net::{
    batch_tensors, param_layout, Bound, ForwardOut, Modality, ModalityTrace, Mode, Msmmt, PatchInput,
    ScaleInspection, ScaleTrace,
};
pub use params::{load_checkpoint, save_checkpoint, trunc_normal, ParamStore, CHECKPOINT_MANIFEST};
