use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// How each layer's head-averaged attention is rescaled before the rollup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormalization {
    /// Every row divided by its own mean.
    #[default]
    RowMean,
    /// The whole matrix divided by its global mean.
    GlobalMean,
}

/// Which mean of the rolled-up matrix gives the patch importance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceReduction {
    /// Mean over rows, one value per column.
    #[default]
    ColumnMean,
    /// Mean over columns, one value per row.
    RowMean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub layer_normalization: LayerNormalization,
    pub importance: ImportanceReduction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub scales: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// Width of the first classifier layer; defaults to `embed_dim`.
    pub head_hidden: Option<usize>,
    pub ln_eps: f64,
    pub init_std: f64,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            scales: vec![1, 2],
            layers: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
            num_classes: 3,
            dropout_rate: 0.1,
            head_hidden: None,
            ln_eps: 1e-6,
            init_std: 0.02,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size settings: 224 px input, 12 layers, 12 heads, width 768.
    pub fn full_scale() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            scales: vec![1, 2, 4],
            layers: 12,
            heads: 12,
            embed_dim: 768,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad("scales must be a non-empty list of positive factors".into());
        }
        if self.layers < 2 {
            return bad("layers must be at least 2 (fused layers plus the last layer)".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            ));
        }
        if self.mlp_ratio == 0 || self.num_classes < 2 {
            return bad("mlp_ratio must be positive and num_classes at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.init_std > 0.0) {
            return bad("ln_eps and init_std must be positive".into());
        }
        for &s in &self.scales {
            let g = self.view_size(s) / self.patch_size;
            if g < 2 {
                return bad(format!(
                    "scale {s} gives a {g}x{g} patch grid; at least 2x2 is required"
                ));
            }
        }
        Ok(())
    }

    /// Side length of the view at downscale factor `s`, rounded up to a
    /// multiple of the patch size.
    pub fn view_size(&self, s: usize) -> usize {
        let raw = self.image_size as f64 / s as f64;
        let p = self.patch_size;
        ((raw / p as f64).ceil() as usize).max(1) * p
    }

    pub fn grid(&self, scale_index: usize) -> usize {
        self.view_size(self.scales[scale_index]) / self.patch_size
    }

    /// Patch count per scale.
    pub fn patches(&self, scale_index: usize) -> usize {
        self.grid(scale_index).pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.embed_dim)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn feature_dim(&self) -> usize {
        self.scales.len() * self.embed_dim
    }
}

/// One bilinear view per configured scale; scale 1 returns the input as is.
pub fn multiscale_views(cfg: &ModelConfig, img: &Image) -> Result<Vec<Image>> {
    if img.height() != cfg.image_size || img.width() != cfg.image_size || img.channels() != 3 {
        return Err(Error::Shape {
            op: "multiscale_views",
            lhs: vec![img.height(), img.width(), img.channels()],
            rhs: vec![cfg.image_size, cfg.image_size, 3],
        });
    }
    Ok(cfg
        .scales
        .iter()
        .map(|&s| {
            let n = cfg.view_size(s);
            img.resize(n, n)
        })
        .collect())
}

/// Non-overlapping `p x p` patches in raster order, each flattened as
/// `(row, col, channel)`.
pub fn patchify(img: &Image, p: usize) -> Vec<f64> {
    let (gh, gw, c) = (img.height() / p, img.width() / p, img.channels());
    let mut out = Vec::with_capacity(gh * gw * p * p * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out.push(img.get(gy * p + y, gx * p + x, ch));
                    }
                }
            }
        }
    }
    out
}
