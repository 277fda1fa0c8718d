use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Augmented copies generated per training clip.
    pub copies: usize,
    pub max_rotation_deg: f64,
    pub flip_probability: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            copies: 1,
            max_rotation_deg: 10.0,
            flip_probability: 0.5,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 10.0) {
            return Err(Error::Config(format!(
                "augment rotation bound must lie in [0, 10] degrees, got {}",
                self.max_rotation_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid scale range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub flip: bool,
    pub scale: f64,
}

pub fn sample_augment(cfg: &AugmentConfig, seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.max_rotation_deg;
    let rotation_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let flip = rng.random_bool(cfg.flip_probability);
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    AugmentParams {
        rotation_deg,
        flip,
        scale,
    }
}

/// Applies the same flip, rotation and scale (about the frame centre) to
/// every frame.
pub fn apply_augment(clip: &VideoClip, p: &AugmentParams) -> VideoClip {
    let (h, w, _) = clip.dims();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let inv_s = 1.0 / p.scale;
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let src = if p.flip { f.flip_horizontal() } else { f.clone() };
            if p.rotation_deg == 0.0 && p.scale == 1.0 {
                return src;
            }
            src.warp(h, w, |x, y| {
                let (dx, dy) = ((x - cx) * inv_s, (y - cy) * inv_s);
                (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
            })
            .clamp01()
        })
        .collect();
    clip.with_frames(frames)
}

pub fn augment(clip: &VideoClip, cfg: &AugmentConfig, seed: u64) -> VideoClip {
    apply_augment(clip, &sample_augment(cfg, seed))
}
