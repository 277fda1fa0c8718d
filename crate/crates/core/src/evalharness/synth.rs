//! Synthetic micro-motion clips.
//!
//! Every subject owns a smoothed-noise texture. A clip moves the central
//! region of that texture along its class direction: the displacement ramps
//! from zero at onset to the full magnitude at the apex and then holds,
//! fading out towards the frame border through a soft disk mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::{ClipMeta, VideoClip};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub clips_per_class: usize,
    pub classes: usize,
    pub image_size: usize,
    pub frames: usize,
    pub fps: f64,
    /// Per-class direction in degrees; `k * 180 / classes` when absent.
    pub directions: Option<Vec<f64>>,
    /// Peak displacement in pixels.
    pub magnitude: f64,
    pub noise_std: f64,
    pub texture_sigma: f64,
    /// Radius of the moving region as a fraction of the image size.
    pub region_radius: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 8,
            clips_per_class: 6,
            classes: 3,
            image_size: 64,
            frames: 12,
            fps: 30.0,
            directions: None,
            magnitude: 2.0,
            noise_std: 0.01,
            texture_sigma: 2.0,
            region_radius: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.subjects == 0 || self.clips_per_class == 0 {
            return bad("subjects and clips_per_class must be positive");
        }
        if self.frames < 2 || self.image_size < 8 {
            return bad("need at least 2 frames of at least 8 px");
        }
        if !(self.magnitude > 0.0) {
            return bad("magnitude must be positive");
        }
        if !(self.fps > 0.0 && self.noise_std >= 0.0 && self.texture_sigma >= 0.0) {
            return bad("fps must be positive and noise parameters non-negative");
        }
        if !(self.region_radius > 0.0) {
            return bad("region_radius must be positive");
        }
        if let Some(d) = &self.directions {
            if d.len() != self.classes {
                return bad("one direction per class is required");
            }
        }
        Ok(())
    }

    pub fn direction(&self, class: usize) -> f64 {
        match &self.directions {
            Some(d) => d[class],
            None => class as f64 * 180.0 / self.classes as f64,
        }
    }

    pub fn apex(&self) -> usize {
        self.frames / 2
    }

    pub fn total(&self) -> usize {
        self.subjects * self.classes * self.clips_per_class
    }
}

/// A generated clip with its identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub clip: VideoClip,
}

pub fn subject_id(s: usize) -> String {
    format!("s{:02}", s + 1)
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Smoothed noise rescaled to `[0.15, 0.85]` per channel.
pub fn subject_texture(spec: &SyntheticSpec, subject: usize) -> Image {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, subject as u64 + 1, 0));
    let data = (0..n * n * 3).map(|_| rng.random::<f64>()).collect();
    let tex = Image::new(n, n, 3, data)
        .expect("texture dims")
        .gaussian_blur(spec.texture_sigma)
        .minmax_normalized();
    let mut tex = tex;
    tex.data_mut().iter_mut().for_each(|v| *v = 0.15 + 0.7 * *v);
    tex
}

fn region_mask(spec: &SyntheticSpec, x: f64, y: f64) -> f64 {
    let c = spec.image_size as f64 / 2.0;
    let r = ((x - c).powi(2) + (y - c).powi(2)).sqrt();
    let r0 = spec.region_radius * spec.image_size as f64;
    1.0 / (1.0 + ((r - r0) / 2.0).exp())
}

fn render_clip(spec: &SyntheticSpec, tex: &Image, class: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    let n = spec.image_size;
    let theta = spec.direction(class).to_radians();
    let mag = spec.magnitude * rng.random_range(0.9..1.1);
    let (dx, dy) = (mag * theta.cos(), mag * theta.sin());
    let apex = spec.apex().max(1);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");
    (0..spec.frames)
        .map(|t| {
            let ramp = (t as f64 / apex as f64).min(1.0);
            let mut f = tex.warp(n, n, |x, y| {
                let m = region_mask(spec, x, y) * ramp;
                (x - m * dx, y - m * dy)
            });
            if spec.noise_std > 0.0 {
                f.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            f.clamp01()
        })
        .collect()
}

/// All clips of the spec, ordered by subject, class and repetition.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total());
    for s in 0..spec.subjects {
        let tex = subject_texture(spec, s);
        for class in 0..spec.classes {
            for k in 0..spec.clips_per_class {
                let idx = (class * spec.clips_per_class + k) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, s as u64 + 1, idx + 1));
                let frames = render_clip(spec, &tex, class, &mut rng);
                let clip = VideoClip::new(
                    frames,
                    ClipMeta {
                        subject_id: subject_id(s),
                        label: class,
                        fps: spec.fps,
                        onset: 0,
                        apex: spec.apex(),
                        offset: spec.frames - 1,
                    },
                )?;
                out.push(SyntheticClip {
                    id: format!("{}_c{class}_{k:02}", subject_id(s)),
                    clip,
                });
            }
        }
    }
    Ok(out)
}
