//! Dynamic images by rank pooling.
//!
//! The descriptor `d*` minimizes
//! `E(d) = λ/2 ‖d‖² + 2/(T(T−1)) Σ_{l>t} max(0, 1 − ψ(l|d) + ψ(t|d))`
//! where `ψ(t|d) = ⟨d, φ_t⟩` and `φ_t` is the running mean of the first `t`
//! frame feature vectors.

use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynImgConfig {
    pub lambda: f64,
    pub iters: usize,
    pub step: f64,
    /// Apply a per-pixel square root before pooling.
    pub sqrt_features: bool,
}

impl Default for DynImgConfig {
    fn default() -> Self {
        DynImgConfig {
            lambda: 1.0,
            iters: 500,
            step: 1e-3,
            sqrt_features: false,
        }
    }
}

impl DynImgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("dynimg lambda must be positive, got {}", self.lambda)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("dynimg step must be positive, got {}", self.step)));
        }
        if self.iters == 0 {
            return Err(Error::Config("dynimg iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-frame feature vectors and the regularizer weight.
#[derive(Clone, Debug)]
pub struct RankPoolProblem {
    features: Vec<Vec<f64>>,
    lambda: f64,
}

impl RankPoolProblem {
    pub fn new(features: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Invalid(format!(
                "rank pooling needs at least 2 frames, got {}",
                features.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Invalid("frame feature vectors differ in length".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "rank_pool" });
        }
        if !(lambda > 0.0) {
            return Err(Error::Invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(RankPoolProblem { features, lambda })
    }

    pub fn frames(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// `φ_1 .. φ_T`.
    pub fn running_means(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        self.features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
                acc.iter().map(|a| a / (i + 1) as f64).collect()
            })
            .collect()
    }

    pub fn objective(&self, d: &[f64]) -> Result<f64> {
        let phis = self.running_means();
        check_dim(d, phis[0].len())?;
        Ok(objective_with(&phis, self.lambda, d))
    }
}

fn check_dim(d: &[f64], n: usize) -> Result<()> {
    if d.len() != n {
        return Err(Error::Invalid(format!(
            "descriptor length {} does not match feature length {n}",
            d.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pair_weight(t: usize) -> f64 {
    2.0 / (t * (t - 1)) as f64
}

fn objective_with(phis: &[Vec<f64>], lambda: f64, d: &[f64]) -> f64 {
    let scores: Vec<f64> = phis.iter().map(|p| dot(d, p)).collect();
    let mut hinge = 0.0;
    for t in 0..scores.len() {
        for l in t + 1..scores.len() {
            hinge += (1.0 - scores[l] + scores[t]).max(0.0);
        }
    }
    0.5 * lambda * dot(d, d) + pair_weight(scores.len()) * hinge
}

/// Running mean of the first `t` feature vectors, `1 <= t <= T`.
pub fn temporal_mean(features: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > features.len() {
        return Err(Error::Invalid(format!(
            "t = {t} outside 1..={}",
            features.len()
        )));
    }
    let dim = features[0].len();
    let mut out = vec![0.0; dim];
    for f in &features[..t] {
        if f.len() != dim {
            return Err(Error::Invalid("frame feature vectors differ in length".into()));
        }
        out.iter_mut().zip(f).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

pub fn rank_score(d: &[f64], phi: &[f64]) -> Result<f64> {
    check_dim(d, phi.len())?;
    Ok(dot(d, phi))
}

/// Full-batch subgradient descent from `d = 0`; returns the iterate with the
/// lowest objective seen.
pub fn rank_pool(problem: &RankPoolProblem, iters: usize, step: f64) -> Vec<f64> {
    let phis = problem.running_means();
    let n = problem.dim();
    let t = phis.len();
    let c = pair_weight(t);
    let lambda = problem.lambda;

    let mut d = vec![0.0; n];
    let mut best = d.clone();
    let mut best_e = objective_with(&phis, lambda, &d);
    let mut coef = vec![0.0; t];
    let mut grad = vec![0.0; n];
    for _ in 0..iters {
        let scores: Vec<f64> = phis.iter().map(|p| dot(&d, p)).collect();
        coef.iter_mut().for_each(|w| *w = 0.0);
        for a in 0..t {
            for b in a + 1..t {
                if 1.0 - scores[b] + scores[a] > 0.0 {
                    coef[a] += c;
                    coef[b] -= c;
                }
            }
        }
        grad.iter_mut().zip(&d).for_each(|(g, x)| *g = lambda * x);
        for (w, p) in coef.iter().zip(&phis) {
            if *w != 0.0 {
                grad.iter_mut().zip(p).for_each(|(g, v)| *g += w * v);
            }
        }
        d.iter_mut().zip(&grad).for_each(|(x, g)| *x -= step * g);
        let e = objective_with(&phis, lambda, &d);
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&d);
        }
    }
    best
}

/// A rendered dynamic image together with the raw descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicImage {
    pub image: Image,
    pub descriptor: Vec<f64>,
}

pub fn render_dynamic_image(d: &[f64], h: usize, w: usize, c: usize) -> Result<DynamicImage> {
    if d.len() != h * w * c {
        return Err(Error::Invalid(format!(
            "descriptor length {} does not match {h}x{w}x{c}",
            d.len()
        )));
    }
    // Joint min-max over all channels.
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = d
        .iter()
        .map(|v| {
            if range <= crate::imaging::DEGENERATE_RANGE {
                0.5
            } else {
                (v - lo) / range
            }
        })
        .collect();
    Ok(DynamicImage {
        image: Image::new(h, w, c, data)?,
        descriptor: d.to_vec(),
    })
}

/// Rank-pools the frames `onset..=offset` of a clip.
pub fn dynamic_image(clip: &VideoClip, cfg: &DynImgConfig) -> Result<DynamicImage> {
    cfg.validate()?;
    let frames = &clip.frames[clip.onset..=clip.offset];
    let features = frames
        .iter()
        .map(|f| {
            if cfg.sqrt_features {
                f.data().iter().map(|v| v.sqrt()).collect()
            } else {
                f.data().to_vec()
            }
        })
        .collect();
    let problem = RankPoolProblem::new(features, cfg.lambda)?;
    let d = rank_pool(&problem, cfg.iters, cfg.step);
    let (h, w, c) = clip.dims();
    render_dynamic_image(&d, h, w, c)
}
