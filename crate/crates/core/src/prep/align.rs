//! Eye-corner alignment and landmark-box cropping.
//!
//! One similarity transform is estimated on the first frame and reused for
//! the whole clip; the crop box is the first frame's transformed landmark
//! bounding box padded by [`CROP_PAD`] on every side.

use super::landmarks::{LandmarkSet, INNER_EYE_LEFT, INNER_EYE_RIGHT};
use crate::clip::VideoClip;
use crate::error::{Error, Result};

/// Canonical inner eye corners as fractions of the output size.
pub const CANONICAL_LEFT: (f64, f64) = (0.35, 0.38);
pub const CANONICAL_RIGHT: (f64, f64) = (0.65, 0.38);
pub const CROP_PAD: f64 = 0.05;
pub const MIN_EYE_DISTANCE: f64 = 2.0;

/// `z -> m z + t` in complex form: rotation, uniform scale, translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// The unique similarity taking `p1 -> q1` and `p2 -> q2`.
    pub fn from_pairs(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> Result<Self> {
        let (dpx, dpy) = (p2.0 - p1.0, p2.1 - p1.1);
        let norm = dpx * dpx + dpy * dpy;
        if norm.sqrt() < MIN_EYE_DISTANCE {
            return Err(Error::Invalid(format!(
                "degenerate eye distance ({:.3} px)",
                norm.sqrt()
            )));
        }
        let (dqx, dqy) = (q2.0 - q1.0, q2.1 - q1.1);
        // m = dq / dp
        let a = (dqx * dpx + dqy * dpy) / norm;
        let b = (dqy * dpx - dqx * dpy) / norm;
        let tx = q1.0 - (a * p1.0 - b * p1.1);
        let ty = q1.1 - (b * p1.0 + a * p1.1);
        Ok(Similarity { a, b, tx, ty })
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Similarity {
        let n = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / n, -self.b / n);
        Similarity {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    pub fn rotation_deg(&self) -> f64 {
        self.b.atan2(self.a).to_degrees()
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }
}

/// Crop rectangle in aligned coordinates, resampled to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl CropGeometry {
    fn to_output(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            (x - self.x0) * self.out_w as f64 / (self.x1 - self.x0),
            (y - self.y0) * self.out_h as f64 / (self.y1 - self.y0),
        )
    }

    fn from_output(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.x0 + x * (self.x1 - self.x0) / self.out_w as f64,
            self.y0 + y * (self.y1 - self.y0) / self.out_h as f64,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Aligned {
    pub clip: VideoClip,
    /// Input landmarks mapped into output pixel coordinates.
    pub landmarks: Vec<LandmarkSet>,
    pub transform: Similarity,
    pub crop: CropGeometry,
}

// Landmark files use pixel-index coordinates; the samplers use pixel centres
// at +0.5.
fn to_continuous((x, y): (f64, f64)) -> (f64, f64) {
    (x + 0.5, y + 0.5)
}

fn to_index((x, y): (f64, f64)) -> (f64, f64) {
    (x - 0.5, y - 0.5)
}

pub fn align_and_crop(clip: &VideoClip, landmarks: &[LandmarkSet], out_size: (usize, usize)) -> Result<Aligned> {
    let first = landmarks
        .first()
        .ok_or_else(|| Error::Invalid("missing landmarks for frame 0".into()))?;
    if landmarks.len() < clip.len() {
        return Err(Error::Invalid(format!(
            "missing landmarks: {} rows for {} frames",
            landmarks.len(),
            clip.len()
        )));
    }
    let (h, w, _) = clip.dims();
    first.check_bounds(w, h)?;
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("output size must be positive".into()));
    }

    let q1 = (CANONICAL_LEFT.0 * out_w as f64, CANONICAL_LEFT.1 * out_h as f64);
    let q2 = (CANONICAL_RIGHT.0 * out_w as f64, CANONICAL_RIGHT.1 * out_h as f64);
    let sim = Similarity::from_pairs(
        to_continuous(first.point(INNER_EYE_LEFT)),
        to_continuous(first.point(INNER_EYE_RIGHT)),
        q1,
        q2,
    )?;

    let moved: Vec<(f64, f64)> = first.points().iter().map(|&p| sim.apply(to_continuous(p))).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &moved {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (pw, ph) = (CROP_PAD * (x1 - x0), CROP_PAD * (y1 - y0));
    if x1 - x0 < MIN_EYE_DISTANCE || y1 - y0 < MIN_EYE_DISTANCE {
        return Err(Error::Invalid("degenerate landmark bounding box".into()));
    }
    let crop = CropGeometry {
        x0: x0 - pw,
        y0: y0 - ph,
        x1: x1 + pw,
        y1: y1 + ph,
        out_h,
        out_w,
    };

    let inv = sim.inverse();
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            f.warp(out_h, out_w, |x, y| inv.apply(crop.from_output((x, y))))
                .clamp01()
        })
        .collect();
    let landmarks = landmarks
        .iter()
        .map(|set| set.map(|x, y| to_index(crop.to_output(sim.apply(to_continuous((x, y)))))))
        .collect();
    Ok(Aligned {
        clip: clip.with_frames(frames),
        landmarks,
        transform: sim,
        crop,
    })
}
