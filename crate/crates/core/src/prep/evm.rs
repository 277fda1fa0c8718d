//! Linear Eulerian video magnification.
//!
//! Each frame is split into a Laplacian pyramid; every coefficient is
//! band-passed over time with an ideal FFT filter, scaled by `alpha` and
//! added back before the pyramid is collapsed.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const MIN_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvmConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Pass band in Hz.
    pub band: (f64, f64),
    pub levels: usize,
}

impl Default for EvmConfig {
    fn default() -> Self {
        EvmConfig {
            enabled: true,
            alpha: 10.0,
            band: (0.4, 8.0),
            levels: 4,
        }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn pyr_down(img: &Image) -> Image {
    let blurred = img.convolve_separable(&BINOMIAL5);
    let (h, w, c) = img.dims();
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    Image::from_fn(h2, w2, c, |y, x, ch| blurred.get(2 * y, 2 * x, ch))
}

fn laplacian_pyramid(img: &Image, levels: usize) -> Vec<Image> {
    let mut bands = Vec::with_capacity(levels);
    let mut cur = img.clone();
    for _ in 1..levels {
        if cur.height() < 2 || cur.width() < 2 {
            break;
        }
        let down = pyr_down(&cur);
        let up = down.resize(cur.height(), cur.width());
        let mut band = cur.clone();
        band.data_mut()
            .iter_mut()
            .zip(up.data())
            .for_each(|(b, u)| *b -= u);
        bands.push(band);
        cur = down;
    }
    bands.push(cur);
    bands
}

fn collapse(bands: &[Image]) -> Image {
    let mut cur = bands.last().expect("non-empty pyramid").clone();
    for band in bands[..bands.len() - 1].iter().rev() {
        let mut up = cur.resize(band.height(), band.width());
        up.data_mut()
            .iter_mut()
            .zip(band.data())
            .for_each(|(u, b)| *u += b);
        cur = up;
    }
    cur
}

/// Zeroes every DFT bin whose frequency lies outside `[lo, hi]` Hz.
fn ideal_bandpass(series: &mut [Vec<f64>], fps: f64, lo: f64, hi: f64) {
    let t = series.first().map_or(0, Vec::len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(t);
    let inv = planner.plan_fft_inverse(t);
    let keep: Vec<bool> = (0..t)
        .map(|k| {
            let bin = k.min(t - k) as f64 * fps / t as f64;
            bin >= lo && bin <= hi
        })
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for s in series.iter_mut() {
        for (b, &v) in buf.iter_mut().zip(s.iter()) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, &k) in buf.iter_mut().zip(&keep) {
            if !k {
                *b = Complex::new(0.0, 0.0);
            }
        }
        inv.process(&mut buf);
        for (v, b) in s.iter_mut().zip(&buf) {
            *v = b.re / t as f64;
        }
    }
}

pub fn evm_magnify(clip: &VideoClip, cfg: &EvmConfig) -> Result<VideoClip> {
    let t = clip.len();
    if t < MIN_FRAMES {
        return Err(Error::Invalid(format!(
            "clip too short for the temporal filter ({t} frames, need {MIN_FRAMES})"
        )));
    }
    let (lo, hi) = cfg.band;
    if cfg.levels < 1 {
        return Err(Error::Config("evm levels must be at least 1".into()));
    }
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::Config(format!("invalid evm band [{lo}, {hi}]")));
    }
    if hi >= clip.fps / 2.0 {
        return Err(Error::Config(format!(
            "evm band upper edge {hi} Hz must be below Nyquist ({} Hz)",
            clip.fps / 2.0
        )));
    }

    let mut pyramids: Vec<Vec<Image>> = clip
        .frames
        .iter()
        .map(|f| laplacian_pyramid(f, cfg.levels))
        .collect();

    if cfg.alpha != 0.0 {
        for level in 0..pyramids[0].len() {
            let n = pyramids[0][level].data().len();
            let mut series: Vec<Vec<f64>> = (0..n)
                .map(|i| pyramids.iter().map(|p| p[level].data()[i]).collect())
                .collect();
            ideal_bandpass(&mut series, clip.fps, lo, hi);
            for (f, pyr) in pyramids.iter_mut().enumerate() {
                for (i, v) in pyr[level].data_mut().iter_mut().enumerate() {
                    *v += cfg.alpha * series[i][f];
                }
            }
        }
    }

    let frames = pyramids.iter().map(|p| collapse(p).clamp01()).collect();
    Ok(clip.with_frames(frames))
}
