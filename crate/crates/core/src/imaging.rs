//! Float images and the resampling primitives shared by every stage.
//!
//! Coordinates passed to the samplers are continuous: the centre of pixel
//! `(row, col)` sits at `(col + 0.5, row + 0.5)`.

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-major `H x W x C` image of `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

/// Luma weights used for grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Ranges at or below this are treated as constant by [`Image::minmax_normalized`].
pub const DEGENERATE_RANGE: f64 = 1e-12;

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::Invalid(format!(
                "image buffer of {} values does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Image { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn channel(&self, ch: usize) -> Image {
        Image::from_fn(self.h, self.w, 1, |y, x, _| self.get(y, x, ch))
    }

    pub fn from_channels(chans: &[&Image]) -> Result<Image> {
        let first = chans.first().ok_or_else(|| Error::Invalid("no channels".into()))?;
        let (h, w) = (first.h, first.w);
        if chans.iter().any(|c| c.h != h || c.w != w || c.c != 1) {
            return Err(Error::Invalid("channel planes differ in size".into()));
        }
        Ok(Image::from_fn(h, w, chans.len(), |y, x, ch| chans[ch].get(y, x, 0)))
    }

    /// Bilinear sample at continuous coordinates with replicated borders.
    pub fn sample(&self, xc: f64, yc: f64, ch: usize) -> f64 {
        let x = (xc - 0.5).clamp(0.0, (self.w - 1) as f64);
        let y = (yc - 0.5).clamp(0.0, (self.h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
        let bot = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples every output pixel centre through `map` (output continuous
    /// coordinates to source continuous coordinates).
    pub fn warp(&self, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::zeros(h, w, self.c);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map(x as f64 + 0.5, y as f64 + 0.5);
                for ch in 0..self.c {
                    out.set(y, x, ch, self.sample(sx, sy, ch));
                }
            }
        }
        out
    }

    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let sx = self.w as f64 / w as f64;
        let sy = self.h as f64 / h as f64;
        self.warp(h, w, |x, y| (x * sx, y * sy))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.h, self.w, self.c, |y, x, ch| self.get(y, self.w - 1 - x, ch))
    }

    pub fn to_gray(&self) -> Image {
        match self.c {
            1 => self.clone(),
            3 => Image::from_fn(self.h, self.w, 1, |y, x, _| {
                (0..3).map(|ch| LUMA[ch] * self.get(y, x, ch)).sum()
            }),
            _ => Image::from_fn(self.h, self.w, 1, |y, x, _| {
                (0..self.c).map(|ch| self.get(y, x, ch)).sum::<f64>() / self.c as f64
            }),
        }
    }

    /// Separable Gaussian blur with replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        self.convolve_separable(&kernel)
    }

    pub(crate) fn convolve_separable(&self, kernel: &[f64]) -> Image {
        let r = (kernel.len() / 2) as isize;
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut s = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let xx = clampi(x as isize + k as isize - r, self.w);
                        s += kv * self.get(y, xx, ch);
                    }
                    tmp.set(y, x, ch, s);
                }
            }
        }
        let mut out = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    let mut s = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let yy = clampi(y as isize + k as isize - r, self.h);
                        s += kv * tmp.get(yy, x, ch);
                    }
                    out.set(y, x, ch, s);
                }
            }
        }
        out
    }

    /// Per-channel min-max scaling to `[0, 1]`; a constant channel maps to 0.5.
    pub fn minmax_normalized(&self) -> Image {
        let mut out = self.clone();
        for ch in 0..self.c {
            let vals = self.data.iter().skip(ch).step_by(self.c);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let range = hi - lo;
            for v in out.data.iter_mut().skip(ch).step_by(self.c) {
                *v = if range <= DEGENERATE_RANGE {
                    0.5
                } else {
                    (*v - lo) / range
                };
            }
        }
        out
    }

    pub fn clamp01(mut self) -> Image {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn rms_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s / self.data.len() as f64).sqrt()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w, self.c], |i| T::from_f64_lossy(self.data[i]))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        match *t.shape() {
            [h, w, c] => Image::new(h, w, c, t.to_f64_vec()),
            _ => Err(Error::Invalid(format!(
                "expected an HxWxC tensor, got {:?}",
                t.shape()
            ))),
        }
    }
}
