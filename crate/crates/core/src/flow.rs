//! TV-L1 optical flow, optical strain and the three-channel flow-OS image.
//!
//! The solver is the duality-based TV-L1 scheme: a coarse-to-fine pyramid,
//! several warps per level and, inside each warp, alternating pointwise
//! thresholding of the linearized data term with Chambolle's projection for
//! the TV term.

use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Smallest side any pyramid level may have.
pub const MIN_LEVEL_SIZE: usize = 8;
const PRESMOOTH_SIGMA: f64 = 0.8;
const GRAD_IS_ZERO: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvL1Params {
    pub lambda: f64,
    pub theta: f64,
    pub tau: f64,
    pub warps: usize,
    pub inner_iters: usize,
    pub levels: usize,
    pub median: bool,
    /// Stopping threshold on the mean squared flow update.
    pub epsilon: f64,
}

impl Default for TvL1Params {
    fn default() -> Self {
        TvL1Params {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            inner_iters: 30,
            levels: 5,
            median: true,
            epsilon: 0.01,
        }
    }
}

impl TvL1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.theta > 0.0) {
            return Err(Error::Config("tv-l1 lambda and theta must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return Err(Error::Config(format!("tv-l1 tau must lie in (0, 0.25], got {}", self.tau)));
        }
        if self.warps == 0 || self.inner_iters == 0 || self.levels == 0 {
            return Err(Error::Config("tv-l1 warps, inner_iters and levels must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("tv-l1 epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which frame the onset frame is matched against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTarget {
    #[default]
    Apex,
    Offset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub tvl1: TvL1Params,
    pub target: FlowTarget,
}

/// Dense displacement field; `u` is horizontal, `v` vertical, both in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut out = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f(y, x);
                out.u[y * w + x] = u;
                out.v[y * w + x] = v;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, v| m.max(v.abs()))
    }

    fn resized(&self, h: usize, w: usize) -> FlowField {
        let (sx, sy) = (w as f64 / self.w as f64, h as f64 / self.h as f64);
        let img = Image::from_fn(self.h, self.w, 2, |y, x, c| {
            let i = y * self.w + x;
            if c == 0 {
                self.u[i]
            } else {
                self.v[i]
            }
        })
        .resize(h, w);
        FlowField::from_fn(h, w, |y, x| (img.get(y, x, 0) * sx, img.get(y, x, 1) * sy))
    }
}

/// Single-channel plane used inside the solver.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Plane {
    fn from_image(img: &Image) -> Plane {
        Plane {
            h: img.height(),
            w: img.width(),
            d: img.data().to_vec(),
        }
    }

    fn to_image(&self) -> Image {
        Image::new(self.h, self.w, 1, self.d.clone()).expect("plane dims")
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.d[y * self.w + x]
    }
}

/// Central differences inside, one-sided at the borders.
fn centered_gradient(p: &Plane) -> (Plane, Plane) {
    let (h, w) = (p.h, p.w);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gx[y * w + x] = diff(w, x, |i| p.at(y, i));
            gy[y * w + x] = diff(h, y, |i| p.at(i, x));
        }
    }
    (Plane { h, w, d: gx }, Plane { h, w, d: gy })
}

fn diff(n: usize, i: usize, f: impl Fn(usize) -> f64) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

fn forward_gradient(d: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { d[i + 1] - d[i] } else { 0.0 };
            gy[i] = if y + 1 < h { d[i + w] - d[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(p1: &[f64], p2: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x + 1 == w && w > 1 {
                -p1[i - 1]
            } else if x == 0 {
                p1[i]
            } else {
                p1[i] - p1[i - 1]
            };
            let dy = if y + 1 == h && h > 1 {
                -p2[i - w]
            } else if y == 0 {
                p2[i]
            } else {
                p2[i] - p2[i - w]
            };
            out[i] = dx + dy;
        }
    }
}

fn median3x3(d: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut buf = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    buf.push(d[yy * w + xx]);
                }
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            out[y * w + x] = buf[buf.len() / 2];
        }
    }
    out
}

fn warp_plane(p: &Plane, flow: &FlowField) -> Plane {
    let img = p.to_image();
    let mut d = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            let i = y * p.w + x;
            d[i] = img.sample(x as f64 + 0.5 + flow.u[i], y as f64 + 0.5 + flow.v[i], 0);
        }
    }
    Plane { h: p.h, w: p.w, d }
}

fn solve_level(i0: &Plane, i1: &Plane, flow: &mut FlowField, prm: &TvL1Params) {
    let (h, w) = (i0.h, i0.w);
    let n = h * w;
    let l_t = prm.lambda * prm.theta;
    let taut = prm.tau / prm.theta;
    let (i1x, i1y) = centered_gradient(i1);

    let mut p11 = vec![0.0; n];
    let mut p12 = vec![0.0; n];
    let mut p21 = vec![0.0; n];
    let mut p22 = vec![0.0; n];
    let mut v1 = vec![0.0; n];
    let mut v2 = vec![0.0; n];
    let mut div1 = vec![0.0; n];
    let mut div2 = vec![0.0; n];
    let mut ux = vec![0.0; n];
    let mut uy = vec![0.0; n];
    let mut vx = vec![0.0; n];
    let mut vy = vec![0.0; n];

    for _ in 0..prm.warps {
        let i1w = warp_plane(i1, flow);
        let i1wx = warp_plane(&i1x, flow);
        let i1wy = warp_plane(&i1y, flow);
        let grad: Vec<f64> = (0..n).map(|i| i1wx.d[i].powi(2) + i1wy.d[i].powi(2)).collect();
        let rho_c: Vec<f64> = (0..n)
            .map(|i| i1w.d[i] - i1wx.d[i] * flow.u[i] - i1wy.d[i] * flow.v[i] - i0.d[i])
            .collect();

        for _ in 0..prm.inner_iters {
            for i in 0..n {
                let rho = rho_c[i] + i1wx.d[i] * flow.u[i] + i1wy.d[i] * flow.v[i];
                let (d1, d2) = if rho < -l_t * grad[i] {
                    (l_t * i1wx.d[i], l_t * i1wy.d[i])
                } else if rho > l_t * grad[i] {
                    (-l_t * i1wx.d[i], -l_t * i1wy.d[i])
                } else if grad[i] < GRAD_IS_ZERO {
                    (0.0, 0.0)
                } else {
                    let fi = -rho / grad[i];
                    (fi * i1wx.d[i], fi * i1wy.d[i])
                };
                v1[i] = flow.u[i] + d1;
                v2[i] = flow.v[i] + d2;
            }

            divergence(&p11, &p12, h, w, &mut div1);
            divergence(&p21, &p22, h, w, &mut div2);

            let mut err = 0.0;
            for i in 0..n {
                let (uo, vo) = (flow.u[i], flow.v[i]);
                flow.u[i] = v1[i] + prm.theta * div1[i];
                flow.v[i] = v2[i] + prm.theta * div2[i];
                err += (flow.u[i] - uo).powi(2) + (flow.v[i] - vo).powi(2);
            }

            forward_gradient(&flow.u, h, w, &mut ux, &mut uy);
            forward_gradient(&flow.v, h, w, &mut vx, &mut vy);
            for i in 0..n {
                let ng1 = 1.0 + taut * ux[i].hypot(uy[i]);
                let ng2 = 1.0 + taut * vx[i].hypot(vy[i]);
                p11[i] = (p11[i] + taut * ux[i]) / ng1;
                p12[i] = (p12[i] + taut * uy[i]) / ng1;
                p21[i] = (p21[i] + taut * vx[i]) / ng2;
                p22[i] = (p22[i] + taut * vy[i]) / ng2;
            }

            if err / (n as f64) < prm.epsilon * prm.epsilon {
                break;
            }
        }

        if prm.median {
            flow.u = median3x3(&flow.u, h, w);
            flow.v = median3x3(&flow.v, h, w);
        }
    }
}

/// Number of pyramid levels actually used: at most `requested`, stopping
/// before any side would fall below [`MIN_LEVEL_SIZE`].
pub fn effective_levels(h: usize, w: usize, requested: usize) -> usize {
    let mut levels = 1;
    let (mut ch, mut cw) = (h, w);
    while levels < requested && ch.div_ceil(2) >= MIN_LEVEL_SIZE && cw.div_ceil(2) >= MIN_LEVEL_SIZE {
        ch = ch.div_ceil(2);
        cw = cw.div_ceil(2);
        levels += 1;
    }
    levels
}

/// Estimates the flow taking `i0` to `i1`, so that `i1(x + u, y + v) ≈ i0(x, y)`.
/// Both inputs are single-channel images with values in `[0, 1]`.
pub fn tvl1_flow(i0: &Image, i1: &Image, prm: &TvL1Params) -> Result<FlowField> {
    prm.validate()?;
    if i0.dims() != i1.dims() {
        return Err(Error::Shape {
            op: "tvl1_flow",
            lhs: vec![i0.height(), i0.width(), i0.channels()],
            rhs: vec![i1.height(), i1.width(), i1.channels()],
        });
    }
    if i0.channels() != 1 {
        return Err(Error::Invalid("tvl1_flow expects grayscale images".into()));
    }
    let (h, w) = (i0.height(), i0.width());
    if h < MIN_LEVEL_SIZE || w < MIN_LEVEL_SIZE {
        return Err(Error::Invalid(format!(
            "image {h}x{w} is smaller than the minimum pyramid level ({MIN_LEVEL_SIZE} px)"
        )));
    }
    if i0.data().iter().chain(i1.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "tvl1_flow" });
    }

    let lo = i0.data().iter().chain(i1.data()).copied().fold(f64::INFINITY, f64::min);
    let hi = i0.data().iter().chain(i1.data()).copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi - lo > 0.0 { 255.0 / (hi - lo) } else { 0.0 };
    let norm = |img: &Image| {
        let mut out = img.clone();
        out.data_mut().iter_mut().for_each(|v| *v = (*v - lo) * scale);
        out.gaussian_blur(PRESMOOTH_SIGMA)
    };

    let levels = effective_levels(h, w, prm.levels);
    let sigma = 0.6 * (1.0f64 / 0.25 - 1.0).sqrt();
    let mut pyr0 = vec![norm(i0)];
    let mut pyr1 = vec![norm(i1)];
    for l in 1..levels {
        let (ph, pw) = (pyr0[l - 1].height().div_ceil(2), pyr0[l - 1].width().div_ceil(2));
        pyr0.push(pyr0[l - 1].gaussian_blur(sigma).resize(ph, pw));
        pyr1.push(pyr1[l - 1].gaussian_blur(sigma).resize(ph, pw));
    }

    let coarse = &pyr0[levels - 1];
    let mut flow = FlowField::zeros(coarse.height(), coarse.width());
    for l in (0..levels).rev() {
        let (ph, pw) = (pyr0[l].height(), pyr0[l].width());
        if flow.h != ph || flow.w != pw {
            flow = flow.resized(ph, pw);
        }
        solve_level(&Plane::from_image(&pyr0[l]), &Plane::from_image(&pyr1[l]), &mut flow, prm);
    }
    if flow.u.iter().chain(&flow.v).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "tvl1_flow" });
    }
    Ok(flow)
}

/// Strain tensor components and magnitude per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainMap {
    pub h: usize,
    pub w: usize,
    pub eps: Vec<f64>,
    pub eps_xx: Vec<f64>,
    pub eps_yy: Vec<f64>,
    pub eps_xy: Vec<f64>,
    pub eps_yx: Vec<f64>,
}

pub fn strain(flow: &FlowField) -> StrainMap {
    let (h, w) = (flow.h, flow.w);
    let n = h * w;
    let mut m = StrainMap {
        h,
        w,
        eps: vec![0.0; n],
        eps_xx: vec![0.0; n],
        eps_yy: vec![0.0; n],
        eps_xy: vec![0.0; n],
        eps_yx: vec![0.0; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ux = diff(w, x, |k| flow.u[y * w + k]);
            let uy = diff(h, y, |k| flow.u[k * w + x]);
            let vx = diff(w, x, |k| flow.v[y * w + k]);
            let vy = diff(h, y, |k| flow.v[k * w + x]);
            let shear = 0.5 * (uy + vx);
            m.eps_xx[i] = ux;
            m.eps_yy[i] = vy;
            m.eps_xy[i] = shear;
            m.eps_yx[i] = shear;
            m.eps[i] = (ux * ux + vy * vy + 2.0 * shear * shear).sqrt();
        }
    }
    m
}

/// `(u, v, eps)` stacked as channels, each min-max normalized.
pub fn compose_flow_os(flow: &FlowField, s: &StrainMap) -> Result<Image> {
    if (flow.h, flow.w) != (s.h, s.w) {
        return Err(Error::Shape {
            op: "compose_flow_os",
            lhs: vec![flow.h, flow.w],
            rhs: vec![s.h, s.w],
        });
    }
    let w = flow.w;
    Ok(Image::from_fn(flow.h, w, 3, |y, x, c| {
        let i = y * w + x;
        match c {
            0 => flow.u[i],
            1 => flow.v[i],
            _ => s.eps[i],
        }
    })
    .minmax_normalized())
}

/// Flow, strain and flow-OS image of a clip's onset frame against its apex
/// (or offset) frame.
pub fn flow_os(clip: &VideoClip, cfg: &FlowConfig) -> Result<(FlowField, StrainMap, Image)> {
    let target = match cfg.target {
        FlowTarget::Apex => clip.apex,
        FlowTarget::Offset => clip.offset,
    };
    let i0 = clip.frames[clip.onset].to_gray();
    let i1 = clip.frames[target].to_gray();
    let f = tvl1_flow(&i0, &i1, &cfg.tvl1)?;
    let s = strain(&f);
    let img = compose_flow_os(&f, &s)?;
    Ok((f, s, img))
}
