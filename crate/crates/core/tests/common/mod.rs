#![allow(dead_code)]

use msmmt_core::diffmath::{Tape, Tensor, Var};
use msmmt_core::imaging::Image;
use msmmt_core::msmmt::ModelConfig;
use msmmt_core::prep::LandmarkSet;
use msmmt_core::{ClipMeta, Result, VideoClip};
use std::f64::consts::PI;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcases;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-6)
    }
}

/// Central differences at steps `h` and `h/2` combined by Richardson
/// extrapolation, at every coordinate.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut central = |h: f64| {
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            };
            let coarse = central(FD_STEP);
            let fine = central(FD_STEP / 2.0);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.shape(out).is_empty() {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest relative error between tape gradients and central differences
/// of `sum(build(inputs) * W)` for a fixed random `W`, over every input
/// coordinate.
pub fn max_grad_error(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let shape = tape.shape(out).to_vec();
    let weights = rand_tensor(&mut rng(seed ^ 0xABCD), &shape, -1.0, 1.0);
    let loss = scalarize(&mut tape, out, &weights).expect("scalarize");
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).map_or(vec![0.0; t.numel()], |g| g.to_f64_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let mut eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        tape.param(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                    } else {
                        tape.param(t.clone())
                    }
                })
                .collect();
            let out = build(&mut tape, &vars).expect("forward");
            let loss = scalarize(&mut tape, out, &weights).expect("scalarize");
            tape.value(loss).item().unwrap()
        };
        let numeric = fd_gradient(&mut eval, inputs[k].data());
        for (a, n) in analytic[k].iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// The end-to-end gradient-check configuration.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        patch_size: 16,
        scales: vec![1, 2],
        layers: 3,
        heads: 2,
        embed_dim: 16,
        mlp_ratio: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    Image::new(h, w, c, data).unwrap()
}

/// Gaussian-smoothed noise rescaled to `[0.1, 0.9]`.
pub fn smooth_noise(seed: u64, h: usize, w: usize, c: usize, sigma: f64) -> Image {
    let mut img = rand_image(&mut rng(seed), h, w, c).gaussian_blur(sigma).minmax_normalized();
    img.data_mut().iter_mut().for_each(|v| *v = 0.1 + 0.8 * *v);
    img
}

pub struct ModelGradReport {
    pub worst: f64,
    pub worst_param: String,
    pub coordinates: usize,
    pub tensors: usize,
}

fn model_loss(model: &msmmt_core::Msmmt<f64>, dy: &[Tensor<f64>], fl: &[Tensor<f64>], labels: &[usize], mask_seed: u64) -> (Tape<f64>, msmmt_core::msmmt::Bound, Var) {
    use msmmt_core::losses::{tape_contrastive_loss, tape_total_loss};
    use msmmt_core::msmmt::Mode;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut r = rng(mask_seed);
    let out = model.forward(&mut tape, &b, dy, fl, Mode::Train(&mut r)).expect("forward");
    let ce = tape.cross_entropy(out.logits, labels).unwrap();
    let con = tape_contrastive_loss(&mut tape, out.dy.feature, out.flow.feature, 0.5).unwrap();
    let loss = tape_total_loss(&mut tape, ce, con, 0.5).unwrap();
    (tape, b, loss)
}

/// Tape gradients of the full forward pass plus both losses against
/// central differences. `coords` limits the number of random coordinates
/// checked per parameter tensor; every tensor additionally gets a
/// random-direction check.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, coords: Option<usize>) -> ModelGradReport {
    use msmmt_core::msmmt::{batch_tensors, PatchInput};
    let mut r = rng(seed);
    let imgs: Vec<(PatchInput, PatchInput)> = (0..2)
        .map(|_| {
            let a = rand_image(&mut r, cfg.image_size, cfg.image_size, 3);
            let b = rand_image(&mut r, cfg.image_size, cfg.image_size, 3);
            (PatchInput::from_image(cfg, &a).unwrap(), PatchInput::from_image(cfg, &b).unwrap())
        })
        .collect();
    let dy = batch_tensors::<f64>(cfg, &imgs.iter().map(|p| &p.0).collect::<Vec<_>>());
    let fl = batch_tensors::<f64>(cfg, &imgs.iter().map(|p| &p.1).collect::<Vec<_>>());
    let labels = [r.random_range(0..cfg.num_classes), r.random_range(0..cfg.num_classes)];
    let mask_seed = seed ^ 0x77;

    let mut model = msmmt_core::Msmmt::<f64>::new(cfg.clone(), seed).unwrap();
    // Non-zero biases and LN offsets so every path carries signal.
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let (mut tape, b, loss) = model_loss(&model, &dy, &fl, &labels, mask_seed);
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = b
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).map_or(vec![0.0; p.numel()], |g| g.to_f64_vec()))
        .collect();

    let eval = |m: &msmmt_core::Msmmt<f64>| {
        let (tape, _, loss) = model_loss(m, &dy, &fl, &labels, mask_seed);
        tape.value(loss).item().unwrap()
    };
    let f0 = eval(&model);
    let names: Vec<String> = model.params().names().to_vec();
    let mut report = ModelGradReport {
        worst: 0.0,
        worst_param: String::new(),
        coordinates: 0,
        tensors: names.len(),
    };
    let note = |err: f64, name: &str, report: &mut ModelGradReport| {
        if err > report.worst {
            report.worst = err;
            report.worst_param = name.to_string();
        }
    };
    for (i, name) in names.iter().enumerate() {
        let n = model.params().tensors()[i].numel();
        let picks: Vec<usize> = match coords {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| r.random_range(0..n)).collect(),
        };
        for j in picks {
            let orig = model.params().tensors()[i].data()[j];
            let fd = kink_safe_derivative(f0, |s| {
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig + s;
                let v = eval(&model);
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig;
                v
            });
            note(rel_err(analytic[i][j], fd), name, &mut report);
            report.coordinates += 1;
        }
        let dir: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = model.params().tensors()[i].clone();
        let shifted = |s: f64| Tensor::new(base.shape().to_vec(), base.data().iter().zip(&dir).map(|(a, d)| a + s * d).collect()).unwrap();
        let fd = kink_safe_derivative(f0, |s| {
            model.params_mut().tensors_mut()[i] = shifted(s);
            eval(&model)
        });
        model.params_mut().tensors_mut()[i] = base;
        let projected: f64 = analytic[i].iter().zip(&dir).map(|(g, d)| g * d).sum();
        note(rel_err(projected, fd), name, &mut report);
    }
    report
}

/// Central difference of `f` at 0. The step shrinks while the one-sided slopes
/// disagree, so a ReLU kink near the point is stepped over instead of straddled.
pub fn kink_safe_derivative(f0: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut h = FD_STEP;
    loop {
        let (up, down) = (f(h), f(-h));
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        if (fwd - bwd).abs() <= 1e-2 * fwd.abs().max(bwd.abs()).max(1e-3) || h < 1e-7 {
            return (up - down) / (2.0 * h);
        }
        h /= 10.0;
    }
}

/// Softmax rows of random logits, `depth` layers of `[heads, t, t]`.
pub fn rand_stack(rng: &mut ChaCha8Rng, depth: usize, heads: usize, t: usize) -> msmmt_core::msmmt::AttentionStack {
    let layers = (0..depth)
        .map(|_| {
            let mut data: Vec<f64> = (0..heads * t * t).map(|_| rng.random_range(-3.0..3.0)).collect();
            for row in data.chunks_exact_mut(t) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(vec![heads, t, t], data).unwrap()
        })
        .collect();
    msmmt_core::msmmt::AttentionStack::new(layers).unwrap()
}

pub fn uniform_stack(depth: usize, heads: usize, t: usize) -> msmmt_core::msmmt::AttentionStack {
    let layers = (0..depth).map(|_| Tensor::full(&[heads, t, t], 1.0 / t as f64)).collect();
    msmmt_core::msmmt::AttentionStack::new(layers).unwrap()
}

/// Plain `[t, t]` product.
pub fn matmul_sq(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    (0..t * t)
        .map(|ij| (0..t).map(|k| a[(ij / t) * t + k] * b[k * t + ij % t]).sum())
        .collect()
}

/// Rank-pooling optimum from the dual box QP
/// `max Σα_p − ‖Σα_p x_p‖²/(2λ)`, `0 ≤ α_p ≤ c`, with `x_p = φ_l − φ_t`
/// for every ordered pair and `c = 2/(T(T−1))`, solved by exact
/// coordinate ascent. Returns `d = Σα_p x_p / λ` and the primal objective.
pub fn rank_pool_oracle(frames: &[Vec<f64>], lambda: f64) -> (Vec<f64>, f64) {
    let t = frames.len();
    let n = frames[0].len();
    let phi: Vec<Vec<f64>> = (1..=t)
        .map(|k| (0..n).map(|j| frames[..k].iter().map(|f| f[j]).sum::<f64>() / k as f64).collect())
        .collect();
    let mut xs = Vec::new();
    for a in 0..t {
        for b in a + 1..t {
            xs.push((0..n).map(|j| phi[b][j] - phi[a][j]).collect::<Vec<f64>>());
        }
    }
    let c = 2.0 / (t * (t - 1)) as f64;
    let dotp = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut alpha = vec![0.0; xs.len()];
    let mut w = vec![0.0; n];
    for _ in 0..100_000 {
        let mut moved: f64 = 0.0;
        for (p, x) in xs.iter().enumerate() {
            let q = dotp(x, x);
            if q == 0.0 {
                continue;
            }
            // d/dα_p of the dual is 1 − ⟨w, x_p⟩/λ.
            let g = 1.0 - dotp(&w, x) / lambda;
            let next = (alpha[p] + g * lambda / q).clamp(0.0, c);
            let delta = next - alpha[p];
            if delta != 0.0 {
                w.iter_mut().zip(x).for_each(|(wi, xi)| *wi += delta * xi);
                alpha[p] = next;
                moved = moved.max(delta.abs());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    let d: Vec<f64> = w.iter().map(|v| v / lambda).collect();
    let scores: Vec<f64> = phi.iter().map(|p| dotp(&d, p)).collect();
    let mut hinge = 0.0;
    for a in 0..t {
        for b in a + 1..t {
            hinge += (1.0 - scores[b] + scores[a]).max(0.0);
        }
    }
    let e = 0.5 * lambda * dotp(&d, &d) + c * hinge;
    (d, e)
}

/// Kendall rank correlation between `v` and its index.
pub fn kendall_tau_vs_time(v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (v[j] - v[i]).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Horizontal cosine grating of period `period` px whose phase shift follows
/// `amp * sin(2 pi freq t / fps)` pixels.
pub fn moving_grating(h: usize, w: usize, period: f64, amp: f64, freq: f64, fps: f64, frames: usize) -> VideoClip {
    let imgs = (0..frames)
        .map(|t| {
            let d = amp * (2.0 * PI * freq * t as f64 / fps).sin();
            Image::from_fn(h, w, 3, |_, x, _| 0.5 + 0.25 * (2.0 * PI * (x as f64 + 0.5 - d) / period).cos())
        })
        .collect();
    let meta = ClipMeta {
        subject_id: "g".into(),
        label: 0,
        fps,
        onset: 0,
        apex: frames / 2,
        offset: frames - 1,
    };
    VideoClip::new(imgs, meta).unwrap()
}

/// Displacement amplitude of a grating clip at `freq`, read from the phase of
/// the spatial DFT bin at `period` and the temporal DFT bin at `freq`.
pub fn grating_amplitude(clip: &VideoClip, period: f64, freq: f64) -> f64 {
    let (h, w, _) = clip.dims();
    let k = 2.0 * PI / period;
    let coef = |img: &Image| {
        let (mut re, mut im) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = img.get(y, x, 0);
                let a = k * (x as f64 + 0.5);
                re += v * a.cos();
                im -= v * a.sin();
            }
        }
        (re, im)
    };
    let c0 = coef(&clip.frames[0]);
    let shifts: Vec<f64> = clip
        .frames
        .iter()
        .map(|f| {
            let c = coef(f);
            // arg(c * conj(c0)); a shift d multiplies the bin by exp(-i k d).
            let re = c.0 * c0.0 + c.1 * c0.1;
            let im = c.1 * c0.0 - c.0 * c0.1;
            -im.atan2(re) / k
        })
        .collect();
    let n = shifts.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, s) in shifts.iter().enumerate() {
        let a = 2.0 * PI * freq * t as f64 / clip.fps;
        re += s * a.cos();
        im -= s * a.sin();
    }
    2.0 * re.hypot(im) / n
}

/// 68 points: a face outline on an ellipse, inner eye corners at `left` and
/// `right`.
pub fn face_landmarks(centre: (f64, f64), radii: (f64, f64), left: (f64, f64), right: (f64, f64)) -> LandmarkSet {
    let pts = (0..68)
        .map(|i| match i {
            39 => left,
            42 => right,
            _ => {
                let a = 2.0 * PI * i as f64 / 68.0;
                (centre.0 + radii.0 * a.cos(), centre.1 + radii.1 * a.sin())
            }
        })
        .collect();
    LandmarkSet::new(pts).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for j in 0..a.len() {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Direct double loop over both anchor directions, no shifting.
pub fn contrastive_oracle(dy: &[Vec<f64>], fo: &[Vec<f64>], tau: f64) -> f64 {
    let b = dy.len();
    let mut total = 0.0;
    for (own, other) in [(dy, fo), (fo, dy)] {
        for i in 0..b {
            let num = (cosine(&own[i], &other[i]) / tau).exp();
            let mut den = 0.0;
            for k in 0..b {
                if k != i {
                    den += (cosine(&own[i], &other[k]) / tau).exp();
                }
            }
            for k in 0..b {
                den += (cosine(&own[k], &other[i]) / tau).exp();
            }
            total += -(num / den).ln();
        }
    }
    total / (2 * b) as f64
}

/// Per-class TP/FP/FN by brute counting, then the three scores.
pub fn naive_metrics(labels: &[usize], preds: &[usize], c: usize) -> (f64, f64, f64) {
    let n = labels.len();
    let correct = (0..n).filter(|&i| labels[i] == preds[i]).count();
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for k in 0..c {
        let tp = (0..n).filter(|&i| labels[i] == k && preds[i] == k).count();
        let fp = (0..n).filter(|&i| labels[i] != k && preds[i] == k).count();
        let fneg = (0..n).filter(|&i| labels[i] == k && preds[i] != k).count();
        let nk = (0..n).filter(|&i| labels[i] == k).count();
        if nk > 0 {
            recall += tp as f64 / nk as f64;
        }
        if 2 * tp + fp + fneg > 0 {
            f1 += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    (correct as f64 / n as f64, recall / c as f64, f1 / c as f64)
}
