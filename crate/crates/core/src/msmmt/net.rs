use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{multiscale_views, patchify, ModelConfig};
use super::fusion::{tape_importance, tape_layer_normalize, tape_rollup, tape_weighted_tokens, AttentionStack};
use super::params::{trunc_normal, ParamStore};
use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Dynamic,
    FlowOs,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Dynamic, Modality::FlowOs];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Dynamic => "dy",
            Modality::FlowOs => "flow",
        }
    }
}

/// Forward-pass mode. Dropout only exists in training mode, which owns the
/// random source for its masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Patch vectors of one image at every configured scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInput {
    scales: Vec<Vec<f64>>,
}

impl PatchInput {
    /// Pixels enter the patch projection rescaled from `[0, 1]` to `[-1, 1]`.
    pub fn from_image(cfg: &ModelConfig, img: &Image) -> Result<Self> {
        let views = multiscale_views(cfg, img)?;
        Ok(PatchInput {
            scales: views
                .iter()
                .map(|v| patchify(v, cfg.patch_size).into_iter().map(|x| 2.0 * x - 1.0).collect())
                .collect(),
        })
    }

    pub fn scale(&self, i: usize) -> &[f64] {
        &self.scales[i]
    }
}

/// Stacks per-sample patches into one `[B, N_s, P*P*3]` tensor per scale.
pub fn batch_tensors<T: Real>(cfg: &ModelConfig, items: &[&PatchInput]) -> Vec<Tensor<T>> {
    (0..cfg.scales.len())
        .map(|s| {
            let per = cfg.patches(s) * cfg.patch_dim();
            let mut data = Vec::with_capacity(items.len() * per);
            for it in items {
                data.extend(it.scales[s].iter().map(|&v| T::from_f64_lossy(v)));
            }
            Tensor::new(vec![items.len(), cfg.patches(s), cfg.patch_dim()], data).expect("patch batch")
        })
        .collect()
}

/// Every parameter name with its shape, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let r = cfg.mlp_ratio * d;
    let mut out = Vec::new();
    for m in Modality::ALL {
        let p = m.prefix();
        out.push((format!("{p}.patch.w"), vec![cfg.patch_dim(), d]));
        out.push((format!("{p}.patch.b"), vec![d]));
        out.push((format!("{p}.cls"), vec![1, d]));
        for s in 0..cfg.scales.len() {
            out.push((format!("{p}.pos{s}"), vec![cfg.patches(s) + 1, d]));
        }
        for l in 0..cfg.layers {
            let b = format!("{p}.block{l}");
            for (n, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("q.w", vec![d, d]),
                ("q.b", vec![d]),
                ("k.w", vec![d, d]),
                ("k.b", vec![d]),
                ("v.w", vec![d, d]),
                ("v.b", vec![d]),
                ("o.w", vec![d, d]),
                ("o.b", vec![d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("fc1.w", vec![d, r]),
                ("fc1.b", vec![r]),
                ("fc2.w", vec![r, d]),
                ("fc2.b", vec![d]),
            ] {
                out.push((format!("{b}.{n}"), shape));
            }
        }
    }
    let f = 2 * cfg.feature_dim();
    out.push(("head.fc1.w".into(), vec![f, cfg.hidden()]));
    out.push(("head.fc1.b".into(), vec![cfg.hidden()]));
    out.push(("head.fc2.w".into(), vec![cfg.hidden(), cfg.num_classes]));
    out.push(("head.fc2.b".into(), vec![cfg.num_classes]));
    out
}

/// Tape handles of one scale's forward pass.
#[derive(Clone, Debug)]
pub struct ScaleTrace {
    /// `[B, N+1, D]` after patch embedding.
    pub tokens: Var,
    /// Post-softmax attention `[B, H, N+1, N+1]` of layers `1..L-1`.
    pub attention: Vec<Var>,
    /// Normalized head-mean matrices `G_l`, `[B, N+1, N+1]`.
    pub layer_g: Vec<Var>,
    pub rollup: Var,
    /// `[B, N]`.
    pub importance: Var,
    /// `Z_{L-1}`, `[B, N+1, D]`.
    pub z_prev: Var,
    /// Reweighted input of the last layer.
    pub last_input: Var,
    /// `[B, D]` cls output of the last layer.
    pub cls: Var,
}

#[derive(Clone, Debug)]
pub struct ModalityTrace {
    pub scales: Vec<ScaleTrace>,
    /// `[B, S*D]`.
    pub feature: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub dy: ModalityTrace,
    pub flow: ModalityTrace,
    /// `[B, C]`.
    pub logits: Var,
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Msmmt<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> Msmmt<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape) in param_layout(&cfg) {
            let last = name.rsplit('.').next().unwrap_or("");
            let is_ln = name.contains(".ln");
            let t = match (is_ln, last) {
                (true, "g") => Tensor::ones(&shape),
                (_, "b") => Tensor::zeros(&shape),
                _ => trunc_normal(&mut rng, &shape, cfg.init_std),
            };
            params.insert(name, t);
        }
        Ok(Msmmt { cfg, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(Msmmt { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Msmmt<U> {
        Msmmt {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.tensors().iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    fn var(&self, b: &Bound, name: &str) -> Var {
        b.vars[self.params.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(b, &format!("{prefix}.w")))?;
        tape.add(y, self.var(b, &format!("{prefix}.b")))
    }

    /// Patch projection, cls token and the scale's positional embedding.
    pub fn patch_embed(&self, tape: &mut Tape<T>, b: &Bound, m: Modality, scale: usize, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        let want = [shape.first().copied().unwrap_or(0), self.cfg.patches(scale), self.cfg.patch_dim()];
        if shape.len() != 3 || shape[1..] != want[1..] {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: shape,
                rhs: want.to_vec(),
            });
        }
        let p = m.prefix();
        let tok = self.linear(tape, b, patches, &format!("{p}.patch"))?;
        let zeros = tape.constant(Tensor::zeros(&[shape[0], 1, self.cfg.embed_dim]));
        let cls = tape.add(zeros, self.var(b, &format!("{p}.cls")))?;
        let seq = tape.concat(&[cls, tok], 1)?;
        tape.add(seq, self.var(b, &format!("{p}.pos{scale}")))
    }

    /// One pre-norm encoder block; returns the output and the attention
    /// probabilities `[B, H, T, T]`.
    pub fn block(&self, tape: &mut Tape<T>, b: &Bound, x: Var, m: Modality, layer: usize) -> Result<(Var, Var)> {
        let pre = format!("{}.block{layer}", m.prefix());
        let shape = tape.shape(x).to_vec();
        let (bs, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let eps = self.cfg.ln_eps;

        let n1 = tape.layernorm(x, self.var(b, &format!("{pre}.ln1.g")), self.var(b, &format!("{pre}.ln1.b")), eps)?;
        let heads = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let y = self.linear(tape, b, n1, &format!("{pre}.{name}"))?;
            let y = tape.reshape(y, &[bs, t, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(tape, "q")?;
        let k = heads(tape, "k")?;
        let v = heads(tape, "v")?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()))?;
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[bs, t, d])?;
        let o = self.linear(tape, b, ctx, &format!("{pre}.o"))?;
        let x1 = tape.add(x, o)?;

        let n2 = tape.layernorm(x1, self.var(b, &format!("{pre}.ln2.g")), self.var(b, &format!("{pre}.ln2.b")), eps)?;
        let f = self.linear(tape, b, n2, &format!("{pre}.fc1"))?;
        let f = tape.gelu(f)?;
        let f = self.linear(tape, b, f, &format!("{pre}.fc2"))?;
        Ok((tape.add(x1, f)?, attn))
    }

    /// Layers `1..L-1` over embedded tokens: `Z_{L-1}` and the attention of
    /// every layer.
    pub fn encoder_forward(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var, m: Modality) -> Result<(Var, Vec<Var>)> {
        let mut x = tokens;
        let mut attn = Vec::with_capacity(self.cfg.layers - 1);
        for l in 0..self.cfg.layers - 1 {
            let (y, a) = self.block(tape, b, x, m, l)?;
            x = y;
            attn.push(a);
        }
        Ok((x, attn))
    }

    fn scale_forward(&self, tape: &mut Tape<T>, b: &Bound, m: Modality, scale: usize, patches: &Tensor<T>) -> Result<ScaleTrace> {
        let fusion = &self.cfg.fusion;
        let p = tape.constant(patches.clone());
        let tokens = self.patch_embed(tape, b, m, scale, p)?;
        let (z_prev, attention) = self.encoder_forward(tape, b, tokens, m)?;
        let layer_g = attention
            .iter()
            .map(|&a| tape_layer_normalize(tape, a, fusion.layer_normalization))
            .collect::<Result<Vec<_>>>()?;
        let rollup = tape_rollup(tape, &layer_g)?;
        let importance = tape_importance(tape, rollup, fusion.importance)?;
        let last_input = tape_weighted_tokens(tape, z_prev, importance)?;
        let (z_last, _) = self.block(tape, b, last_input, m, self.cfg.layers - 1)?;
        let bs = tape.shape(z_last)[0];
        let cls = tape.narrow(z_last, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[bs, self.cfg.embed_dim])?;
        Ok(ScaleTrace {
            tokens,
            attention,
            layer_g,
            rollup,
            importance,
            z_prev,
            last_input,
            cls,
        })
    }

    /// Concatenated per-scale cls outputs, `[B, S*D]`.
    pub fn modality_forward(&self, tape: &mut Tape<T>, b: &Bound, m: Modality, inputs: &[Tensor<T>]) -> Result<ModalityTrace> {
        if inputs.len() != self.cfg.scales.len() {
            return Err(Error::Invalid(format!(
                "{} scale inputs for {} scales",
                inputs.len(),
                self.cfg.scales.len()
            )));
        }
        let scales = inputs
            .iter()
            .enumerate()
            .map(|(s, x)| self.scale_forward(tape, b, m, s, x))
            .collect::<Result<Vec<_>>>()?;
        let cls: Vec<Var> = scales.iter().map(|s| s.cls).collect();
        let feature = tape.concat(&cls, 1)?;
        Ok(ModalityTrace { scales, feature })
    }

    /// `FC2(dropout(ReLU(FC1([dy; flow]))))`.
    pub fn classify(&self, tape: &mut Tape<T>, b: &Bound, dy: Var, flow: Var, mode: Mode<'_>) -> Result<Var> {
        let x = tape.concat(&[dy, flow], 1)?;
        let hdn = self.linear(tape, b, x, "head.fc1")?;
        let mut hdn = tape.relu(hdn)?;
        if let Mode::Train(rng) = mode {
            let p = self.cfg.dropout_rate;
            if p > 0.0 {
                let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                let mask = Tensor::from_fn(tape.shape(hdn), |_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                });
                let mask = tape.constant(mask);
                hdn = tape.mul(hdn, mask)?;
            }
        }
        self.linear(tape, b, hdn, "head.fc2")
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        dy: &[Tensor<T>],
        flow: &[Tensor<T>],
        mode: Mode<'_>,
    ) -> Result<ForwardOut> {
        let dy = self.modality_forward(tape, b, Modality::Dynamic, dy)?;
        let flow = self.modality_forward(tape, b, Modality::FlowOs, flow)?;
        let logits = self.classify(tape, b, dy.feature, flow.feature, mode)?;
        Ok(ForwardOut { dy, flow, logits })
    }

    /// Eval-mode logits `[B, C]`.
    pub fn predict(&self, dy: &[Tensor<T>], flow: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &b, dy, flow, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode feature vector of one modality image, length `S*D`.
    pub fn modality_feature(&self, m: Modality, img: &Image) -> Result<Vec<f64>> {
        let input = PatchInput::from_image(&self.cfg, img)?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let t = self.modality_forward(&mut tape, &b, m, &batch_tensors(&self.cfg, &[&input]))?;
        Ok(tape.value(t.feature).to_f64_vec())
    }

    /// Eval-mode internals of every scale for one image.
    pub fn inspect(&self, m: Modality, img: &Image) -> Result<Vec<ScaleInspection>> {
        let input = PatchInput::from_image(&self.cfg, img)?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let t = self.modality_forward(&mut tape, &b, m, &batch_tensors(&self.cfg, &[&input]))?;
        let first = |v: Var| -> Tensor<f64> {
            let t = tape.value(v);
            t.cast::<f64>().reshape(&t.shape()[1..]).expect("drop batch axis")
        };
        t.scales
            .iter()
            .map(|s| {
                Ok(ScaleInspection {
                    tokens: first(s.tokens),
                    stack: AttentionStack::new(s.attention.iter().map(|&a| first(a)).collect())?,
                    importance: first(s.importance).into_data(),
                    z_prev: first(s.z_prev),
                    last_input: first(s.last_input),
                    cls: first(s.cls).into_data(),
                })
            })
            .collect()
    }
}

/// Values recorded for one scale of a single-image forward pass.
#[derive(Clone, Debug)]
pub struct ScaleInspection {
    pub tokens: Tensor<f64>,
    pub stack: AttentionStack,
    pub importance: Vec<f64>,
    pub z_prev: Tensor<f64>,
    pub last_input: Tensor<f64>,
    pub cls: Vec<f64>,
}
