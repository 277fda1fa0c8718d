//! Attention-weight fusion: per-layer normalization of head-averaged
//! attention, the rollup product over layers and the resulting patch
//! importance that reweights the tokens entering the last layer.
//!
//! The free functions work on plain values for a single sample; the `tape_*`
//! variants build the same computation on a [`Tape`] for a batch.

use super::config::{ImportanceReduction, LayerNormalization};
use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Raw per-head attention of the fused layers `1..L-1`, each `[H, T, T]`
/// with the cls token at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: Vec<Tensor<f64>>,
}

impl AttentionStack {
    pub fn new(layers: Vec<Tensor<f64>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Invalid("attention stack is empty".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] || shape[0] == 0 {
            return Err(Error::Invalid(format!("attention layers must be [H, T, T], got {shape:?}")));
        }
        if layers.iter().any(|l| l.shape() != shape.as_slice()) {
            return Err(Error::Invalid("attention layers differ in shape".into()));
        }
        let stack = AttentionStack { layers };
        stack.check_rows()?;
        Ok(stack)
    }

    fn check_rows(&self) -> Result<()> {
        let t = self.tokens();
        for (l, layer) in self.layers.iter().enumerate() {
            for (r, row) in layer.data().chunks_exact(t).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Invalid(format!(
                        "layer {} row {r} is not a probability row (sum {s})",
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of fused layers, `L - 1`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].shape()[1]
    }

    /// Layer `l` in `1..=depth()`.
    pub fn layer(&self, l: usize) -> &Tensor<f64> {
        &self.layers[l - 1]
    }

    pub fn matrix_count(&self) -> usize {
        self.depth() * self.heads()
    }
}

/// `G_l`: the head-mean of layer `l`, rescaled per [`LayerNormalization`].
pub fn layer_attention_normalize(stack: &AttentionStack, l: usize, mode: LayerNormalization) -> Result<Tensor<f64>> {
    if l == 0 || l > stack.depth() {
        return Err(Error::Invalid(format!("layer {l} outside 1..={}", stack.depth())));
    }
    let (h, t) = (stack.heads(), stack.tokens());
    let w = stack.layer(l).data();
    let mut a = vec![0.0; t * t];
    for head in 0..h {
        for (o, v) in a.iter_mut().zip(&w[head * t * t..(head + 1) * t * t]) {
            *o += v / h as f64;
        }
    }
    match mode {
        LayerNormalization::RowMean => {
            for row in a.chunks_exact_mut(t) {
                let m = row.iter().sum::<f64>() / t as f64;
                if m <= 0.0 {
                    return Err(Error::Invalid("zero attention row".into()));
                }
                row.iter_mut().for_each(|v| *v /= m);
            }
        }
        LayerNormalization::GlobalMean => {
            let m = a.iter().sum::<f64>() / (t * t) as f64;
            a.iter_mut().for_each(|v| *v /= m);
        }
    }
    Tensor::new(vec![t, t], a)
}

fn matmul_sq(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut c = vec![0.0; t * t];
    for i in 0..t {
        for k in 0..t {
            let aik = a[i * t + k];
            for j in 0..t {
                c[i * t + j] += aik * b[k * t + j];
            }
        }
    }
    c
}

/// `G = G_{L-1} · … · G_1`.
pub fn attention_rollup(stack: &AttentionStack, mode: LayerNormalization) -> Result<Tensor<f64>> {
    let t = stack.tokens();
    let mut g = layer_attention_normalize(stack, 1, mode)?.into_data();
    for l in 2..=stack.depth() {
        let gl = layer_attention_normalize(stack, l, mode)?;
        g = matmul_sq(gl.data(), &g, t);
    }
    Tensor::new(vec![t, t], g)
}

/// `Ḡ`: the chosen mean of `G` with the cls entry dropped, divided by its
/// maximum.
pub fn patch_importance(g: &Tensor<f64>, reduction: ImportanceReduction) -> Result<Vec<f64>> {
    let [t, t2] = *g.shape() else {
        return Err(Error::Invalid("rollup matrix must be square".into()));
    };
    if t != t2 || t < 2 {
        return Err(Error::Invalid("rollup matrix must be square with at least one patch".into()));
    }
    let d = g.data();
    let means: Vec<f64> = (1..t)
        .map(|j| match reduction {
            ImportanceReduction::ColumnMean => (0..t).map(|i| d[i * t + j]).sum::<f64>() / t as f64,
            ImportanceReduction::RowMean => d[j * t..(j + 1) * t].iter().sum::<f64>() / t as f64,
        })
        .collect();
    let mx = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(mx > 0.0) {
        return Err(Error::Invalid("patch importance maximum is not positive".into()));
    }
    Ok(means.iter().map(|m| m / mx).collect())
}

/// `[cls; Ḡ_j · z_j]` for a `[T, D]` token matrix.
pub fn weighted_tokens(z: &Tensor<f64>, importance: &[f64]) -> Result<Tensor<f64>> {
    let [t, d] = *z.shape() else {
        return Err(Error::Invalid("tokens must be [T, D]".into()));
    };
    if importance.len() + 1 != t {
        return Err(Error::Invalid(format!(
            "{} importances for {} patch tokens",
            importance.len(),
            t - 1
        )));
    }
    let mut out = z.data().to_vec();
    for (j, &g) in importance.iter().enumerate() {
        out[(j + 1) * d..(j + 2) * d].iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(vec![t, d], out)
}

pub fn tape_layer_normalize<T: Real>(tape: &mut Tape<T>, attn: Var, mode: LayerNormalization) -> Result<Var> {
    let a = tape.mean_axis(attn, 1, false)?;
    let m = match mode {
        LayerNormalization::RowMean => tape.mean_axis(a, 2, true)?,
        LayerNormalization::GlobalMean => {
            let r = tape.mean_axis(a, 2, true)?;
            tape.mean_axis(r, 1, true)?
        }
    };
    tape.div(a, m)
}

/// Batched rollup of `[B, T, T]` layer matrices given in layer order.
pub fn tape_rollup<T: Real>(tape: &mut Tape<T>, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::Invalid("no layers to roll up".into()))?;
    let mut g = first;
    for &gl in rest {
        g = tape.matmul(gl, g)?;
    }
    Ok(g)
}

/// `[B, T, T] -> [B, T - 1]`.
pub fn tape_importance<T: Real>(tape: &mut Tape<T>, g: Var, reduction: ImportanceReduction) -> Result<Var> {
    let t = tape.shape(g)[1];
    let axis = match reduction {
        ImportanceReduction::ColumnMean => 1,
        ImportanceReduction::RowMean => 2,
    };
    let m = tape.mean_axis(g, axis, false)?;
    let patches = tape.narrow(m, 1, 1, t - 1)?;
    let mx = tape.max_axis(patches, 1, true)?;
    tape.div(patches, mx)
}

/// `[B, T, D]` tokens with patch rows scaled by `[B, T - 1]` importances.
pub fn tape_weighted_tokens<T: Real>(tape: &mut Tape<T>, z: Var, importance: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let cls = tape.narrow(z, 1, 0, 1)?;
    let patches = tape.narrow(z, 1, 1, t - 1)?;
    let g = tape.reshape(importance, &[b, t - 1, 1])?;
    let scaled = tape.mul(patches, g)?;
    tape.concat(&[cls, scaled], 1)
}
