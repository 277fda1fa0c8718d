//! Every differentiable tape operation as a finite-difference case.

use msmmt_core::diffmath::{Tape, Tensor, Var};
use msmmt_core::losses::{tape_contrastive_loss, tape_total_loss};
use msmmt_core::msmmt::{
    tape_importance, tape_layer_normalize, tape_rollup, tape_weighted_tokens, ImportanceReduction, LayerNormalization,
};
use msmmt_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rand_tensor;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub build: fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
}

fn two(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]) -> Vec<Tensor<f64>> {
    vec![rand_tensor(rng, a, -1.0, 1.0), rand_tensor(rng, b, -1.0, 1.0)]
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape, 0.5, 2.0)
}

/// Values at least 0.05 away from the kink at zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Softmax rows over `[.., T]` logits.
fn attention(tape: &mut Tape<f64>, logits: Var) -> Result<Var> {
    let r = tape.shape(logits).len();
    tape.softmax(logits, r - 1)
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add (broadcast)",
            inputs: |r| two(r, &[3, 4], &[4]),
            build: |t, v| t.add(v[0], v[1]),
        },
        GradCase {
            name: "sub (broadcast)",
            inputs: |r| two(r, &[2, 3, 4], &[3, 1]),
            build: |t, v| t.sub(v[0], v[1]),
        },
        GradCase {
            name: "mul (broadcast)",
            inputs: |r| two(r, &[3, 1], &[2, 3, 4]),
            build: |t, v| t.mul(v[0], v[1]),
        },
        GradCase {
            name: "div",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), positive(r, &[3, 4])],
            build: |t, v| t.div(v[0], v[1]),
        },
        GradCase {
            name: "pow",
            inputs: |r| vec![positive(r, &[3, 4]), rand_tensor(r, &[4], -1.0, 2.0)],
            build: |t, v| t.pow(v[0], v[1]),
        },
        GradCase {
            name: "scalar add/mul/div",
            inputs: |r| vec![rand_tensor(r, &[5], -1.0, 1.0)],
            build: |t, v| {
                let a = t.add_scalar(v[0], 0.7)?;
                let b = t.mul_scalar(a, -1.3)?;
                t.div_scalar(b, 2.5)
            },
        },
        GradCase {
            name: "neg",
            inputs: |r| vec![rand_tensor(r, &[6], -1.0, 1.0)],
            build: |t, v| t.neg(v[0]),
        },
        GradCase {
            name: "exp",
            inputs: |r| vec![rand_tensor(r, &[6], -2.0, 2.0)],
            build: |t, v| t.exp(v[0]),
        },
        GradCase {
            name: "log",
            inputs: |r| vec![positive(r, &[6])],
            build: |t, v| t.log(v[0]),
        },
        GradCase {
            name: "sqrt",
            inputs: |r| vec![positive(r, &[6])],
            build: |t, v| t.sqrt(v[0]),
        },
        GradCase {
            name: "relu",
            inputs: |r| vec![off_kink(r, &[8])],
            build: |t, v| t.relu(v[0]),
        },
        GradCase {
            name: "gelu",
            inputs: |r| vec![rand_tensor(r, &[30], -3.0, 3.0)],
            build: |t, v| t.gelu(v[0]),
        },
        GradCase {
            name: "matmul",
            inputs: |r| two(r, &[4, 5], &[5, 3]),
            build: |t, v| t.matmul(v[0], v[1]),
        },
        GradCase {
            name: "matmul (batched)",
            inputs: |r| two(r, &[2, 3, 4, 5], &[2, 3, 5, 2]),
            build: |t, v| t.matmul(v[0], v[1]),
        },
        GradCase {
            name: "matmul (broadcast batch)",
            inputs: |r| two(r, &[2, 4, 5], &[5, 3]),
            build: |t, v| t.matmul(v[0], v[1]),
        },
        GradCase {
            name: "softmax (last axis)",
            inputs: |r| vec![rand_tensor(r, &[3, 5], -2.0, 2.0)],
            build: |t, v| t.softmax(v[0], 1),
        },
        GradCase {
            name: "softmax (axis 0)",
            inputs: |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
            build: |t, v| t.softmax(v[0], 0),
        },
        GradCase {
            name: "layernorm",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[2, 3, 6], -2.0, 2.0),
                    rand_tensor(r, &[6], 0.5, 1.5),
                    rand_tensor(r, &[6], -0.5, 0.5),
                ]
            },
            build: |t, v| t.layernorm(v[0], v[1], v[2], 1e-6),
        },
        GradCase {
            name: "sum/mean over axes",
            inputs: |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            build: |t, v| {
                let a = t.sum_axis(v[0], 1, true)?;
                let b = t.mean_axis(v[0], 2, false)?;
                let a = t.reshape(a, &[2, 4])?;
                let b = t.narrow(b, 1, 0, 2)?;
                let s = t.sum(a)?;
                let m = t.mean(b)?;
                let sm = t.mul(s, m)?;
                let ab = t.matmul(b, a)?;
                let ab = t.transpose_last2(ab)?;
                t.mul(ab, sm)
            },
        },
        GradCase {
            name: "max over axis",
            inputs: |r| vec![rand_tensor(r, &[3, 5], -1.0, 1.0)],
            build: |t, v| t.max_axis(v[0], 1, false),
        },
        GradCase {
            name: "reshape/permute/transpose",
            inputs: |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            build: |t, v| {
                let a = t.permute(v[0], &[2, 0, 1])?;
                let a = t.reshape(a, &[4, 6])?;
                let a = t.transpose_last2(a)?;
                let sq = t.mul(a, a)?;
                t.add(sq, a)
            },
        },
        GradCase {
            name: "concat/narrow",
            inputs: |r| two(r, &[2, 3], &[2, 2]),
            build: |t, v| {
                let c = t.concat(&[v[0], v[1], v[0]], 1)?;
                let n = t.narrow(c, 1, 2, 4)?;
                t.mul(n, n)
            },
        },
        GradCase {
            name: "cross_entropy",
            inputs: |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
            build: |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]),
        },
        GradCase {
            name: "attention normalize (row mean)",
            inputs: |r| vec![rand_tensor(r, &[2, 3, 5, 5], -2.0, 2.0)],
            build: |t, v| {
                let a = attention(t, v[0])?;
                tape_layer_normalize(t, a, LayerNormalization::RowMean)
            },
        },
        GradCase {
            name: "attention normalize (global mean)",
            inputs: |r| vec![rand_tensor(r, &[2, 3, 5, 5], -2.0, 2.0)],
            build: |t, v| {
                let a = attention(t, v[0])?;
                tape_layer_normalize(t, a, LayerNormalization::GlobalMean)
            },
        },
        GradCase {
            name: "rollup + importance + weighted tokens",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[2, 2, 5, 5], -2.0, 2.0),
                    rand_tensor(r, &[2, 2, 5, 5], -2.0, 2.0),
                    rand_tensor(r, &[2, 5, 3], -1.0, 1.0),
                ]
            },
            build: |t, v| {
                let a1 = attention(t, v[0])?;
                let a2 = attention(t, v[1])?;
                let g1 = tape_layer_normalize(t, a1, LayerNormalization::RowMean)?;
                let g2 = tape_layer_normalize(t, a2, LayerNormalization::RowMean)?;
                let g = tape_rollup(t, &[g1, g2])?;
                let imp = tape_importance(t, g, ImportanceReduction::ColumnMean)?;
                tape_weighted_tokens(t, v[2], imp)
            },
        },
        GradCase {
            name: "importance (row mean)",
            inputs: |r| vec![rand_tensor(r, &[2, 2, 4, 4], -2.0, 2.0)],
            build: |t, v| {
                let a = attention(t, v[0])?;
                let g = tape_layer_normalize(t, a, LayerNormalization::GlobalMean)?;
                tape_importance(t, g, ImportanceReduction::RowMean)
            },
        },
        GradCase {
            name: "contrastive loss",
            inputs: |r| two(r, &[4, 6], &[4, 6]),
            build: |t, v| tape_contrastive_loss(t, v[0], v[1], 0.1),
        },
        GradCase {
            name: "total loss",
            inputs: |r| vec![rand_tensor(r, &[3, 3], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
            build: |t, v| {
                let ce = t.cross_entropy(v[0], &[2, 0, 1])?;
                let con = tape_contrastive_loss(t, v[1], v[2], 0.5)?;
                tape_total_loss(t, ce, con, 0.3)
            },
        },
    ]
}
