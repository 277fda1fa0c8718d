//! Cross-modal contrastive loss, cross-entropy and their blend.
//!
//! For anchor `i` the contrastive term is
//! `−log exp(s_ii/τ) / (Σ_{k≠i} exp(s(dy_i, fo_k)/τ) + Σ_k exp(s(dy_k, fo_i)/τ))`.
//! The mirrored anchor has the same denominator, so both directions agree
//! and the symmetrized loss is their common mean. Exponents are taken
//! relative to the positive logit, which makes a single-sample batch
//! evaluate to exactly `ln 1 = 0`.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_temperature(self.temperature)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Dynamic,
    FlowOs,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine_sim", "zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Paired modality features, `B x K` each.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<'a> {
    pub dy: &'a [Vec<f64>],
    pub flow_os: &'a [Vec<f64>],
    pub temperature: f64,
}

impl ContrastiveBatch<'_> {
    fn validate(&self) -> Result<usize> {
        check_temperature(self.temperature)?;
        let b = self.dy.len();
        if b == 0 || self.flow_os.len() != b {
            return Err(Error::Invalid(format!(
                "contrastive batch needs equal non-zero row counts, got {} and {}",
                b,
                self.flow_os.len()
            )));
        }
        Ok(b)
    }
}

/// Loss of anchor `i` (0-based) in the given direction.
pub fn contrastive_anchor_loss(batch: &ContrastiveBatch<'_>, i: usize, anchor: Anchor) -> Result<f64> {
    let b = batch.validate()?;
    if i >= b {
        return Err(Error::Invalid(format!("anchor {i} outside batch of {b}")));
    }
    let tau = batch.temperature;
    let (own, other) = match anchor {
        Anchor::Dynamic => (batch.dy, batch.flow_os),
        Anchor::FlowOs => (batch.flow_os, batch.dy),
    };
    let pos = cosine_sim(&own[i], &other[i])? / tau;
    let mut rest = 0.0;
    for k in 0..b {
        if k != i {
            rest += (cosine_sim(&own[i], &other[k])? / tau - pos).exp();
            rest += (cosine_sim(&own[k], &other[i])? / tau - pos).exp();
        }
    }
    Ok(rest.ln_1p())
}

/// `1/(2B) Σ_i (L_i,dy + L_i,flow)`.
pub fn contrastive_loss(batch: &ContrastiveBatch<'_>) -> Result<f64> {
    let b = batch.validate()?;
    let mut total = 0.0;
    for i in 0..b {
        total += contrastive_anchor_loss(batch, i, Anchor::Dynamic)?;
        total += contrastive_anchor_loss(batch, i, Anchor::FlowOs)?;
    }
    Ok(total / (2 * b) as f64)
}

/// Mean max-stabilized softmax cross-entropy.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Invalid(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {y} out of range for {} classes", row.len()),
            ));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// `(1 − α)·con + α·ce`.
pub fn total_loss(ce: f64, con: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(ce);
    }
    if alpha == 0.0 {
        return Ok(con);
    }
    Ok((1.0 - alpha) * con + alpha * ce)
}

/// Row-wise L2 normalization of a `[B, K]` matrix.
fn tape_normalize_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ss = tape.sum_axis(sq, 1, true)?;
    let n = tape.sqrt(ss)?;
    tape.div(x, n).map_err(|_| Error::domain("cosine_sim", "zero vector"))
}

/// Contrastive loss of `[B, K]` feature matrices on a tape.
pub fn tape_contrastive_loss<T: Real>(tape: &mut Tape<T>, dy: Var, flow: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let (sd, sf) = (tape.shape(dy).to_vec(), tape.shape(flow).to_vec());
    if sd.len() != 2 || sd != sf {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: sd,
            rhs: sf,
        });
    }
    let b = sd[0];
    let a = tape_normalize_rows(tape, dy)?;
    let f = tape_normalize_rows(tape, flow)?;
    let ft = tape.transpose_last2(f)?;
    let s = tape.matmul(a, ft)?;
    let s = tape.mul_scalar(s, T::from_f64_lossy(1.0 / temperature))?;
    let eye = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { T::one() } else { T::zero() }));
    let s_diag = tape.mul(s, eye)?;
    let s_ii = tape.sum_axis(s_diag, 1, false)?;
    let by_row = tape.reshape(s_ii, &[b, 1])?;
    let by_col = tape.reshape(s_ii, &[1, b])?;
    let r = tape.sub(s, by_row)?;
    let c = tape.sub(s, by_col)?;
    let er = tape.exp(r)?;
    let ec = tape.exp(c)?;
    let er_diag = tape.mul(er, eye)?;
    let er_ii = tape.sum_axis(er_diag, 1, false)?;
    let rows = tape.sum_axis(er, 1, false)?;
    let cols = tape.sum_axis(ec, 0, false)?;
    let denom = tape.sub(rows, er_ii)?;
    let denom = tape.add(denom, cols)?;
    let per = tape.log(denom)?;
    tape.mean(per)
}

/// `(1 − α)·con + α·ce` on a tape.
pub fn tape_total_loss<T: Real>(tape: &mut Tape<T>, ce: Var, con: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(ce);
    }
    if alpha == 0.0 {
        return Ok(con);
    }
    let a = tape.mul_scalar(ce, T::from_f64_lossy(alpha))?;
    let c = tape.mul_scalar(con, T::from_f64_lossy(1.0 - alpha))?;
    tape.add(a, c)
}
