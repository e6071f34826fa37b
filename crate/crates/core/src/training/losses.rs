//! Stage-1 and Stage-2 objectives, as graph ops plus plain-value twins.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::TokenLayout;
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Graph, Tensor, Var, MASK_VALUE};
use crate::scoring::{check_ratio, dtopk, retain_count, topk_retain};

/// Default floor for `log P` in soft mode.
pub const BIAS_CLAMP: f64 = -30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    Naive,
    #[default]
    Contrastive,
}

/// Mean squared error between predicted scores and attention labels.
pub fn stage1_loss_value(scores: &[f64], labels: &[f64]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len() && !scores.is_empty(),
        Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        ))
    );
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / scores.len() as f64)
}

pub fn stage1_loss(g: &mut Graph, scores: Var, labels: Var) -> Result<Var> {
    g.mse(scores, labels)
}

pub fn sigmoid_probs(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| sigmoid(s)).collect()
}

/// `max(ln P, clamp)`.
pub fn log_bias(p: &[f64], clamp: f64) -> Vec<f64> {
    p.iter().map(|&v| v.ln().max(clamp)).collect()
}

/// Additive `[n, n]` attention mask: causal base plus the per-key bias,
/// the latter only below the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub matrix: Tensor,
    /// Bias per sequence position; zero outside the visual block.
    pub bias: Vec<f64>,
}

pub fn build_soft_mask(b_visual: &[f64], layout: &TokenLayout) -> Result<SoftMask> {
    ensure!(
        b_visual.len() == layout.n_v,
        Error::Shape(format!(
            "{} biases for {} visual tokens",
            b_visual.len(),
            layout.n_v
        ))
    );
    let n = layout.n;
    let mut bias = vec![0.0; n];
    bias[layout.visual_range()].copy_from_slice(b_visual);
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = match j.cmp(&i) {
                std::cmp::Ordering::Greater => MASK_VALUE,
                std::cmp::Ordering::Less => bias[j],
                std::cmp::Ordering::Equal => 0.0,
            };
        }
    }
    Ok(SoftMask {
        matrix: Tensor::new(vec![n, n], m)?,
        bias,
    })
}

/// `|r - mean(P)|`.
pub fn reg_naive_value(p: &[f64], r: f64) -> f64 {
    (r - p.iter().sum::<f64>() / p.len() as f64).abs()
}

/// High and low index sets used by the contrastive regularizer.
pub fn contrastive_split(p: &[f64], r: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_ratio(r)?;
    let n_v = p.len();
    ensure!(
        n_v >= 2,
        Error::InvalidArgument("contrastive split needs at least 2 tokens".into())
    );
    let k = ((r * n_v as f64).floor() as usize).min(n_v);
    ensure!(
        k >= 1 && k < n_v,
        Error::InvalidArgument(format!("degenerate split: {k} high of {n_v} at r = {r}"))
    );
    debug_assert_eq!(k, retain_count(r, n_v)?);
    Ok((topk_retain(p, r)?, dtopk(p, n_v - k)?))
}

/// `|1 - (mean(P_high) - mean(P_low))|`.
pub fn reg_contrastive_value(p: &[f64], r: f64) -> Result<f64> {
    let (hi, lo) = contrastive_split(p, r)?;
    let mean = |idx: &[usize]| idx.iter().map(|&i| p[i]).sum::<f64>() / idx.len() as f64;
    Ok((1.0 - (mean(&hi) - mean(&lo))).abs())
}

/// Regularizer averaged over the rows of `p[batch, n_v]`.
pub fn regularizer(g: &mut Graph, p: Var, r: f64, kind: RegKind) -> Result<Var> {
    check_ratio(r)?;
    let shape = g.shape(p).to_vec();
    ensure!(
        shape.len() == 2,
        Error::Shape(format!("probabilities {shape:?}, expected [batch, n_v]"))
    );
    let (batch, n_v) = (shape[0], shape[1]);
    let mut terms = Vec::with_capacity(batch);
    for b in 0..batch {
        let base = b * n_v;
        let term = match kind {
            RegKind::Naive => {
                let row = g.gather(p, &(base..base + n_v).collect::<Vec<_>>())?;
                let m = g.mean(row);
                let d = g.add_scalar(m, -r);
                g.abs(d)
            }
            RegKind::Contrastive => {
                let values = g.value(p).row(b).to_vec();
                let (hi, lo) = contrastive_split(&values, r)?;
                let hv = g.gather(p, &hi.iter().map(|i| base + i).collect::<Vec<_>>())?;
                let lv = g.gather(p, &lo.iter().map(|i| base + i).collect::<Vec<_>>())?;
                let hm = g.mean(hv);
                let lm = g.mean(lv);
                let margin = g.sub(hm, lm)?;
                let neg = g.scale(margin, -1.0);
                let d = g.add_scalar(neg, 1.0);
                g.abs(d)
            }
        };
        terms.push(g.reshape(term, &[1])?);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.mean(all))
}

/// Cross-entropy over supervised rows plus `k` times the regularizer.
/// Returns `(total, ce, reg)`.
pub fn stage2_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[Option<usize>],
    p: Var,
    r: f64,
    k: f64,
    kind: RegKind,
) -> Result<(Var, Var, Var)> {
    ensure!(
        k >= 0.0,
        Error::InvalidArgument(format!("regularizer weight {k} < 0"))
    );
    let ce = g.cross_entropy(logits, targets)?;
    let reg = regularizer(g, p, r, kind)?;
    let weighted = g.scale(reg, k);
    let total = g.add(ce, weighted)?;
    Ok((total, ce, reg))
}
