//! Score post-processing: top-k retention, bottom-k complement and
//! attention-mass labels.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{AttentionCapture, TokenLayout};

/// Retained count for reserve ratio `r` over `n_v` tokens: `max(1, floor(r * n_v))`.
pub fn retain_count(r: f64, n_v: usize) -> Result<usize> {
    check_ratio(r)?;
    Ok(((r * n_v as f64).floor() as usize).clamp(1, n_v.max(1)))
}

pub(crate) fn check_ratio(r: f64) -> Result<()> {
    ensure!(
        r > 0.0 && r <= 1.0,
        Error::InvalidArgument(format!("reserve ratio {r} outside (0, 1]"))
    );
    Ok(())
}

/// Indices sorted by value descending, ties to the lower index.
fn rank_desc(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| {
        s[b].partial_cmp(&s[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Indices of the `max(1, floor(r * n_v))` largest scores, ascending.
pub fn topk_retain(scores: &[f64], r: f64) -> Result<Vec<usize>> {
    ensure!(
        !scores.is_empty(),
        Error::InvalidArgument("no visual tokens to rank".into())
    );
    let k = retain_count(r, scores.len())?;
    let mut keep = rank_desc(scores)[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Indices of the `m` smallest values, ascending.
///
/// Ties go to the lower index. This ranking is the exact reverse of
/// [`topk_retain`]'s, so `topk_retain` with `k` and `dtopk` with `n - k`
/// partition the indices.
pub fn dtopk(p: &[f64], m: usize) -> Result<Vec<usize>> {
    ensure!(
        m <= p.len(),
        Error::InvalidArgument(format!("dtopk count {m} exceeds {} values", p.len()))
    );
    let order = rank_desc(p);
    let mut low = order[p.len() - m..].to_vec();
    low.sort_unstable();
    Ok(low)
}

/// Query rows summed over when turning captured attention into labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Queries `j` in `[n - n_v, n)`.
    LiteralFinalSpan,
    /// Every query after the visual block.
    #[default]
    TextQueries,
    /// Every query.
    AllQueries,
}

impl LabelMode {
    pub fn query_range(self, layout: &TokenLayout) -> std::ops::Range<usize> {
        match self {
            LabelMode::LiteralFinalSpan => layout.n - layout.n_v..layout.n,
            LabelMode::TextQueries => layout.visual_range().end..layout.n,
            LabelMode::AllQueries => 0..layout.n,
        }
    }
}

/// Per-visual-token attention mass received from the selected queries,
/// summed over heads; divided by `heads * queries` when `normalize`.
pub fn accumulate_attention_labels(
    capture: &AttentionCapture,
    layout: &TokenLayout,
    mode: LabelMode,
    normalize: bool,
) -> Result<Vec<f64>> {
    let s = capture.weights.shape();
    ensure!(
        s.len() == 3 && s[1] == layout.n && s[2] == layout.n,
        Error::Shape(format!("capture {:?} for sequence of {}", s, layout.n))
    );
    layout.require_visual()?;
    let (h, n) = (s[0], s[2]);
    let queries = mode.query_range(layout);
    ensure!(
        !queries.is_empty(),
        Error::InvalidArgument(format!("{mode:?} selects no queries for {layout:?}"))
    );
    let vis = layout.visual_range();
    let mut labels = vec![0.0; layout.n_v];
    let w = capture.weights.data();
    for head in 0..h {
        for j in queries.clone() {
            let row = &w[(head * n + j) * n..(head * n + j + 1) * n];
            for (l, a) in labels.iter_mut().zip(&row[vis.clone()]) {
                *l += a;
            }
        }
    }
    if normalize {
        let denom = (h * queries.len()) as f64;
        for l in labels.iter_mut() {
            *l /= denom;
        }
    }
    Ok(labels)
}
