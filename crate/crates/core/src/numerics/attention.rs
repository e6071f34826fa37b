//! Grouped-key/value scaled dot-product attention with additive masks.
//!
//! Activations are row-major `[tokens, heads * head_dim]`. Query head `h`
//! reads key/value head `h / (heads / kv_heads)`.

use super::kernels::{gemm, softmax_row_inplace, MASK_VALUE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / (self.heads / self.kv_heads)
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Masking applied to one sequence's `nq × nk` score block.
///
/// Query `i` sits at absolute position `i + (nk - nq)` within the keys, so a
/// single decode query sees every cached key under causal visibility.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreMask<'a> {
    pub causal: bool,
    /// Additive `nq × nk` mask.
    pub dense: Option<&'a [f64]>,
    /// Per-key additive bias applied only where key index < query position.
    pub key_bias: Option<&'a [f64]>,
}

impl ScoreMask<'_> {
    fn apply(&self, scores: &mut [f64], nq: usize, nk: usize) {
        let offset = nk - nq;
        for i in 0..nq {
            let row = &mut scores[i * nk..(i + 1) * nk];
            let qpos = i + offset;
            if let Some(dense) = self.dense {
                for (s, m) in row.iter_mut().zip(&dense[i * nk..(i + 1) * nk]) {
                    *s += m;
                }
            }
            if let Some(bias) = self.key_bias {
                for j in 0..qpos.min(nk) {
                    row[j] += bias[j];
                }
            }
            if self.causal {
                for s in row.iter_mut().skip(qpos + 1) {
                    *s += MASK_VALUE;
                }
            }
        }
    }
}

/// Forward attention for one sequence. Writes `out[nq, heads*head_dim]` and,
/// when given, the post-softmax weights `probs[heads, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    layout: HeadLayout,
    mask: ScoreMask<'_>,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let hd = layout.head_dim;
    let qw = layout.q_width();
    let kw = layout.kv_width();
    let scale = layout.scale();
    let mut scores = vec![0.0; nq * nk];
    for h in 0..layout.heads {
        let kvh = layout.kv_head_of(h);
        gemm(
            nq,
            hd,
            nk,
            &q[h * hd..],
            qw,
            1,
            &k[kvh * hd..],
            1,
            kw,
            0.0,
            &mut scores,
            nk,
            1,
        );
        for s in scores.iter_mut() {
            *s *= scale;
        }
        mask.apply(&mut scores, nq, nk);
        for row in scores.chunks_mut(nk) {
            softmax_row_inplace(row);
        }
        gemm(
            nq,
            nk,
            hd,
            &scores,
            nk,
            1,
            &v[kvh * hd..],
            kw,
            1,
            0.0,
            &mut out[h * hd..],
            qw,
            1,
        );
        if let Some(p) = probs.as_deref_mut() {
            p[h * nq * nk..(h + 1) * nq * nk].copy_from_slice(&scores);
        }
    }
}

/// Gradients of one square (`nq = nk = n`) attention block, accumulated into
/// `dq`, `dk`, `dv` and optionally the strict per-key bias gradient `dbias[n]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    layout: HeadLayout,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) {
    let hd = layout.head_dim;
    let qw = layout.q_width();
    let kw = layout.kv_width();
    let scale = layout.scale();
    let mut dp = vec![0.0; n * n];
    for h in 0..layout.heads {
        let kvh = layout.kv_head_of(h);
        let p = &probs[h * n * n..(h + 1) * n * n];
        // dP = dOut_h · V_hᵀ
        gemm(
            n,
            hd,
            n,
            &dout[h * hd..],
            qw,
            1,
            &v[kvh * hd..],
            1,
            kw,
            0.0,
            &mut dp,
            n,
            1,
        );
        // dV_h += Pᵀ · dOut_h
        gemm(
            n,
            n,
            hd,
            p,
            1,
            n,
            &dout[h * hd..],
            qw,
            1,
            1.0,
            &mut dv[kvh * hd..],
            kw,
            1,
        );
        // dS = P ∘ (dP − rowsum(P ∘ dP)), folded with the score scale.
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
            if let Some(db) = dbias.as_deref_mut() {
                for j in 0..i {
                    db[j] += dr[j];
                }
            }
        }
        for d in dp.iter_mut() {
            *d *= scale;
        }
        // dQ_h += dS · K_h ; dK_h += dSᵀ · Q_h
        gemm(
            n,
            n,
            hd,
            &dp,
            n,
            1,
            &k[kvh * hd..],
            kw,
            1,
            1.0,
            &mut dq[h * hd..],
            qw,
            1,
        );
        gemm(
            n,
            n,
            hd,
            &dp,
            1,
            n,
            &q[h * hd..],
            qw,
            1,
            1.0,
            &mut dk[kvh * hd..],
            kw,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    /// Direct per-head evaluation with explicit loops.
    fn naive(q: &[f64], k: &[f64], v: &[f64], n: usize, l: HeadLayout, causal: bool) -> Vec<f64> {
        let hd = l.head_dim;
        let mut out = vec![0.0; n * l.q_width()];
        for h in 0..l.heads {
            let g = l.kv_head_of(h);
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| {
                        if causal && j > i {
                            return MASK_VALUE;
                        }
                        (0..hd)
                            .map(|t| {
                                q[i * l.q_width() + h * hd + t] * k[j * l.kv_width() + g * hd + t]
                            })
                            .sum::<f64>()
                            * l.scale()
                    })
                    .collect();
                softmax_row_inplace(&mut s);
                for t in 0..hd {
                    out[i * l.q_width() + h * hd + t] = (0..n)
                        .map(|j| s[j] * v[j * l.kv_width() + g * hd + t])
                        .sum();
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_evaluation_with_grouped_heads() {
        let mut rng = Rng::new(11);
        let l = HeadLayout {
            heads: 4,
            kv_heads: 2,
            head_dim: 3,
        };
        let n = 6;
        let q = random(&mut rng, n * l.q_width());
        let k = random(&mut rng, n * l.kv_width());
        let v = random(&mut rng, n * l.kv_width());
        for causal in [false, true] {
            let mut out = vec![0.0; n * l.q_width()];
            attention_forward(
                &q,
                &k,
                &v,
                n,
                n,
                l,
                ScoreMask {
                    causal,
                    ..Default::default()
                },
                &mut out,
                None,
            );
            let expect = naive(&q, &k, &v, n, l, causal);
            let err = out
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "causal={causal} err={err}");
        }
    }

    #[test]
    fn decode_query_matches_last_prefill_row() {
        let mut rng = Rng::new(5);
        let l = HeadLayout {
            heads: 2,
            kv_heads: 1,
            head_dim: 4,
        };
        let n = 5;
        let q = random(&mut rng, n * l.q_width());
        let k = random(&mut rng, n * l.kv_width());
        let v = random(&mut rng, n * l.kv_width());
        let causal = ScoreMask {
            causal: true,
            ..Default::default()
        };
        let mut full = vec![0.0; n * l.q_width()];
        attention_forward(&q, &k, &v, n, n, l, causal, &mut full, None);
        let mut last = vec![0.0; l.q_width()];
        attention_forward(
            &q[(n - 1) * l.q_width()..],
            &k,
            &v,
            1,
            n,
            l,
            causal,
            &mut last,
            None,
        );
        let err = last
            .iter()
            .zip(&full[(n - 1) * l.q_width()..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-13);
    }
}
