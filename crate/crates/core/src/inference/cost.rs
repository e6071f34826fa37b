//! Analytic prefill cost.
//!
//! Per decoder layer, with `n` query rows, `n_kv` key rows, hidden size `d`
//! and MLP width `f`:
//!
//! ```text
//! attention    2 * n * n_kv * d * 2   (scores and weighted values)
//! projections  8 * n * d^2            (q, k, v, o at 2 * n * d^2 each)
//! mlp          4 * n * d * f          (two matmuls at 2 * n * d * f each)
//! ```
//!
//! Grouped key/value heads, norms, softmax and the output head are not
//! counted, and prefill uses the full square `n_kv = n`. All arithmetic is in
//! `u64`, so counts are exact and reproducible.

use crate::model::ModelConfig;

pub fn layer_flops(n: u64, n_kv: u64, cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let f = cfg.intermediate as u64;
    2 * n * n_kv * d * 2 + 8 * n * d * d + 4 * n * d * f
}

/// Every decoder layer over `n_prefill` rows attending to `n_kv` keys.
pub fn flops_model(n_prefill: usize, n_kv: usize, cfg: &ModelConfig) -> u64 {
    cfg.decoder_layers as u64 * layer_flops(n_prefill as u64, n_kv as u64, cfg)
}

/// Prefill with pruned rows dropped from layer `l_p` on, scored from layer `l_g`.
///
/// - `l_g < l_p`: one pass, rows are dropped before layer `l_p` runs.
/// - `l_g == l_p`: one pass, layer `l_p` runs on every row (its attention is
///   the guide) and the pruned entries are then evicted from its cache.
/// - `l_g > l_p`: layers `0..=l_g` run on every row for scoring, then layers
///   `l_p..` run again on the kept rows.
pub fn layer_prune_flops(n: usize, kept: usize, l_p: usize, l_g: usize, cfg: &ModelConfig) -> u64 {
    let full = layer_flops(n as u64, n as u64, cfg);
    let pruned = layer_flops(kept as u64, kept as u64, cfg);
    let layers = cfg.decoder_layers as u64;
    let (l_p, l_g) = (l_p as u64, l_g as u64);
    match l_g.cmp(&l_p) {
        std::cmp::Ordering::Less => l_p * full + (layers - l_p) * pruned,
        std::cmp::Ordering::Equal => (l_p + 1) * full + (layers - l_p - 1) * pruned,
        std::cmp::Ordering::Greater => (l_g + 1) * full + (layers - l_p) * pruned,
    }
}

/// KV entries held after a prefill that keeps `kept` of `n` rows from layer `l_p` on.
pub fn kv_entries_closed_form(n: usize, kept: usize, l_p: usize, cfg: &ModelConfig) -> u64 {
    let kv = cfg.kv_heads as u64;
    l_p as u64 * kv * n as u64 + (cfg.decoder_layers - l_p) as u64 * kv * kept as u64
}
