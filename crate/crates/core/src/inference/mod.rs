//! Pruned deployment: score, prune, prefill, decode, and measure.

mod bench;
mod cost;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{bench_sweep, write_csv, BenchCase, BenchOptions, BenchRow, CSV_COLUMNS};
pub use cost::{flops_model, kv_entries_closed_form, layer_flops, layer_prune_flops};

use crate::data::{DataConfig, NeedleSample};
use crate::error::{ensure, Error, Result};
use crate::model::{Classifier, ForwardOptions, KvCache, Lvlm, Prefill, TokenLayout};
use crate::numerics::{mix_seed, Rng, Tensor};
use crate::scoring::{
    accumulate_attention_labels, check_ratio, retain_count, topk_retain, LabelMode,
};

/// Bytes per cached key or value element.
pub const KV_ELEM_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PruneMode {
    /// Classifier scores, pruning before the first decoder layer.
    CovipalPreLlm,
    /// Attention-guided eviction inside the decoder.
    LayerPrune {
        l_p: usize,
        l_g: usize,
    },
    Random,
    /// Ground-truth signal tokens ranked first.
    Oracle,
    None,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneMode::CovipalPreLlm => f.write_str("covipal-pre-llm"),
            PruneMode::LayerPrune { l_p, l_g } => write!(f, "layer-prune({l_p},{l_g})"),
            PruneMode::Random => f.write_str("random"),
            PruneMode::Oracle => f.write_str("oracle"),
            PruneMode::None => f.write_str("none"),
        }
    }
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown prune mode `{s}`"));
        Ok(match s.trim() {
            "covipal-pre-llm" | "covipal" => PruneMode::CovipalPreLlm,
            "random" => PruneMode::Random,
            "oracle" => PruneMode::Oracle,
            "none" => PruneMode::None,
            other => {
                let inner = other
                    .strip_prefix("layer-prune(")
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or_else(bad)?;
                let (a, b) = inner.split_once(',').ok_or_else(bad)?;
                PruneMode::LayerPrune {
                    l_p: a.trim().parse().map_err(|_| bad())?,
                    l_g: b.trim().parse().map_err(|_| bad())?,
                }
            }
        })
    }
}

impl TryFrom<String> for PruneMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PruneMode> for String {
    fn from(m: PruneMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub r: f64,
    pub mode: PruneMode,
    /// Seed for random mode; mixed with each sample's seed.
    pub seed: u64,
    /// Attention aggregation for layer-prune scores.
    pub label_mode: LabelMode,
    pub normalize: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            r: 0.25,
            mode: PruneMode::CovipalPreLlm,
            seed: 0,
            label_mode: LabelMode::TextQueries,
            normalize: true,
        }
    }
}

impl PruneConfig {
    pub fn new(mode: PruneMode, r: f64) -> Self {
        PruneConfig {
            mode,
            r,
            ..PruneConfig::default()
        }
    }

    pub fn validate(&self, decoder_layers: usize) -> Result<()> {
        check_ratio(self.r)?;
        if let PruneMode::LayerPrune { l_p, l_g } = self.mode {
            for index in [l_p, l_g] {
                ensure!(
                    index < decoder_layers,
                    Error::LayerOutOfRange {
                        index,
                        layers: decoder_layers
                    }
                );
            }
        }
        Ok(())
    }
}

/// Index of the largest value, the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A prompt after pre-decoder pruning.
#[derive(Clone, Debug)]
pub struct PrunedSequence {
    /// `[rows, hidden]` embeddings of the surviving tokens.
    pub embeds: Tensor,
    /// Original position of every surviving token.
    pub positions: Vec<usize>,
    /// Retained indices within the visual block, ascending.
    pub retained: Vec<usize>,
    /// Layout of the unpruned prompt.
    pub layout: TokenLayout,
    /// Time spent scoring and selecting, for classifier modes.
    pub classifier_ms: Option<f64>,
}

impl PrunedSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Raw classifier scores for the visual tokens of a sample's prompt.
pub fn classifier_scores(
    lvlm: &Lvlm,
    classifier: &Classifier,
    sample: &NeedleSample,
    dcfg: &DataConfig,
) -> Result<Vec<f64>> {
    let h_v = lvlm.encode_vision(&sample.patches)?;
    let h_t = lvlm.embed_tokens(&sample.text_ids(dcfg.vocab(), false))?;
    classifier.score(&h_v, &h_t)
}

fn trained(classifier: Option<&Classifier>) -> Result<&Classifier> {
    let c = classifier.ok_or_else(|| Error::MissingArtifact("classifier checkpoint".into()))?;
    ensure!(!c.is_untrained(), Error::UntrainedClassifier);
    Ok(c)
}

/// Scores, selects and removes visual tokens before the decoder.
pub fn prune_pipeline(
    sample: &NeedleSample,
    lvlm: &Lvlm,
    classifier: Option<&Classifier>,
    dcfg: &DataConfig,
    cfg: &PruneConfig,
) -> Result<PrunedSequence> {
    check_ratio(cfg.r)?;
    let layout = TokenLayout::from_spans(2, sample.patches.rows(), sample.query.len());
    let n_v = layout.n_v;
    let h_v = lvlm.encode_vision(&sample.patches)?;
    let h_t = lvlm.embed_tokens(&sample.text_ids(dcfg.vocab(), false))?;
    let mut classifier_ms = None;
    let retained = match cfg.mode {
        PruneMode::None => (0..n_v).collect(),
        PruneMode::CovipalPreLlm => {
            let c = trained(classifier)?;
            let t0 = Instant::now();
            let scores = c.score(&h_v, &h_t)?;
            let keep = topk_retain(&scores, cfg.r)?;
            classifier_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            keep
        }
        PruneMode::Random => {
            let k = retain_count(cfg.r, n_v)?;
            let mut keep =
                Rng::new(mix_seed(cfg.seed ^ mix_seed(sample.seed))).sample_indices(n_v, k);
            keep.sort_unstable();
            keep
        }
        PruneMode::Oracle => {
            let scores: Vec<f64> = (0..n_v)
                .map(|i| if sample.is_signal(i) { 1.0 } else { 0.0 })
                .collect();
            topk_retain(&scores, cfg.r)?
        }
        PruneMode::LayerPrune { .. } => {
            return Err(Error::InvalidArgument(
                "layer-prune mode runs inside the decoder, use layer_prune_baseline".into(),
            ))
        }
    };
    let full = Lvlm::assemble(&layout, &h_t, &h_v)?;
    let rows = kept_rows(&layout, &retained);
    Ok(PrunedSequence {
        embeds: full.select_rows(&rows),
        positions: rows,
        retained,
        layout,
        classifier_ms,
    })
}

/// Sequence rows that survive when `retained` visual tokens are kept.
fn kept_rows(layout: &TokenLayout, retained: &[usize]) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..layout.visual_offset).collect();
    rows.extend(retained.iter().map(|&i| layout.visual_offset + i));
    rows.extend(layout.visual_offset + layout.n_v..layout.n);
    rows
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub prefill_flops: u64,
    pub prefill_ms: f64,
    /// Absent when nothing was decoded.
    pub decode_tps: Option<f64>,
    /// `kv_heads * cached positions`, summed over layers, after prefill.
    pub kv_entries: u64,
    /// Largest key/value store size reached, in bytes.
    pub kv_bytes: u64,
    pub accuracy: Option<f64>,
    pub classifier_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Greedy prediction from the prefill's last row.
    pub prediction: usize,
    pub cache: KvCache,
    pub metrics: RunMetrics,
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

fn check_room(lvlm: &Lvlm, positions: &[usize], extra: usize) -> Result<()> {
    let max = lvlm.config().max_seq;
    let len = positions.iter().max().map_or(0, |&p| p + 1) + extra;
    ensure!(len <= max, Error::ContextOverflow { len, max });
    Ok(())
}

/// Greedy decoding after a prefill that left `cache` and `last_logits`.
fn decode_from(
    lvlm: &Lvlm,
    mut cache: KvCache,
    last_logits: &[f64],
    next_position: usize,
    max_new_tokens: usize,
) -> Result<(Vec<usize>, KvCache, Option<f64>)> {
    let mut tokens = Vec::with_capacity(max_new_tokens);
    let mut tok = argmax(last_logits);
    let t0 = Instant::now();
    for i in 0..max_new_tokens {
        tokens.push(tok);
        let logits = lvlm.decode_step(&mut cache, tok, next_position + i)?;
        tok = argmax(&logits);
    }
    let secs = t0.elapsed().as_secs_f64();
    let tps = (max_new_tokens > 0).then(|| max_new_tokens as f64 / secs.max(1e-12));
    Ok((tokens, cache, tps))
}

/// Prefills `embeds` at `positions` and greedily generates `max_new_tokens`.
///
/// The first token comes from the prefill; each generated token is then fed
/// back through one decode step, so the cache grows by `max_new_tokens`.
pub fn prefill_and_decode(
    lvlm: &Lvlm,
    embeds: &Tensor,
    positions: &[usize],
    max_new_tokens: usize,
) -> Result<Generation> {
    check_room(lvlm, positions, max_new_tokens)?;
    let t0 = Instant::now();
    let out = lvlm.forward(embeds, positions, &ForwardOptions::default())?;
    let prefill_ms = ms_since(t0);
    let last = out.last_logits().expect("full forward has logits").to_vec();
    let kv_entries = out.cache.entries();
    let next = positions.iter().max().map_or(0, |&p| p + 1);
    let (tokens, cache, decode_tps) = decode_from(lvlm, out.cache, &last, next, max_new_tokens)?;
    let n = positions.len();
    Ok(Generation {
        prediction: argmax(&last),
        tokens,
        metrics: RunMetrics {
            prefill_flops: flops_model(n, n, lvlm.config()),
            prefill_ms,
            decode_tps,
            kv_entries,
            kv_bytes: cache.bytes(KV_ELEM_BYTES),
            accuracy: None,
            classifier_ms: None,
        },
        cache,
    })
}

#[derive(Clone, Debug)]
pub struct LayerPruneRun {
    /// `[rows, vocab]` for the rows that reach the output head.
    pub logits: Tensor,
    pub rows: Vec<usize>,
    /// Retained indices within the visual block, ascending.
    pub retained: Vec<usize>,
    pub cache: KvCache,
    pub metrics: RunMetrics,
}

impl LayerPruneRun {
    pub fn prediction(&self) -> usize {
        argmax(self.logits.row(self.logits.rows() - 1))
    }
}

/// Attention-guided pruning inside the decoder.
///
/// Scores come from the attention captured at layer `l_g`; pruned visual
/// rows are absent from layer `l_p` on, both as queries and in the cache.
/// When `l_g == l_p` the guide layer itself runs on every row and its cache is
/// then evicted. When `l_g > l_p` layers from `l_p` on are run a second time
/// over the kept rows, reusing the cache below `l_p`.
pub fn layer_prune_baseline(
    lvlm: &Lvlm,
    embeds: &Tensor,
    layout: &TokenLayout,
    l_p: usize,
    l_g: usize,
    cfg: &PruneConfig,
) -> Result<LayerPruneRun> {
    let layers = lvlm.config().decoder_layers;
    for index in [l_p, l_g] {
        ensure!(index < layers, Error::LayerOutOfRange { index, layers });
    }
    layout.require_visual()?;
    let positions: Vec<usize> = (0..layout.n).collect();
    let select = |cap: Option<_>| -> Result<(Vec<usize>, Vec<usize>)> {
        let cap = cap.expect("guide layer is captured");
        let scores = accumulate_attention_labels(&cap, layout, cfg.label_mode, cfg.normalize)?;
        let retained = topk_retain(&scores, cfg.r)?;
        let rows = kept_rows(layout, &retained);
        Ok((retained, rows))
    };
    let t0 = Instant::now();
    let mut pf = Prefill::new(lvlm, embeds, &positions)?;
    let (retained, out) = match l_g.cmp(&l_p) {
        std::cmp::Ordering::Less => {
            let cap = pf.run_through(l_g, Some(l_g))?;
            if l_p - 1 > l_g {
                pf.run_through(l_p - 1, None)?;
            }
            let (retained, rows) = select(cap)?;
            pf.evict(&rows)?;
            (retained, pf.finish()?)
        }
        std::cmp::Ordering::Equal => {
            let cap = pf.run_through(l_g, Some(l_g))?;
            let (retained, rows) = select(cap)?;
            pf.evict_with_cache(&rows, l_p)?;
            (retained, pf.finish()?)
        }
        std::cmp::Ordering::Greater => {
            if l_p > 0 {
                pf.run_through(l_p - 1, None)?;
            }
            let mut resume = pf.clone();
            let cap = pf.run_through(l_g, Some(l_g))?;
            drop(pf);
            let (retained, rows) = select(cap)?;
            resume.evict(&rows)?;
            (retained, resume.finish()?)
        }
    };
    let prefill_ms = ms_since(t0);
    let kept = layout.text_len() + retained.len();
    Ok(LayerPruneRun {
        logits: out.logits.expect("finished prefill has logits"),
        rows: out.rows,
        retained,
        metrics: RunMetrics {
            prefill_flops: layer_prune_flops(layout.n, kept, l_p, l_g, lvlm.config()),
            prefill_ms,
            decode_tps: None,
            kv_entries: out.cache.entries(),
            kv_bytes: out.cache.bytes(KV_ELEM_BYTES),
            accuracy: None,
            classifier_ms: None,
        },
        cache: out.cache,
    })
}

/// Layer-prune run followed by greedy decoding.
pub fn layer_prune_and_decode(
    lvlm: &Lvlm,
    embeds: &Tensor,
    layout: &TokenLayout,
    l_p: usize,
    l_g: usize,
    cfg: &PruneConfig,
    max_new_tokens: usize,
) -> Result<Generation> {
    check_room(lvlm, &[layout.n.saturating_sub(1)], max_new_tokens)?;
    let run = layer_prune_baseline(lvlm, embeds, layout, l_p, l_g, cfg)?;
    let prediction = run.prediction();
    let last = run.logits.row(run.logits.rows() - 1).to_vec();
    let (tokens, cache, decode_tps) =
        decode_from(lvlm, run.cache, &last, layout.n, max_new_tokens)?;
    Ok(Generation {
        tokens,
        prediction,
        metrics: RunMetrics {
            decode_tps,
            kv_bytes: cache.bytes(KV_ELEM_BYTES),
            ..run.metrics
        },
        cache,
    })
}

/// One prediction under `cfg`, with the visual indices that were kept.
pub fn predict(
    sample: &NeedleSample,
    lvlm: &Lvlm,
    classifier: Option<&Classifier>,
    dcfg: &DataConfig,
    cfg: &PruneConfig,
) -> Result<(usize, Vec<usize>)> {
    match cfg.mode {
        PruneMode::LayerPrune { l_p, l_g } => {
            let layout = TokenLayout::from_spans(2, sample.patches.rows(), sample.query.len());
            let embeds = lvlm.embed_sequence(
                &layout,
                &sample.text_ids(dcfg.vocab(), false),
                &sample.patches,
            )?;
            let run = layer_prune_baseline(lvlm, &embeds, &layout, l_p, l_g, cfg)?;
            Ok((run.prediction(), run.retained))
        }
        _ => {
            let seq = prune_pipeline(sample, lvlm, classifier, dcfg, cfg)?;
            let g = prefill_and_decode(lvlm, &seq.embeds, &seq.positions, 0)?;
            Ok((g.prediction, seq.retained))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub r: f64,
    pub samples: usize,
    pub accuracy: f64,
    /// Mean fraction of signal tokens that were retained.
    pub signal_recall: f64,
    pub mean_retained: f64,
}

/// Task accuracy of `cfg` over `samples`.
pub fn evaluate(
    lvlm: &Lvlm,
    classifier: Option<&Classifier>,
    samples: &[NeedleSample],
    dcfg: &DataConfig,
    cfg: &PruneConfig,
) -> Result<EvalReport> {
    ensure!(
        !samples.is_empty(),
        Error::InvalidArgument("no samples to evaluate".into())
    );
    cfg.validate(lvlm.config().decoder_layers)?;
    let (mut correct, mut recall, mut kept) = (0usize, 0.0, 0usize);
    for s in samples {
        let (pred, retained) = predict(s, lvlm, classifier, dcfg, cfg)?;
        correct += usize::from(pred == s.answer);
        let hits = retained.iter().filter(|&&i| s.is_signal(i)).count();
        recall += hits as f64 / s.signal.len().max(1) as f64;
        kept += retained.len();
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        mode: cfg.mode.to_string(),
        r: cfg.r,
        samples: samples.len(),
        accuracy: correct as f64 / n,
        signal_recall: recall / n,
        mean_retained: kept as f64 / n,
    })
}

/// Probability that a random signal token outscores a random noise token,
/// counting ties as half. `None` when either set is empty.
pub fn signal_auc(scores: &[f64], sample: &NeedleSample) -> Option<f64> {
    let (mut sig, mut noise) = (Vec::new(), Vec::new());
    for (i, &s) in scores.iter().enumerate() {
        if sample.is_signal(i) {
            sig.push(s);
        } else {
            noise.push(s);
        }
    }
    if sig.is_empty() || noise.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &sig {
        for &b in &noise {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Some(wins / (sig.len() * noise.len()) as f64)
}

/// Classifier signal AUC averaged over samples.
pub fn mean_signal_auc(
    lvlm: &Lvlm,
    classifier: &Classifier,
    samples: &[NeedleSample],
    dcfg: &DataConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        if let Some(a) = signal_auc(&classifier_scores(lvlm, classifier, s, dcfg)?, s) {
            total += a;
            count += 1;
        }
    }
    ensure!(
        count > 0,
        Error::InvalidArgument("no sample has both signal and noise tokens".into())
    );
    Ok(total / count as f64)
}

/// Retain probabilities `sigmoid(score)` for every visual token of every sample.
pub fn retain_probabilities(
    lvlm: &Lvlm,
    classifier: &Classifier,
    samples: &[NeedleSample],
    dcfg: &DataConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(
            classifier_scores(lvlm, classifier, s, dcfg)?
                .into_iter()
                .map(|x| 1.0 / (1.0 + (-x).exp())),
        );
    }
    Ok(out)
}
