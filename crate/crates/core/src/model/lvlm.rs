//! Decoder-only stand-in language model with a linear vision stub.
//!
//! Two forward paths share one parameter store: [`Lvlm::forward_graph`]
//! records onto a [`Graph`] for training, [`Lvlm::forward`] runs eagerly with
//! a key/value cache for capture, pruning and decoding.

use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::numerics::attention::{HeadLayout, ScoreMask};
use crate::numerics::kernels::layer_norm;
use crate::numerics::{AttentionSpec, Graph, Rng, Tensor, Var};

use super::block::{block_eager, block_graph, init_block, linear_rows, BlockDims, LayerCache};
use super::config::ModelConfig;
use super::layout::TokenLayout;
use super::params::{normal_tensor, Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Lvlm {
    cfg: ModelConfig,
    params: ParamStore,
}

/// Additive attention masking for an eager prefill. Causal visibility is
/// always applied on top.
#[derive(Clone, Copy, Debug, Default)]
pub enum PrefillMask<'a> {
    #[default]
    Causal,
    /// `[n, n]` additive mask shared by every layer and head.
    Dense(&'a Tensor),
    /// Per-key bias, added to score `(i, j)` for `i > j`.
    KeyBias(&'a [f64]),
}

/// Drop every row not in `keep` before running layer `layer`.
#[derive(Clone, Copy, Debug)]
pub struct Eviction<'a> {
    pub layer: usize,
    pub keep: &'a [usize],
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub mask: PrefillMask<'a>,
    /// Record post-softmax weights of this layer.
    pub capture: Option<usize>,
    /// Run layers `0..=stop_after` only; no logits are produced.
    pub stop_after: Option<usize>,
    pub evict: Option<Eviction<'a>>,
}

/// Post-softmax attention of one layer, `weights[heads, queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    pub layer: usize,
    pub weights: Tensor,
}

impl AttentionCapture {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn at(&self, head: usize, q: usize, k: usize) -> f64 {
        let s = self.weights.shape();
        self.weights.data()[(head * s[1] + q) * s[2] + k]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    kv_heads: usize,
    kv_width: usize,
}

impl KvCache {
    fn new(layers: usize, layout: HeadLayout) -> Self {
        KvCache {
            layers: vec![LayerCache::default(); layers],
            kv_heads: layout.kv_heads,
            kv_width: layout.kv_width(),
        }
    }

    /// Sum over layers of `kv_heads * cached positions`.
    pub fn entries(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (self.kv_heads * l.len) as u64)
            .sum()
    }

    /// Bytes held by keys and values at `elem_bytes` per element.
    pub fn bytes(&self, elem_bytes: usize) -> u64 {
        self.layers
            .iter()
            .map(|l| (2 * l.len * self.kv_width * elem_bytes) as u64)
            .sum()
    }

    pub fn positions_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LvlmOutput {
    /// `[rows, vocab]` for the surviving rows, absent after an early stop.
    pub logits: Option<Tensor>,
    pub capture: Option<AttentionCapture>,
    pub cache: KvCache,
    /// Input row index of every surviving row.
    pub rows: Vec<usize>,
}

impl LvlmOutput {
    pub fn last_logits(&self) -> Option<&[f64]> {
        self.logits.as_ref().map(|l| l.row(l.rows() - 1))
    }
}

/// Masking for a batched graph forward. Causal visibility is always applied.
#[derive(Clone, Debug, Default)]
pub struct GraphMask {
    /// `[n, n]` or `[batch, n, n]`.
    pub dense: Option<Arc<Tensor>>,
    /// `[batch, n]` per-key bias.
    pub key_bias: Option<Var>,
}

fn layer_prefix(i: usize) -> String {
    format!("layer.{i:02}")
}

impl Lvlm {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.hidden;
        let mut params = ParamStore::new();
        params.insert(
            "vision.w",
            normal_tensor(
                vec![cfg.patch_dim, d],
                1.0 / (cfg.patch_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        params.insert("vision.b", Tensor::zeros(vec![d]));
        params.insert(
            "embed.tokens",
            normal_tensor(vec![cfg.vocab, d], 1.0, &mut rng),
        );
        params.insert(
            "embed.positions",
            normal_tensor(vec![cfg.max_seq, d], 0.1, &mut rng),
        );
        let dims = Self::dims(&cfg);
        for i in 0..cfg.decoder_layers {
            init_block(
                &mut params,
                &layer_prefix(i),
                dims,
                cfg.decoder_layers,
                &mut rng,
            );
        }
        params.insert("final.ln_g", Tensor::full(vec![d], 1.0));
        params.insert("final.ln_b", Tensor::zeros(vec![d]));
        params.insert(
            "unembed",
            normal_tensor(vec![d, cfg.vocab], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        Ok(Lvlm { cfg, params })
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: ParamStore) -> Self {
        Lvlm { cfg, params }
    }

    fn dims(cfg: &ModelConfig) -> BlockDims {
        BlockDims {
            hidden: cfg.hidden,
            intermediate: cfg.intermediate,
            layout: HeadLayout {
                heads: cfg.heads,
                kv_heads: cfg.kv_heads,
                head_dim: cfg.head_dim(),
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_layout(&self) -> HeadLayout {
        Self::dims(&self.cfg).layout
    }

    /// Vision stub: one linear map per patch, `[n_v, patch_dim] -> [n_v, d]`.
    pub fn encode_vision(&self, patches: &Tensor) -> Result<Tensor> {
        ensure!(
            patches.rank() == 2 && patches.cols() == self.cfg.patch_dim,
            Error::Shape(format!(
                "vision input {:?}, expected [n_v, {}]",
                patches.shape(),
                self.cfg.patch_dim
            ))
        );
        let w = self.params.get("vision.w")?;
        let b = self.params.get("vision.b")?;
        let rows = patches.rows();
        Tensor::new(
            vec![rows, self.cfg.hidden],
            linear_rows(patches.data(), rows, w, Some(b)),
        )
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let table = self.params.get("embed.tokens")?;
        for &id in ids {
            ensure!(
                id < self.cfg.vocab,
                Error::InvalidArgument(format!("token id {id} >= vocab {}", self.cfg.vocab))
            );
        }
        Ok(table.select_rows(ids))
    }

    /// Interleaves text embeddings and visual features into sequence order.
    pub fn assemble(layout: &TokenLayout, h_text: &Tensor, h_v: &Tensor) -> Result<Tensor> {
        ensure!(
            h_text.rows() == layout.text_len()
                && h_v.rows() == layout.n_v
                && h_text.cols() == h_v.cols(),
            Error::Shape(format!(
                "assemble: text {:?}, visual {:?} for layout {layout:?}",
                h_text.shape(),
                h_v.shape()
            ))
        );
        let d = h_v.cols();
        let mut data = Vec::with_capacity(layout.n * d);
        data.extend_from_slice(&h_text.data()[..layout.prefix_len() * d]);
        data.extend_from_slice(h_v.data());
        data.extend_from_slice(&h_text.data()[layout.prefix_len() * d..]);
        Tensor::new(vec![layout.n, d], data)
    }

    /// Sequence-order input embeddings (no position term).
    pub fn embed_sequence(
        &self,
        layout: &TokenLayout,
        text_ids: &[usize],
        patches: &Tensor,
    ) -> Result<Tensor> {
        let h_text = self.embed_tokens(text_ids)?;
        let h_v = self.encode_vision(patches)?;
        Self::assemble(layout, &h_text, &h_v)
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().max() {
            ensure!(
                p < self.cfg.max_seq,
                Error::ContextOverflow {
                    len: p + 1,
                    max: self.cfg.max_seq
                }
            );
        }
        Ok(())
    }

    /// Eager prefill of one sequence. `positions[i]` is the position id of row `i`.
    pub fn forward(
        &self,
        embeds: &Tensor,
        positions: &[usize],
        opts: &ForwardOptions<'_>,
    ) -> Result<LvlmOutput> {
        let d = self.cfg.hidden;
        let layers = self.cfg.decoder_layers;
        ensure!(
            embeds.rank() == 2 && embeds.cols() == d && embeds.rows() == positions.len(),
            Error::Shape(format!(
                "forward: embeds {:?} with {} positions",
                embeds.shape(),
                positions.len()
            ))
        );
        self.check_positions(positions)?;
        for l in [opts.capture, opts.stop_after, opts.evict.map(|e| e.layer)]
            .into_iter()
            .flatten()
        {
            ensure!(l < layers, Error::LayerOutOfRange { index: l, layers });
        }
        let n = embeds.rows();
        match opts.mask {
            PrefillMask::Dense(m) => ensure!(
                m.shape() == [n, n],
                Error::Shape(format!("dense mask {:?}, expected [{n}, {n}]", m.shape()))
            ),
            PrefillMask::KeyBias(b) => ensure!(
                b.len() == n,
                Error::Shape(format!("key bias of length {}, expected {n}", b.len()))
            ),
            PrefillMask::Causal => {}
        }
        if let Some(e) = opts.evict {
            ensure!(
                !e.keep.is_empty()
                    && e.keep.windows(2).all(|w| w[0] < w[1])
                    && e.keep[e.keep.len() - 1] < n,
                Error::InvalidArgument(
                    "eviction rows must be ascending, unique and in range".into()
                )
            );
        }

        let pos_table = self.params.get("embed.positions")?;
        let mut x = embeds.data().to_vec();
        for (row, &p) in x.chunks_mut(d).zip(positions) {
            for (v, e) in row.iter_mut().zip(pos_table.row(p)) {
                *v += e;
            }
        }
        let dims = Self::dims(&self.cfg);
        let mut cache = KvCache::new(layers, dims.layout);
        let mut rows: Vec<usize> = (0..n).collect();
        let mut dense_sub: Option<Vec<f64>> = None;
        let mut bias_sub: Option<Vec<f64>> = None;
        let mut capture = None;
        let last = opts.stop_after.unwrap_or(layers - 1);
        for l in 0..=last {
            if let Some(e) = opts.evict.filter(|e| e.layer == l) {
                let mut nx = Vec::with_capacity(e.keep.len() * d);
                for &r in e.keep {
                    nx.extend_from_slice(&x[r * d..(r + 1) * d]);
                }
                x = nx;
                rows = e.keep.iter().map(|&r| rows[r]).collect();
                match opts.mask {
                    PrefillMask::Dense(m) => {
                        let mut sub = Vec::with_capacity(rows.len() * rows.len());
                        for &i in &rows {
                            for &j in &rows {
                                sub.push(m.data()[i * n + j]);
                            }
                        }
                        dense_sub = Some(sub);
                    }
                    PrefillMask::KeyBias(b) => {
                        bias_sub = Some(rows.iter().map(|&j| b[j]).collect())
                    }
                    PrefillMask::Causal => {}
                }
            }
            let mask = ScoreMask {
                causal: true,
                dense: match opts.mask {
                    PrefillMask::Dense(m) => Some(dense_sub.as_deref().unwrap_or(m.data())),
                    _ => None,
                },
                key_bias: match opts.mask {
                    PrefillMask::KeyBias(b) => Some(bias_sub.as_deref().unwrap_or(b)),
                    _ => None,
                },
            };
            let mut probs = (opts.capture == Some(l)).then(Vec::new);
            let nr = rows.len();
            block_eager(
                &self.params,
                &layer_prefix(l),
                dims,
                &mut x,
                nr,
                &mut cache.layers[l],
                mask,
                probs.as_mut(),
            )?;
            if let Some(p) = probs {
                capture = Some(AttentionCapture {
                    layer: l,
                    weights: Tensor::new(vec![dims.layout.heads, nr, nr], p)?,
                });
            }
        }
        let logits = if last == layers - 1 {
            Some(self.head(&x, rows.len())?)
        } else {
            None
        };
        Ok(LvlmOutput {
            logits,
            capture,
            cache,
            rows,
        })
    }

    fn head(&self, x: &[f64], rows: usize) -> Result<Tensor> {
        let (h, _) = layer_norm(
            x,
            self.cfg.hidden,
            self.params.get("final.ln_g")?.data(),
            self.params.get("final.ln_b")?.data(),
        );
        let w = self.params.get("unembed")?;
        Tensor::new(vec![rows, self.cfg.vocab], linear_rows(&h, rows, w, None))
    }

    /// One autoregressive step; appends to `cache` and returns next-token logits.
    pub fn decode_step(
        &self,
        cache: &mut KvCache,
        token: usize,
        position: usize,
    ) -> Result<Vec<f64>> {
        self.check_positions(&[position])?;
        let layers = self.cfg.decoder_layers;
        ensure!(
            cache.layers.len() == layers && cache.layers.iter().all(|l| l.len > 0),
            Error::InvalidArgument("decode needs a complete prefill cache".into())
        );
        let emb = self.embed_tokens(&[token])?;
        let mut x: Vec<f64> = emb
            .data()
            .iter()
            .zip(self.params.get("embed.positions")?.row(position))
            .map(|(a, b)| a + b)
            .collect();
        let dims = Self::dims(&self.cfg);
        let mask = ScoreMask {
            causal: true,
            ..ScoreMask::default()
        };
        for l in 0..layers {
            block_eager(
                &self.params,
                &layer_prefix(l),
                dims,
                &mut x,
                1,
                &mut cache.layers[l],
                mask,
                None,
            )?;
        }
        Ok(self.head(&x, 1)?.into_data())
    }

    /// Graph version of [`Lvlm::embed_sequence`] for a batch, with a trainable
    /// vision stub. `text_ids` is `[batch * text_len]`, `patches` is
    /// `[batch * n_v, patch_dim]`.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        layout: &TokenLayout,
        batch: usize,
        text_ids: &[usize],
        patches: Var,
    ) -> Result<Var> {
        ensure!(
            text_ids.len() == batch * layout.text_len(),
            Error::Shape(format!(
                "{} text ids for batch {batch} of {layout:?}",
                text_ids.len()
            ))
        );
        let txt = g.embedding(b.var("embed.tokens"), text_ids)?;
        let vis = g.linear(patches, b.var("vision.w"), Some(b.var("vision.b")))?;
        let all = g.concat_rows(&[txt, vis])?;
        let nt = layout.text_len();
        let base_v = batch * nt;
        let mut order = Vec::with_capacity(batch * layout.n);
        for s in 0..batch {
            for p in 0..layout.n {
                let row = if layout.is_visual(p) {
                    base_v + s * layout.n_v + (p - layout.visual_offset)
                } else if p < layout.visual_offset {
                    s * nt + p
                } else {
                    s * nt + p - layout.n_v
                };
                order.push(row);
            }
        }
        g.gather_rows(all, &order)
    }

    /// Batched causal forward, `embeds[batch * seq, d]` to logits `[batch * seq, vocab]`.
    /// Every sequence shares `positions`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        embeds: Var,
        positions: &[usize],
        batch: usize,
        mask: &GraphMask,
    ) -> Result<Var> {
        let seq = positions.len();
        self.check_positions(positions)?;
        ensure!(
            g.shape(embeds) == [batch * seq, self.cfg.hidden],
            Error::Shape(format!(
                "forward_graph: embeds {:?}, expected [{}, {}]",
                g.shape(embeds),
                batch * seq,
                self.cfg.hidden
            ))
        );
        let ids: Vec<usize> = (0..batch).flat_map(|_| positions.iter().copied()).collect();
        let pos = g.embedding(b.var("embed.positions"), &ids)?;
        let mut x = g.add(embeds, pos)?;
        let dims = Self::dims(&self.cfg);
        for l in 0..self.cfg.decoder_layers {
            let spec = AttentionSpec {
                batch,
                seq,
                layout: dims.layout,
                causal: true,
                dense_mask: mask.dense.clone(),
            };
            x = block_graph(g, b, &layer_prefix(l), x, spec, mask.key_bias)?;
        }
        let h = g.layer_norm(x, b.var("final.ln_g"), b.var("final.ln_b"))?;
        g.matmul(h, b.var("unembed"))
    }
}

/// Causal prefill that runs layer by layer, so rows can be evicted between
/// layers based on attention seen so far.
#[derive(Clone, Debug)]
pub struct Prefill<'m> {
    model: &'m Lvlm,
    x: Vec<f64>,
    rows: Vec<usize>,
    cache: KvCache,
    next: usize,
}

impl<'m> Prefill<'m> {
    pub fn new(model: &'m Lvlm, embeds: &Tensor, positions: &[usize]) -> Result<Self> {
        let d = model.cfg.hidden;
        ensure!(
            embeds.rank() == 2 && embeds.cols() == d && embeds.rows() == positions.len(),
            Error::Shape(format!(
                "prefill: embeds {:?} with {} positions",
                embeds.shape(),
                positions.len()
            ))
        );
        model.check_positions(positions)?;
        let pos_table = model.params.get("embed.positions")?;
        let mut x = embeds.data().to_vec();
        for (row, &p) in x.chunks_mut(d).zip(positions) {
            for (v, e) in row.iter_mut().zip(pos_table.row(p)) {
                *v += e;
            }
        }
        Ok(Prefill {
            model,
            x,
            rows: (0..positions.len()).collect(),
            cache: KvCache::new(model.cfg.decoder_layers, Lvlm::dims(&model.cfg).layout),
            next: 0,
        })
    }

    /// Index of the next layer to run.
    pub fn next_layer(&self) -> usize {
        self.next
    }

    /// Input row index of every current row.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Runs layers up to and including `last`, capturing `capture` if it is among them.
    pub fn run_through(
        &mut self,
        last: usize,
        capture: Option<usize>,
    ) -> Result<Option<AttentionCapture>> {
        let layers = self.model.cfg.decoder_layers;
        ensure!(
            last < layers,
            Error::LayerOutOfRange {
                index: last,
                layers
            }
        );
        let dims = Lvlm::dims(&self.model.cfg);
        let mut captured = None;
        while self.next <= last {
            let l = self.next;
            let mut probs = (capture == Some(l)).then(Vec::new);
            let nr = self.rows.len();
            let mask = ScoreMask {
                causal: true,
                ..ScoreMask::default()
            };
            block_eager(
                &self.model.params,
                &layer_prefix(l),
                dims,
                &mut self.x,
                nr,
                &mut self.cache.layers[l],
                mask,
                probs.as_mut(),
            )?;
            if let Some(p) = probs {
                captured = Some(AttentionCapture {
                    layer: l,
                    weights: Tensor::new(vec![dims.layout.heads, nr, nr], p)?,
                });
            }
            self.next += 1;
        }
        Ok(captured)
    }

    /// Keeps only the given current rows (ascending) for all later layers.
    pub fn evict(&mut self, keep: &[usize]) -> Result<()> {
        ensure!(
            !keep.is_empty()
                && keep.windows(2).all(|w| w[0] < w[1])
                && keep[keep.len() - 1] < self.rows.len(),
            Error::InvalidArgument("eviction rows must be ascending, unique and in range".into())
        );
        let d = self.model.cfg.hidden;
        let mut nx = Vec::with_capacity(keep.len() * d);
        for &r in keep {
            nx.extend_from_slice(&self.x[r * d..(r + 1) * d]);
        }
        self.x = nx;
        self.rows = keep.iter().map(|&r| self.rows[r]).collect();
        Ok(())
    }

    /// Like [`Prefill::evict`], and also drops the evicted rows from the
    /// caches of already-computed layers `from..next_layer()`.
    pub fn evict_with_cache(&mut self, keep: &[usize], from: usize) -> Result<()> {
        let nr = self.rows.len();
        ensure!(
            self.cache.layers[from.min(self.next)..self.next]
                .iter()
                .all(|c| c.len == nr),
            Error::InvalidArgument("cache rows no longer match current rows".into())
        );
        self.evict(keep)?;
        let width = self.cache.kv_width;
        for l in from..self.next {
            self.cache.layers[l].retain_rows(keep, width);
        }
        Ok(())
    }

    /// Runs the remaining layers and the output head.
    pub fn finish(mut self) -> Result<LvlmOutput> {
        let layers = self.model.cfg.decoder_layers;
        if self.next < layers {
            self.run_through(layers - 1, None)?;
        }
        let logits = self.model.head(&self.x, self.rows.len())?;
        Ok(LvlmOutput {
            logits: Some(logits),
            capture: None,
            cache: self.cache,
            rows: self.rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Lvlm {
        Lvlm::new(ModelConfig::preset("tiny").unwrap(), 5).unwrap()
    }

    fn sample(m: &Lvlm, n: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        normal_tensor(vec![n, m.config().hidden], 1.0, &mut r)
    }

    #[test]
    fn eager_matches_graph() {
        let m = tiny();
        let n = 9;
        let emb = sample(&m, n, 1);
        let pos: Vec<usize> = (0..n).collect();
        let out = m.forward(&emb, &pos, &ForwardOptions::default()).unwrap();
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, false);
        let e = g.constant(emb);
        let logits = m
            .forward_graph(&mut g, &b, e, &pos, 1, &GraphMask::default())
            .unwrap();
        assert!(g.value(logits).max_abs_diff(out.logits.as_ref().unwrap()) < 1e-10);
    }

    #[test]
    fn key_bias_eager_matches_graph() {
        let m = tiny();
        let n = 7;
        let emb = sample(&m, n, 2);
        let pos: Vec<usize> = (0..n).collect();
        let bias: Vec<f64> = (0..n).map(|j| -(j as f64) * 0.7).collect();
        let opts = ForwardOptions {
            mask: PrefillMask::KeyBias(&bias),
            ..Default::default()
        };
        let out = m.forward(&emb, &pos, &opts).unwrap();
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, false);
        let e = g.constant(emb);
        let kb = g.constant(Tensor::new(vec![1, n], bias.clone()).unwrap());
        let mask = GraphMask {
            key_bias: Some(kb),
            ..Default::default()
        };
        let logits = m.forward_graph(&mut g, &b, e, &pos, 1, &mask).unwrap();
        assert!(g.value(logits).max_abs_diff(out.logits.as_ref().unwrap()) < 1e-10);
    }

    #[test]
    fn decode_equals_longer_prefill() {
        let m = tiny();
        let n = 6;
        let emb = sample(&m, n, 3);
        let pos: Vec<usize> = (0..n).collect();
        let mut out = m.forward(&emb, &pos, &ForwardOptions::default()).unwrap();
        let step = m.decode_step(&mut out.cache, 4, n).unwrap();

        let tok = m.embed_tokens(&[4]).unwrap();
        let mut data = emb.data().to_vec();
        data.extend_from_slice(tok.data());
        let longer = Tensor::new(vec![n + 1, m.config().hidden], data).unwrap();
        let pos2: Vec<usize> = (0..=n).collect();
        let full = m
            .forward(&longer, &pos2, &ForwardOptions::default())
            .unwrap();
        let last = full.last_logits().unwrap();
        for (a, b) in step.iter().zip(last) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(out.cache.entries(), (2 * (n + 1)) as u64);
    }

    #[test]
    fn capture_rows_are_distributions() {
        let m = tiny();
        let n = 8;
        let emb = sample(&m, n, 4);
        let pos: Vec<usize> = (0..n).collect();
        let opts = ForwardOptions {
            capture: Some(0),
            stop_after: Some(0),
            ..Default::default()
        };
        let out = m.forward(&emb, &pos, &opts).unwrap();
        assert!(out.logits.is_none());
        let cap = out.capture.unwrap();
        for h in 0..cap.heads() {
            for i in 0..n {
                let s: f64 = (0..n).map(|j| cap.at(h, i, j)).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for j in i + 1..n {
                    assert_eq!(cap.at(h, i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn eviction_at_layer_zero_equals_dropping_rows() {
        let m = tiny();
        let n = 8;
        let emb = sample(&m, n, 5);
        let pos: Vec<usize> = (0..n).collect();
        let keep = [0, 2, 3, 6, 7];
        let opts = ForwardOptions {
            evict: Some(Eviction {
                layer: 0,
                keep: &keep,
            }),
            ..Default::default()
        };
        let a = m.forward(&emb, &pos, &opts).unwrap();
        let sub = emb.select_rows(&keep);
        let b = m.forward(&sub, &keep, &ForwardOptions::default()).unwrap();
        assert_eq!(a.rows, keep.to_vec());
        assert!(a.logits.unwrap().max_abs_diff(b.logits.as_ref().unwrap()) < 1e-12);
    }

    #[test]
    fn stepwise_prefill_matches_forward() {
        let m = tiny();
        let n = 8;
        let emb = sample(&m, n, 9);
        let pos: Vec<usize> = (0..n).collect();
        let keep = [1, 2, 5, 7];
        let mut pf = Prefill::new(&m, &emb, &pos).unwrap();
        let cap = pf.run_through(0, Some(0)).unwrap().unwrap();
        pf.evict(&keep).unwrap();
        let a = pf.finish().unwrap();
        let opts = ForwardOptions {
            capture: Some(0),
            evict: Some(Eviction {
                layer: 1,
                keep: &keep,
            }),
            ..Default::default()
        };
        let b = m.forward(&emb, &pos, &opts).unwrap();
        assert_eq!(Some(cap), b.capture);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.cache, b.cache);
        assert_eq!(a.cache.positions_per_layer(), vec![8, 4]);
    }

    #[test]
    fn bad_layer_and_overflow() {
        let m = tiny();
        let emb = sample(&m, 3, 6);
        let opts = ForwardOptions {
            capture: Some(9),
            ..Default::default()
        };
        assert!(matches!(
            m.forward(&emb, &[0, 1, 2], &opts),
            Err(Error::LayerOutOfRange {
                index: 9,
                layers: 2
            })
        ));
        assert!(matches!(
            m.forward(&emb, &[0, 1, 64], &ForwardOptions::default()),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn zero_patch_gives_bias_row() {
        let mut m = tiny();
        let b = Tensor::from_vec((0..16).map(|i| i as f64 * 0.1).collect());
        *m.params_mut().get_mut("vision.b").unwrap() = b.clone();
        let h = m.encode_vision(&Tensor::zeros(vec![2, 12])).unwrap();
        assert_eq!(h.row(0), b.data());
        assert_eq!(h.row(1), b.data());
    }

    #[test]
    fn embed_graph_matches_eager() {
        let m = tiny();
        let layout = TokenLayout::from_spans(2, 3, 2);
        let mut r = Rng::new(8);
        let patches = normal_tensor(vec![6, 12], 1.0, &mut r);
        let ids = [1, 2, 3, 4, 5, 6, 7, 8];
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, false);
        let pv = g.constant(patches.clone());
        let e = m.embed_graph(&mut g, &b, &layout, 2, &ids, pv).unwrap();
        for s in 0..2 {
            let eager = m
                .embed_sequence(
                    &layout,
                    &ids[s * 4..(s + 1) * 4],
                    &patches.select_rows(&[3 * s, 3 * s + 1, 3 * s + 2]),
                )
                .unwrap();
            for p in 0..layout.n {
                assert_eq!(g.value(e).row(s * layout.n + p), eager.row(p));
            }
        }
    }
}
