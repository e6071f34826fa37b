//! Bidirectional encoder that scores visual tokens given the text context.
//!
//! Input is the row concatenation `[H_v; H_t]` of visual features and text
//! embeddings; the first `n_v` outputs are the visual-token scores.

use crate::error::{ensure, Error, Result};
use crate::numerics::attention::{HeadLayout, ScoreMask};
use crate::numerics::kernels::layer_norm;
use crate::numerics::{AttentionSpec, Graph, Rng, Tensor, Var};

use super::block::{block_eager, block_graph, init_block, linear_rows, BlockDims, LayerCache};
use super::config::ModelConfig;
use super::params::{normal_tensor, Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    cfg: ModelConfig,
    params: ParamStore,
    init_checksum: String,
}

const OUT_INIT_SCALE: f64 = 0.01;

fn layer_prefix(i: usize) -> String {
    format!("cls.layer.{i:02}")
}

impl Classifier {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let (d, ch) = (cfg.hidden, cfg.classifier_hidden);
        let mut params = ParamStore::new();
        params.insert(
            "cls.in_w",
            normal_tensor(vec![d, ch], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        params.insert("cls.in_b", Tensor::zeros(vec![ch]));
        params.insert(
            "cls.positions",
            normal_tensor(vec![cfg.max_seq, ch], 0.1, &mut rng),
        );
        let dims = Self::dims(&cfg);
        for i in 0..cfg.classifier_layers {
            init_block(
                &mut params,
                &layer_prefix(i),
                dims,
                cfg.classifier_layers,
                &mut rng,
            );
        }
        params.insert("cls.final.ln_g", Tensor::full(vec![ch], 1.0));
        params.insert("cls.final.ln_b", Tensor::zeros(vec![ch]));
        // Small head: initial scores sit near zero, the scale of attention labels.
        params.insert(
            "cls.out_w",
            normal_tensor(vec![ch, 1], OUT_INIT_SCALE / (ch as f64).sqrt(), &mut rng),
        );
        params.insert("cls.out_b", Tensor::zeros(vec![1]));
        let init_checksum = params.checksum();
        Ok(Classifier {
            cfg,
            params,
            init_checksum,
        })
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: ParamStore, init_checksum: String) -> Self {
        Classifier {
            cfg,
            params,
            init_checksum,
        }
    }

    fn dims(cfg: &ModelConfig) -> BlockDims {
        BlockDims {
            hidden: cfg.classifier_hidden,
            intermediate: cfg.classifier_intermediate,
            layout: HeadLayout {
                heads: cfg.classifier_heads,
                kv_heads: cfg.classifier_kv_heads,
                head_dim: cfg.classifier_head_dim(),
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

    pub fn init_checksum(&self) -> &str {
        &self.init_checksum
    }

    /// True while the parameters still equal their initialization.
    pub fn is_untrained(&self) -> bool {
        self.params.checksum() == self.init_checksum
    }

    fn check_inputs(&self, n_v: usize, n_t: usize) -> Result<()> {
        ensure!(
            n_v >= 1,
            Error::InvalidArgument("classifier needs at least one visual token".into())
        );
        ensure!(
            n_v + n_t <= self.cfg.max_seq,
            Error::ContextOverflow {
                len: n_v + n_t,
                max: self.cfg.max_seq
            }
        );
        Ok(())
    }

    /// Scores `Ŝ[n_v]` for one sample.
    pub fn score(&self, h_v: &Tensor, h_t: &Tensor) -> Result<Vec<f64>> {
        let d = self.cfg.hidden;
        ensure!(
            h_v.rank() == 2 && h_t.rank() == 2 && h_v.cols() == d && h_t.cols() == d,
            Error::Shape(format!(
                "classifier inputs {:?}, {:?}; expected width {d}",
                h_v.shape(),
                h_t.shape()
            ))
        );
        let (n_v, n_t) = (h_v.rows(), h_t.rows());
        self.check_inputs(n_v, n_t)?;
        let n = n_v + n_t;
        let ch = self.cfg.classifier_hidden;
        let mut input = h_v.data().to_vec();
        input.extend_from_slice(h_t.data());
        let mut x = linear_rows(
            &input,
            n,
            self.params.get("cls.in_w")?,
            Some(self.params.get("cls.in_b")?),
        );
        let pos = self.params.get("cls.positions")?;
        for (i, row) in x.chunks_mut(ch).enumerate() {
            for (v, e) in row.iter_mut().zip(pos.row(i)) {
                *v += e;
            }
        }
        let dims = Self::dims(&self.cfg);
        for l in 0..self.cfg.classifier_layers {
            let mut cache = LayerCache::default();
            block_eager(
                &self.params,
                &layer_prefix(l),
                dims,
                &mut x,
                n,
                &mut cache,
                ScoreMask::default(),
                None,
            )?;
        }
        let xv = &x[..n_v * ch];
        let (h, _) = layer_norm(
            xv,
            ch,
            self.params.get("cls.final.ln_g")?.data(),
            self.params.get("cls.final.ln_b")?.data(),
        );
        Ok(linear_rows(
            &h,
            n_v,
            self.params.get("cls.out_w")?,
            Some(self.params.get("cls.out_b")?),
        ))
    }

    /// Batched scores. `input` is `[batch * (n_v + n_t), d]` with each sample
    /// laid out as `[H_v; H_t]`; returns `[batch, n_v]`.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: Var,
        batch: usize,
        n_v: usize,
    ) -> Result<Var> {
        let d = self.cfg.hidden;
        let shape = g.shape(input).to_vec();
        ensure!(
            shape.len() == 2 && shape[1] == d && batch > 0 && shape[0].is_multiple_of(batch),
            Error::Shape(format!("classifier input {shape:?} for batch {batch}"))
        );
        let seq = shape[0] / batch;
        ensure!(
            n_v <= seq,
            Error::Shape(format!("n_v {n_v} > sequence {seq}"))
        );
        self.check_inputs(n_v, seq - n_v)?;
        let x = g.linear(input, b.var("cls.in_w"), Some(b.var("cls.in_b")))?;
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.embedding(b.var("cls.positions"), &ids)?;
        let mut x = g.add(x, pos)?;
        let dims = Self::dims(&self.cfg);
        for l in 0..self.cfg.classifier_layers {
            let spec = AttentionSpec {
                batch,
                seq,
                layout: dims.layout,
                causal: false,
                dense_mask: None,
            };
            x = block_graph(g, b, &layer_prefix(l), x, spec, None)?;
        }
        let rows: Vec<usize> = (0..batch)
            .flat_map(|s| (0..n_v).map(move |i| s * seq + i))
            .collect();
        let xv = g.gather_rows(x, &rows)?;
        let h = g.layer_norm(xv, b.var("cls.final.ln_g"), b.var("cls.final.ln_b"))?;
        let s = g.linear(h, b.var("cls.out_w"), Some(b.var("cls.out_b")))?;
        g.reshape(s, &[batch, n_v])
    }
}
