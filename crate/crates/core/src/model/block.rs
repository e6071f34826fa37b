//! Pre-norm transformer block shared by the decoder and the classifier.

use crate::error::Result;
use crate::numerics::attention::{attention_forward, HeadLayout, ScoreMask};
use crate::numerics::kernels::{gelu, layer_norm, matmul};
use crate::numerics::{AttentionSpec, Graph, Rng, Tensor, Var};

use super::params::{normal_tensor, Bound, ParamStore};

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockDims {
    pub hidden: usize,
    pub intermediate: usize,
    pub layout: HeadLayout,
}

pub(crate) fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    dims: BlockDims,
    depth: usize,
    rng: &mut Rng,
) {
    let d = dims.hidden;
    let qw = dims.layout.q_width();
    let kw = dims.layout.kv_width();
    let std_in = 1.0 / (d as f64).sqrt();
    let resid = 1.0 / (2.0 * depth as f64).sqrt();
    store.insert(format!("{prefix}.ln1_g"), Tensor::full(vec![d], 1.0));
    store.insert(format!("{prefix}.ln1_b"), Tensor::zeros(vec![d]));
    store.insert(
        format!("{prefix}.wq"),
        normal_tensor(vec![d, qw], std_in, rng),
    );
    store.insert(
        format!("{prefix}.wk"),
        normal_tensor(vec![d, kw], std_in, rng),
    );
    store.insert(
        format!("{prefix}.wv"),
        normal_tensor(vec![d, kw], std_in, rng),
    );
    store.insert(
        format!("{prefix}.wo"),
        normal_tensor(vec![qw, d], resid / (qw as f64).sqrt(), rng),
    );
    store.insert(format!("{prefix}.ln2_g"), Tensor::full(vec![d], 1.0));
    store.insert(format!("{prefix}.ln2_b"), Tensor::zeros(vec![d]));
    store.insert(
        format!("{prefix}.w1"),
        normal_tensor(vec![d, dims.intermediate], std_in, rng),
    );
    store.insert(
        format!("{prefix}.b1"),
        Tensor::zeros(vec![dims.intermediate]),
    );
    store.insert(
        format!("{prefix}.w2"),
        normal_tensor(
            vec![dims.intermediate, d],
            resid / (dims.intermediate as f64).sqrt(),
            rng,
        ),
    );
    store.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d]));
}

pub(crate) fn block_graph(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: Var,
    spec: AttentionSpec,
    key_bias: Option<Var>,
) -> Result<Var> {
    let p = |s: &str| b.var(&format!("{prefix}.{s}"));
    let h = g.layer_norm(x, p("ln1_g"), p("ln1_b"))?;
    let q = g.matmul(h, p("wq"))?;
    let k = g.matmul(h, p("wk"))?;
    let v = g.matmul(h, p("wv"))?;
    let a = g.attention(q, k, v, key_bias, spec)?;
    let o = g.matmul(a, p("wo"))?;
    let x = g.add(x, o)?;
    let h = g.layer_norm(x, p("ln2_g"), p("ln2_b"))?;
    let u = g.linear(h, p("w1"), Some(p("b1")))?;
    let u = g.gelu(u);
    let m = g.linear(u, p("w2"), Some(p("b2")))?;
    g.add(x, m)
}

/// Keys and values of every position a layer has seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub len: usize,
}

impl LayerCache {
    /// Keeps only the given cached rows, in the given order.
    pub fn retain_rows(&mut self, rows: &[usize], width: usize) {
        let pick = |src: &[f64]| {
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&src[r * width..(r + 1) * width]);
            }
            out
        };
        self.k = pick(&self.k);
        self.v = pick(&self.v);
        self.len = rows.len();
    }
}

pub(crate) fn linear_rows(x: &[f64], rows: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = matmul(x, w.data(), rows, k, n);
    if let Some(b) = b {
        for row in y.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    y
}

/// Eager block over `rows` new positions; their keys/values are appended to
/// `cache` and the queries attend to the whole cache.
pub(crate) fn block_eager(
    params: &ParamStore,
    prefix: &str,
    dims: BlockDims,
    x: &mut [f64],
    rows: usize,
    cache: &mut LayerCache,
    mask: ScoreMask<'_>,
    probs: Option<&mut Vec<f64>>,
) -> Result<()> {
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    let d = dims.hidden;
    let (h, _) = layer_norm(x, d, p("ln1_g")?.data(), p("ln1_b")?.data());
    let q = linear_rows(&h, rows, p("wq")?, None);
    let k = linear_rows(&h, rows, p("wk")?, None);
    let v = linear_rows(&h, rows, p("wv")?, None);
    cache.k.extend_from_slice(&k);
    cache.v.extend_from_slice(&v);
    cache.len += rows;
    let nk = cache.len;
    let mut a = vec![0.0; rows * dims.layout.q_width()];
    let probs = probs.map(|buf| {
        buf.clear();
        buf.resize(dims.layout.heads * rows * nk, 0.0);
        buf.as_mut_slice()
    });
    attention_forward(
        &q,
        &cache.k,
        &cache.v,
        rows,
        nk,
        dims.layout,
        mask,
        &mut a,
        probs,
    );
    let o = linear_rows(&a, rows, p("wo")?, None);
    for (xi, oi) in x.iter_mut().zip(&o) {
        *xi += oi;
    }
    let (h, _) = layer_norm(x, d, p("ln2_g")?.data(), p("ln2_b")?.data());
    let mut u = linear_rows(&h, rows, p("w1")?, Some(p("b1")?));
    for ui in u.iter_mut() {
        *ui = gelu(*ui);
    }
    let m = linear_rows(&u, rows, p("w2")?, Some(p("b2")?));
    for (xi, mi) in x.iter_mut().zip(&m) {
        *xi += mi;
    }
    Ok(())
}
