//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the chain rule. Trainable leaves keep an
//! accumulating gradient buffer: calling [`Graph::backward`] twice without
//! [`Graph::zero_grad`] adds the second gradient onto the first.

use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, HeadLayout, ScoreMask};
use super::kernels::{self, matmul_a_bt_acc, matmul_at_b_acc};
use super::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Shape and masking of a batched self-attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub layout: HeadLayout,
    pub causal: bool,
    /// Constant additive mask, `[seq, seq]` shared or `[batch, seq, seq]`.
    pub dense_mask: Option<Arc<Tensor>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogClamped(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PadCols {
        x: Var,
        left: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        key_bias: Option<Var>,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    #[allow(dead_code)]
    Round(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogClamped(..) => "log_clamped",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::PadCols { .. } => "pad_cols",
            Op::Reshape(..) => "reshape",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::Round(..) => "round",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient buffer on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Post-softmax weights `[batch, heads, seq, seq]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], &AttentionSpec)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, spec, .. } => Some((probs, spec)),
            _ => None,
        }
    }

    // ---- elementwise and linear algebra -------------------------------

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            bv.rank() == 2 && av.rank() >= 1 && av.cols() == bv.shape()[0],
            shape_err("matmul", av.shape(), bv.shape())
        );
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape_binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            av.shape() == bv.shape(),
            shape_err(what, av.shape(), bv.shape())
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.same_shape_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.same_shape_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.same_shape_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast-add a `[cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        ensure!(
            rv.rank() == 1 && rv.len() == xv.cols(),
            shape_err("add_row", xv.shape(), rv.shape())
        );
        let mut value = xv.clone();
        let c = rv.len();
        for (i, e) in value.data_mut().iter_mut().enumerate() {
            *e += rv.data()[i % c];
        }
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// `x · w + b` for `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `max(ln x, floor)`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.ln().max(floor));
        self.push(value, Op::LogClamped(x, floor), &[x])
    }

    /// Elementwise `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    /// Elementwise rounding. Piecewise constant, so it carries no gradient rule.
    pub fn round(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::round);
        self.push(value, Op::Round(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            av.shape() == bv.shape(),
            shape_err("mse", av.shape(), bv.shape())
        );
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / av.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    // ---- structural ---------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            shape_err("layer_norm", xv.shape(), self.value(gamma).shape())
        );
        let (data, stats) = kernels::layer_norm(
            xv.data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Rows of `table[vocab, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        ensure!(
            tv.rank() == 2,
            Error::Shape(format!("embedding table rank {}", tv.rank()))
        );
        ensure!(
            !ids.is_empty(),
            Error::InvalidArgument("embedding with no ids".into())
        );
        let vocab = tv.shape()[0];
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} >= table size {vocab}"
            )));
        }
        let value = tv.select_rows(ids);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows of `x` (viewed as `[rows, cols]`), shaped `[rows.len(), cols]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            !rows.is_empty(),
            Error::InvalidArgument("gather_rows with no rows".into())
        );
        if let Some(bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} >= {}",
                xv.rows()
            )));
        }
        let value = xv.select_rows(rows);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Flat elements of `x`, shaped `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            !idx.is_empty(),
            Error::InvalidArgument("gather with no indices".into())
        );
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} >= {}",
                xv.len()
            )));
        }
        let value = Tensor::from_vec(idx.iter().map(|&i| xv.data()[i]).collect());
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(
            !parts.is_empty(),
            Error::InvalidArgument("concat of nothing".into())
        );
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            ensure!(pv.cols() == c, shape_err("concat_rows", &[c], pv.shape()));
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Embed each row of `x[rows, c]` into a zero row of width `total` at
    /// column offset `left`.
    pub fn pad_cols(&mut self, x: Var, left: usize, total: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        ensure!(
            left + c <= total,
            Error::Shape(format!("pad_cols: {left} + {c} > {total}"))
        );
        let rows = xv.rows();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            data[r * total + left..r * total + left + c].copy_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::PadCols { x, left }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Batched attention over `q[batch*seq, heads*hd]`, `k`/`v[batch*seq, kv_heads*hd]`.
    ///
    /// `key_bias[batch, seq]` is added to score `(i, j)` only for `i > j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_bias: Option<Var>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let AttentionSpec {
            batch, seq, layout, ..
        } = spec;
        ensure!(
            layout.kv_heads > 0 && layout.heads % layout.kv_heads == 0,
            Error::InvalidArgument(format!(
                "heads {} not divisible by kv_heads {}",
                layout.heads, layout.kv_heads
            ))
        );
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        ensure!(
            qv.rows() == batch * seq && qv.cols() == layout.q_width(),
            shape_err("attention q", qv.shape(), &[batch * seq, layout.q_width()])
        );
        for t in [kv, vv] {
            ensure!(
                t.rows() == batch * seq && t.cols() == layout.kv_width(),
                shape_err(
                    "attention k/v",
                    t.shape(),
                    &[batch * seq, layout.kv_width()]
                )
            );
        }
        if let Some(m) = &spec.dense_mask {
            let ok = m.shape() == [seq, seq] || m.shape() == [batch, seq, seq];
            ensure!(
                ok,
                shape_err("attention mask", m.shape(), &[batch, seq, seq])
            );
        }
        if let Some(b) = key_bias {
            ensure!(
                self.value(b).len() == batch * seq,
                shape_err("attention key bias", self.value(b).shape(), &[batch, seq])
            );
        }
        let qw = layout.q_width();
        let kw = layout.kv_width();
        let mut out = vec![0.0; batch * seq * qw];
        let mut probs = vec![0.0; batch * layout.heads * seq * seq];
        let hnn = layout.heads * seq * seq;
        for b in 0..batch {
            let dense = spec.dense_mask.as_ref().map(|m| {
                if m.rank() == 2 {
                    m.data()
                } else {
                    &m.data()[b * seq * seq..(b + 1) * seq * seq]
                }
            });
            let bias = key_bias.map(|kb| &self.value(kb).data()[b * seq..(b + 1) * seq]);
            attention_forward(
                &qv.data()[b * seq * qw..(b + 1) * seq * qw],
                &kv.data()[b * seq * kw..(b + 1) * seq * kw],
                &vv.data()[b * seq * kw..(b + 1) * seq * kw],
                seq,
                seq,
                layout,
                ScoreMask {
                    causal: spec.causal,
                    dense,
                    key_bias: bias,
                },
                &mut out[b * seq * qw..(b + 1) * seq * qw],
                Some(&mut probs[b * hnn..(b + 1) * hnn]),
            );
        }
        let value = Tensor::new(vec![batch * seq, qw], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(key_bias);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                key_bias,
                spec,
                probs,
            },
            &inputs,
        ))
    }

    /// Mean token cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        ensure!(
            targets.len() == rows,
            Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            ))
        );
        let count = targets.iter().flatten().count();
        ensure!(
            count > 0,
            Error::InvalidArgument("no supervised positions".into())
        );
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::softmax_row_inplace(row);
            if let Some(t) = *t {
                ensure!(
                    t < vocab,
                    Error::InvalidArgument(format!("target {t} >= vocab {vocab}"))
                );
                loss -= row[t].max(f64::MIN_POSITIVE).ln();
            }
        }
        let value = Tensor::scalar(loss / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        ensure!(lv.is_scalar(), Error::NotScalar(lv.shape().to_vec()));
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if self.nodes[idx].trainable {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape follows its value")
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_acc(gd, bv.data(), m, n, k, &mut da);
                    Self::accumulate(grads, *a, self.like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_acc(av.data(), gd, m, k, n, &mut db);
                    Self::accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.needs(*row) {
                    let c = self.value(*row).len();
                    let mut d = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v;
                    }
                    Self::accumulate(grads, *row, self.like(*row, d));
                }
            }
            Op::Scale(x, c) => Self::accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => Self::accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                Self::accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                Self::accumulate(grads, *x, self.like(*x, d));
            }
            Op::LogClamped(x, floor) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| if xv.ln() > *floor { gv / xv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *x, self.like(*x, d));
            }
            Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * sign(xv))
                    .collect();
                Self::accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                Self::accumulate(grads, *x, self.like(*x, vec![g.item(); len]));
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                Self::accumulate(grads, *x, self.like(*x, vec![g.item() / len as f64; len]));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.item() / av.len() as f64;
                let diff: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                if self.needs(*b) {
                    Self::accumulate(grads, *b, self.like(*b, diff.iter().map(|d| -d).collect()));
                }
                if self.needs(*a) {
                    Self::accumulate(grads, *a, self.like(*a, diff));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gam[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gam[j];
                        dx[r * c + j] =
                            rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    Self::accumulate(grads, *x, self.like(*x, dx));
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, self.like(*gamma, dgamma));
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, self.like(*beta, dbeta));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, v) in dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                    {
                        *t += v;
                    }
                }
                Self::accumulate(grads, *table, self.like(*table, dt));
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for (t, v) in dx[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&gd[r * c..(r + 1) * c])
                    {
                        *t += v;
                    }
                }
                Self::accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (v, &i) in gd.iter().zip(idx) {
                    dx[i] += v;
                }
                Self::accumulate(grads, *x, self.like(*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        Self::accumulate(grads, p, self.like(p, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::PadCols { x, left } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let total = g.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    dx.extend_from_slice(&gd[r * total + left..r * total + left + c]);
                }
                Self::accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => Self::accumulate(grads, *x, self.like(*x, gd.to_vec())),
            Op::Attention {
                q,
                k,
                v,
                key_bias,
                spec,
                probs,
            } => {
                let (batch, seq, layout) = (spec.batch, spec.seq, spec.layout);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (qw, kw) = (layout.q_width(), layout.kv_width());
                let hnn = layout.heads * seq * seq;
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let want_bias = key_bias.is_some_and(|b| self.needs(b));
                let mut dbias = vec![0.0; if want_bias { batch * seq } else { 0 }];
                for b in 0..batch {
                    let qs = b * seq * qw..(b + 1) * seq * qw;
                    let ks = b * seq * kw..(b + 1) * seq * kw;
                    attention_backward(
                        &qv.data()[qs.clone()],
                        &kv.data()[ks.clone()],
                        &vv.data()[ks.clone()],
                        &probs[b * hnn..(b + 1) * hnn],
                        &gd[qs.clone()],
                        seq,
                        layout,
                        &mut dq[qs],
                        &mut dk[ks.clone()],
                        &mut dv[ks],
                        want_bias.then(|| &mut dbias[b * seq..(b + 1) * seq]),
                    );
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        Self::accumulate(grads, var, self.like(var, d));
                    }
                }
                if let (Some(bv), true) = (key_bias, want_bias) {
                    Self::accumulate(grads, *bv, self.like(*bv, dbias));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let count = targets.iter().flatten().count() as f64;
                let scale = g.item() / count;
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut d[r * vocab..(r + 1) * vocab];
                        for (dv, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *dv = scale * p;
                        }
                        row[t] -= scale;
                    }
                }
                Self::accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::Round(_) => return Err(Error::NoGradientRule(node.op.name())),
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
