//! Finite-difference checks of the training objectives on a tiny model.

use serde::Serialize;

use super::loops::{classifier_input, supervised_targets};
use super::losses::{stage1_loss, stage2_loss, RegKind};
use crate::data::{gen_sample_with, Codebook, DataConfig, NeedleSample};
use crate::error::Result;
use crate::model::{Classifier, GraphMask, Lvlm, ModelConfig};
use crate::numerics::{finite_diff_check, FdConfig, Graph, Rng, Tensor, Var};

/// Regularizer weight used by the stage-2 checks, large enough that the
/// regularizer gradient is not swamped by cross-entropy.
pub const CHECK_K: f64 = 1.0;

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

struct Fixture {
    lvlm: Lvlm,
    classifier: Classifier,
    dcfg: DataConfig,
    samples: Vec<NeedleSample>,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = ModelConfig::preset("tiny")?;
    let dcfg = DataConfig {
        n_v: 8,
        m: 3,
        classes: 4,
        patch_dim: cfg.patch_dim,
        ..DataConfig::default()
    };
    let cb = Codebook::new(dcfg.classes, dcfg.patch_dim, dcfg.codebook_seed)?;
    let samples = (0..2)
        .map(|i| gen_sample_with(&dcfg, &cb, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut classifier = Classifier::new(cfg.clone(), seed ^ 0x5eed)?;
    // Move the head off its small initial scale so every path carries gradient.
    let mut rng = Rng::new(seed);
    for w in classifier
        .params_mut()
        .get_mut("cls.out_w")
        .expect("head weight")
        .data_mut()
    {
        *w = rng.normal() * 0.5;
    }
    Ok(Fixture {
        lvlm: Lvlm::new(cfg, seed)?,
        classifier,
        dcfg,
        samples,
    })
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// Checks the stage-1 loss and the stage-2 total loss under both
/// regularizers, differentiating with respect to the classifier parameters.
pub fn loss_grad_checks(fd: &FdConfig, seed: u64) -> Result<Vec<LossCheck>> {
    let fx = fixture(seed)?;
    let bsz = fx.samples.len();
    let n_v = fx.dcfg.n_v;
    let x = stack(
        &fx.samples
            .iter()
            .map(|s| classifier_input(&fx.lvlm, s, &fx.dcfg))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut rng = Rng::new(seed ^ 0x1abe1);
    let labels = Tensor::new(
        vec![bsz, n_v],
        (0..bsz * n_v).map(|_| rng.uniform() * 0.1).collect(),
    )?;
    let params = fx.classifier.params().tensors();
    let store = fx.classifier.params();
    let mut out = Vec::new();

    let report = finite_diff_check(&params, fd, |g: &mut Graph, vars: &[Var]| {
        let b = store.bind_vars(vars);
        let xv = g.constant(x.clone());
        let s = fx.classifier.score_graph(g, &b, xv, bsz, n_v)?;
        let y = g.constant(labels.clone());
        stage1_loss(g, s, y)
    })?;
    out.push(LossCheck {
        name: "stage1-mse".into(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        pass: report.pass,
    });

    let layout = fx.dcfg.train_layout();
    let positions: Vec<usize> = (0..layout.n).collect();
    let vocab = fx.dcfg.vocab();
    let emb = stack(
        &fx.samples
            .iter()
            .map(|s| {
                fx.lvlm
                    .embed_sequence(&layout, &s.text_ids(vocab, true), &s.patches)
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let targets: Vec<Option<usize>> = fx
        .samples
        .iter()
        .flat_map(|s| supervised_targets(s, &fx.dcfg))
        .collect();
    for (name, kind) in [
        ("stage2-contrastive", RegKind::Contrastive),
        ("stage2-naive", RegKind::Naive),
    ] {
        let report = finite_diff_check(&params, fd, |g: &mut Graph, vars: &[Var]| {
            let bc = store.bind_vars(vars);
            let bl = fx.lvlm.params().bind(g, false);
            let xv = g.constant(x.clone());
            let s = fx.classifier.score_graph(g, &bc, xv, bsz, n_v)?;
            let p = g.sigmoid(s);
            let lb = g.log_clamped(p, super::losses::BIAS_CLAMP);
            let kb = g.pad_cols(lb, layout.visual_offset, layout.n)?;
            let e = g.constant(emb.clone());
            let mask = GraphMask {
                dense: None,
                key_bias: Some(kb),
            };
            let logits = fx.lvlm.forward_graph(g, &bl, e, &positions, bsz, &mask)?;
            let (total, _, _) = stage2_loss(g, logits, &targets, p, 0.25, CHECK_K, kind)?;
            Ok(total)
        })?;
        out.push(LossCheck {
            name: name.into(),
            max_rel_err: report.max_rel_err,
            checked: report.checked,
            pass: report.pass,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registered_losses_pass() {
        let fd = FdConfig {
            samples: 60,
            ..FdConfig::default()
        };
        for c in loss_grad_checks(&fd, 3).unwrap() {
            assert!(c.pass, "{} max rel err {:e}", c.name, c.max_rel_err);
        }
    }
}
