//! Training loops: base fine-tuning, stage 1 and stage 2.

use serde::{Deserialize, Serialize};

use super::config::{BaseTrainConfig, ClassifierInit, TrainConfig};
use super::losses::{stage1_loss, stage2_loss};
use super::optim::{CosineSchedule, Optimizer};
use crate::data::{DataConfig, NeedleSample};
use crate::error::{ensure, Error, Result};
use crate::model::{Classifier, ForwardOptions, GraphMask, Lvlm, TokenLayout};
use crate::numerics::{mix_seed, Graph, Rng, Tensor};
use crate::scoring::accumulate_attention_labels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: Option<f64>,
    pub reg: Option<f64>,
    pub k: Option<f64>,
    pub mean_p: Option<f64>,
}

/// Histogram of retention probabilities over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PHistogram {
    pub step: usize,
    pub bins: Vec<usize>,
    pub count: usize,
    pub mean: f64,
    /// Share of values below 0.1 or above 0.9.
    pub frac_outside: f64,
}

impl PHistogram {
    pub fn new(step: usize, p: &[f64], bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for &v in p {
            let b = ((v * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let outside = p.iter().filter(|&&v| !(0.1..=0.9).contains(&v)).count();
        PHistogram {
            step,
            bins: counts,
            count: p.len(),
            mean: p.iter().sum::<f64>() / p.len().max(1) as f64,
            frac_outside: outside as f64 / p.len().max(1) as f64,
        }
    }

    pub fn frac_inside(&self) -> f64 {
        1.0 - self.frac_outside
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: Vec<StepLog>,
    pub histograms: Vec<PHistogram>,
    pub lvlm_checksum_before: String,
    pub lvlm_checksum_after: String,
}

impl TrainReport {
    /// `step,lr,loss,ce,reg,k,mean_p` with empty cells for absent values.
    pub fn loss_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from("step,lr,loss,ce,reg,k,mean_p\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:e},{:e},{},{},{},{}\n",
                s.step,
                s.lr,
                s.loss,
                opt(s.ce),
                opt(s.reg),
                opt(s.k),
                opt(s.mean_p)
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Classifier input `[H_v; H_t]` for one sample, using the prompt text.
pub fn classifier_input(lvlm: &Lvlm, sample: &NeedleSample, dcfg: &DataConfig) -> Result<Tensor> {
    let h_v = lvlm.encode_vision(&sample.patches)?;
    let h_t = lvlm.embed_tokens(&sample.text_ids(dcfg.vocab(), false))?;
    let mut data = h_v.into_data();
    data.extend_from_slice(h_t.data());
    let rows = data.len() / lvlm.config().hidden;
    Tensor::new(vec![rows, lvlm.config().hidden], data)
}

/// Supervision on the training layout: the last prompt position predicts the
/// answer, the answer position predicts end of sequence.
pub fn supervised_targets(sample: &NeedleSample, dcfg: &DataConfig) -> Vec<Option<usize>> {
    let n = dcfg.train_layout().n;
    let mut t = vec![None; n];
    t[n - 2] = Some(sample.answer);
    t[n - 1] = Some(dcfg.vocab().eos());
    t
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Shuffled minibatches of sample indices for every epoch, capped at `max_steps`.
fn batch_plan(
    n: usize,
    batch: usize,
    epochs: usize,
    max_steps: Option<usize>,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut plan = Vec::new();
    for e in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(mix_seed(seed ^ mix_seed(e as u64))).shuffle(&mut order);
        plan.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    if let Some(m) = max_steps {
        plan.truncate(m);
    }
    plan
}

fn check_data(data: &[NeedleSample], dcfg: &DataConfig, lvlm: &Lvlm) -> Result<()> {
    ensure!(
        !data.is_empty(),
        Error::InvalidArgument("no training samples".into())
    );
    ensure!(
        dcfg.vocab().size() <= lvlm.config().vocab && dcfg.patch_dim == lvlm.config().patch_dim,
        Error::InvalidArgument(format!(
            "data (vocab {}, patch_dim {}) does not fit model (vocab {}, patch_dim {})",
            dcfg.vocab().size(),
            dcfg.patch_dim,
            lvlm.config().vocab,
            lvlm.config().patch_dim
        ))
    );
    Ok(())
}

/// Fine-tunes the whole language model (vision stub included) on the task.
pub fn train_base(
    lvlm: &mut Lvlm,
    data: &[NeedleSample],
    dcfg: &DataConfig,
    cfg: &BaseTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(data, dcfg, lvlm)?;
    let before = lvlm.params().checksum();
    let layout = dcfg.train_layout();
    let positions: Vec<usize> = (0..layout.n).collect();
    let plan = batch_plan(data.len(), cfg.batch, cfg.epochs, cfg.max_steps, cfg.seed);
    let sched = CosineSchedule {
        base: cfg.lr,
        floor: cfg.lr_floor,
        total: plan.len(),
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let vocab = dcfg.vocab();
    let mut steps = Vec::with_capacity(plan.len());
    for (step, idx) in plan.iter().enumerate() {
        let bsz = idx.len();
        let patches = stack(
            &idx.iter()
                .map(|&i| data[i].patches.clone())
                .collect::<Vec<_>>(),
        )?;
        let text: Vec<usize> = idx
            .iter()
            .flat_map(|&i| data[i].text_ids(vocab, true))
            .collect();
        let targets: Vec<Option<usize>> = idx
            .iter()
            .flat_map(|&i| supervised_targets(&data[i], dcfg))
            .collect();
        let mut g = Graph::new();
        let b = lvlm.params().bind(&mut g, true);
        let pv = g.constant(patches);
        let emb = lvlm.embed_graph(&mut g, &b, &layout, bsz, &text, pv)?;
        let logits = lvlm.forward_graph(&mut g, &b, emb, &positions, bsz, &GraphMask::default())?;
        let loss = g.cross_entropy(logits, &targets)?;
        let lv = g.value(loss).item();
        ensure!(
            lv.is_finite(),
            Error::NonFinite(format!("base loss at step {step}"))
        );
        g.backward(loss)?;
        let grads = lvlm.params().collect_grads(&g, &b);
        let lr = sched.lr(step);
        opt.step(lvlm.params_mut(), &grads, lr);
        steps.push(StepLog {
            step,
            lr,
            loss: lv,
            ce: Some(lv),
            reg: None,
            k: None,
            mean_p: None,
        });
    }
    Ok(TrainReport {
        stage: "base".into(),
        steps,
        histograms: Vec::new(),
        lvlm_checksum_before: before,
        lvlm_checksum_after: lvlm.params().checksum(),
    })
}

/// Attention labels for one sample from a prompt-only prefill through the guidance layer.
pub fn stage1_labels(
    lvlm: &Lvlm,
    sample: &NeedleSample,
    dcfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let layout = dcfg.prompt_layout();
    let emb = lvlm.embed_sequence(
        &layout,
        &sample.text_ids(dcfg.vocab(), false),
        &sample.patches,
    )?;
    let positions: Vec<usize> = (0..layout.n).collect();
    let out = lvlm.forward(
        &emb,
        &positions,
        &ForwardOptions {
            capture: Some(cfg.guidance_layer),
            stop_after: Some(cfg.guidance_layer),
            ..Default::default()
        },
    )?;
    let cap = out.capture.expect("capture requested");
    accumulate_attention_labels(&cap, &layout, cfg.label_mode, cfg.normalize)
}

/// Stage-1 regression of classifier scores onto attention labels.
pub fn train_stage1(
    lvlm: &Lvlm,
    classifier: &mut Classifier,
    data: &[NeedleSample],
    dcfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(lvlm.config().decoder_layers)?;
    ensure!(
        cfg.stage == 1,
        Error::InvalidArgument("train_stage1 needs stage = 1".into())
    );
    check_data(data, dcfg, lvlm)?;
    let before = lvlm.params().checksum();
    let labels: Vec<Vec<f64>> = data
        .iter()
        .map(|s| stage1_labels(lvlm, s, dcfg, cfg))
        .collect::<Result<_>>()?;
    let plan = batch_plan(data.len(), cfg.batch, cfg.epochs, cfg.max_steps, cfg.seed);
    let sched = CosineSchedule {
        base: cfg.effective_lr(),
        floor: cfg.lr_floor,
        total: plan.len(),
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let n_v = dcfg.n_v;
    let mut steps = Vec::with_capacity(plan.len());
    for (step, idx) in plan.iter().enumerate() {
        let bsz = idx.len();
        let x = stack(
            &idx.iter()
                .map(|&i| classifier_input(lvlm, &data[i], dcfg))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let y = Tensor::new(
            vec![bsz, n_v],
            idx.iter().flat_map(|&i| labels[i].clone()).collect(),
        )?;
        let mut g = Graph::new();
        let b = classifier.params().bind(&mut g, true);
        let xv = g.constant(x);
        let s = classifier.score_graph(&mut g, &b, xv, bsz, n_v)?;
        let yv = g.constant(y);
        let loss = stage1_loss(&mut g, s, yv)?;
        let lv = g.value(loss).item();
        ensure!(
            lv.is_finite(),
            Error::NonFinite(format!("stage-1 loss at step {step}"))
        );
        g.backward(loss)?;
        let grads = classifier.params().collect_grads(&g, &b);
        let lr = sched.lr(step);
        opt.step(classifier.params_mut(), &grads, lr);
        steps.push(StepLog {
            step,
            lr,
            loss: lv,
            ce: None,
            reg: None,
            k: None,
            mean_p: None,
        });
    }
    let after = lvlm.params().checksum();
    ensure!(after == before, Error::FrozenModelChanged);
    Ok(TrainReport {
        stage: "stage1".into(),
        steps,
        histograms: Vec::new(),
        lvlm_checksum_before: before,
        lvlm_checksum_after: after,
    })
}

/// Stage-2 training through the soft attention mask.
pub fn train_stage2(
    lvlm: &mut Lvlm,
    classifier: &mut Classifier,
    data: &[NeedleSample],
    dcfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(lvlm.config().decoder_layers)?;
    ensure!(
        cfg.stage == 2,
        Error::InvalidArgument("train_stage2 needs stage = 2".into())
    );
    check_data(data, dcfg, lvlm)?;
    if cfg.init == ClassifierInit::Stage1 {
        ensure!(
            !classifier.is_untrained(),
            Error::MissingArtifact(
                "stage 2 expects a stage-1 classifier, got untrained weights".into()
            )
        );
    }
    let before = lvlm.params().checksum();
    let layout: TokenLayout = dcfg.train_layout();
    let positions: Vec<usize> = (0..layout.n).collect();
    let n_v = dcfg.n_v;
    let vocab = dcfg.vocab();
    let plan = batch_plan(data.len(), cfg.batch, cfg.epochs, cfg.max_steps, cfg.seed);
    let sched = CosineSchedule {
        base: cfg.effective_lr(),
        floor: cfg.lr_floor,
        total: plan.len(),
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut lvlm_opt = Optimizer::new(cfg.optimizer);
    let mut steps = Vec::with_capacity(plan.len());
    let mut histograms = Vec::new();
    for (step, idx) in plan.iter().enumerate() {
        let bsz = idx.len();
        let x = stack(
            &idx.iter()
                .map(|&i| classifier_input(lvlm, &data[i], dcfg))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let targets: Vec<Option<usize>> = idx
            .iter()
            .flat_map(|&i| supervised_targets(&data[i], dcfg))
            .collect();
        let k = match cfg.warmup_k {
            Some(wk) if step < cfg.warmup_steps => wk,
            _ => cfg.k,
        };
        let mut g = Graph::new();
        let bc = classifier.params().bind(&mut g, true);
        let bl = lvlm.params().bind(&mut g, !cfg.freeze_lvlm);
        let xv = g.constant(x);
        let s = classifier.score_graph(&mut g, &bc, xv, bsz, n_v)?;
        let p = g.sigmoid(s);
        let lb = g.log_clamped(p, cfg.bias_clamp);
        let kb = g.pad_cols(lb, layout.visual_offset, layout.n)?;
        let emb = if cfg.freeze_lvlm {
            let e = stack(
                &idx.iter()
                    .map(|&i| {
                        lvlm.embed_sequence(
                            &layout,
                            &data[i].text_ids(vocab, true),
                            &data[i].patches,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?;
            g.constant(e)
        } else {
            let patches = stack(
                &idx.iter()
                    .map(|&i| data[i].patches.clone())
                    .collect::<Vec<_>>(),
            )?;
            let text: Vec<usize> = idx
                .iter()
                .flat_map(|&i| data[i].text_ids(vocab, true))
                .collect();
            let pv = g.constant(patches);
            lvlm.embed_graph(&mut g, &bl, &layout, bsz, &text, pv)?
        };
        let mask = GraphMask {
            dense: None,
            key_bias: Some(kb),
        };
        let logits = lvlm.forward_graph(&mut g, &bl, emb, &positions, bsz, &mask)?;
        let (total, ce, reg) = stage2_loss(&mut g, logits, &targets, p, cfg.r, k, cfg.regularizer)?;
        let lv = g.value(total).item();
        ensure!(
            lv.is_finite(),
            Error::NonFinite(format!("stage-2 loss at step {step}"))
        );
        let pvals = g.value(p).data().to_vec();
        g.backward(total)?;
        let lr = sched.lr(step);
        let grads = classifier.params().collect_grads(&g, &bc);
        opt.step(classifier.params_mut(), &grads, lr);
        if !cfg.freeze_lvlm {
            let lg = lvlm.params().collect_grads(&g, &bl);
            lvlm_opt.step(lvlm.params_mut(), &lg, lr);
        }
        let mean_p = pvals.iter().sum::<f64>() / pvals.len() as f64;
        if step % cfg.hist_every.max(1) == 0 || step + 1 == plan.len() {
            histograms.push(PHistogram::new(step, &pvals, cfg.hist_bins));
        }
        steps.push(StepLog {
            step,
            lr,
            loss: lv,
            ce: Some(g.value(ce).item()),
            reg: Some(g.value(reg).item()),
            k: Some(k),
            mean_p: Some(mean_p),
        });
    }
    let after = lvlm.params().checksum();
    if cfg.freeze_lvlm {
        ensure!(after == before, Error::FrozenModelChanged);
    }
    Ok(TrainReport {
        stage: "stage2".into(),
        steps,
        histograms,
        lvlm_checksum_before: before,
        lvlm_checksum_after: after,
    })
}
