use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctxprune::data::{
    gen_dataset, load_dataset, save_dataset, DataConfig, Dataset, NeedleSample, Split,
};
use ctxprune::inference::{
    bench_sweep, evaluate, kv_entries_closed_form, layer_prune_flops, mean_signal_auc,
    retain_probabilities, write_csv, BenchCase, BenchRow, EvalReport, PruneConfig, PruneMode,
};
use ctxprune::model::{
    load_classifier, load_lvlm, save_classifier, save_lvlm, Classifier, Lvlm, ModelConfig,
};
use ctxprune::numerics::FdConfig;
use ctxprune::scoring::retain_count;
use ctxprune::training::{
    loss_grad_checks, train_base, train_stage1, train_stage2, ClassifierInit, PHistogram,
    TrainReport,
};
use serde::Serialize;

use crate::config;
use crate::fail::{Fail, Kind};
use crate::output::Staging;

/// Samples used for classifier diagnostics after training.
const DIAG_SAMPLES: usize = 256;

pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub force: bool,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Fail::new(
            Kind::MissingArtifact,
            format!("{what} not found at {}", path.display()),
        )
        .into());
    }
    Ok(())
}

fn open_data(st: &mut Staging, dir: &Path) -> Result<Dataset> {
    require(dir, "dataset")?;
    st.input(dir)?;
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn open_lvlm(st: &mut Staging, path: &Path) -> Result<Lvlm> {
    require(path, "language model checkpoint")?;
    st.input(path)?;
    load_lvlm(path).with_context(|| format!("loading {}", path.display()))
}

fn open_classifier(st: &mut Staging, path: Option<&Path>) -> Result<Option<Classifier>> {
    let Some(path) = path else { return Ok(None) };
    require(path, "classifier checkpoint")?;
    st.input(path)?;
    Ok(Some(
        load_classifier(path).with_context(|| format!("loading {}", path.display()))?,
    ))
}

fn split_of(ds: &Dataset, name: &str, limit: Option<usize>) -> Result<Vec<NeedleSample>> {
    let split = match name {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(Fail::new(Kind::InvalidConfig, format!("unknown split `{other}`")).into())
        }
    };
    let all = ds.split(split);
    let n = limit.unwrap_or(all.len()).min(all.len());
    if n == 0 {
        return Err(Fail::new(
            Kind::InvalidConfig,
            format!("split `{name}` has no samples"),
        )
        .into());
    }
    Ok(all[..n].to_vec())
}

/// Model config with the classifier fields taken from `preset`.
fn classifier_shape(base: &ModelConfig, preset: Option<&str>) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    if let Some(name) = preset {
        let p =
            ModelConfig::preset(name).map_err(|e| Fail::new(Kind::InvalidConfig, e.to_string()))?;
        cfg.classifier_layers = p.classifier_layers;
        cfg.classifier_hidden = p.classifier_hidden;
        cfg.classifier_intermediate = p.classifier_intermediate;
        cfg.classifier_heads = p.classifier_heads;
        cfg.classifier_kv_heads = p.classifier_kv_heads;
    }
    Ok(cfg)
}

fn write_report(st: &Staging, report: &TrainReport) -> Result<()> {
    st.write("loss.csv", report.loss_csv())
}

#[derive(Serialize)]
struct ClassifierDiag {
    samples: usize,
    signal_auc: f64,
    p_histogram: PHistogram,
}

fn diagnose(lvlm: &Lvlm, c: &Classifier, ds: &Dataset) -> Result<ClassifierDiag> {
    let val = ds.split(Split::Val);
    let samples = if val.is_empty() {
        ds.split(Split::Train)
    } else {
        val
    };
    let samples = &samples[..samples.len().min(DIAG_SAMPLES)];
    let p = retain_probabilities(lvlm, c, samples, &ds.config)?;
    Ok(ClassifierDiag {
        samples: samples.len(),
        signal_auc: mean_signal_auc(lvlm, c, samples, &ds.config)?,
        p_histogram: PHistogram::new(0, &p, 10),
    })
}

pub fn gen_data(c: Common) -> Result<PathBuf> {
    let mut cfg: config::GenData = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.data.seed = s;
    }
    cfg.data
        .validate()
        .map_err(|e| Fail::new(Kind::InvalidConfig, e.to_string()))?;
    let st = Staging::new(c.out, c.force)?;
    let ds = gen_dataset(&cfg.data)?;
    save_dataset(&ds, st.dir())?;
    println!(
        "generated {} train / {} val / {} test samples",
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    st.finish("gen-data", &cfg)
}

#[derive(Serialize)]
struct BaseMetrics {
    steps: usize,
    final_loss: Option<f64>,
    val_accuracy: f64,
}

pub fn train_base_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::TrainBase = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let mut mcfg = match &cfg.model {
        Some(m) => m.clone(),
        None => ModelConfig::preset(&cfg.preset)
            .map_err(|e| Fail::new(Kind::InvalidConfig, e.to_string()))?,
    };
    mcfg.vocab = ds.config.vocab().size();
    mcfg.patch_dim = ds.config.patch_dim;
    let mut lvlm = Lvlm::new(mcfg, cfg.train.seed)?;
    let report = train_base(&mut lvlm, &ds.train, &ds.config, &cfg.train)?;
    let val = if ds.val.is_empty() { &ds.test } else { &ds.val };
    let acc = evaluate(
        &lvlm,
        None,
        val,
        &ds.config,
        &PruneConfig::new(PruneMode::None, 1.0),
    )?
    .accuracy;
    save_lvlm(&lvlm, &st.path("lvlm.ckpt"))?;
    write_report(&st, &report)?;
    st.write_json(
        "metrics.json",
        &BaseMetrics {
            steps: report.steps.len(),
            final_loss: report.final_loss(),
            val_accuracy: acc,
        },
    )?;
    println!(
        "base model: {} steps, val accuracy {acc:.4}",
        report.steps.len()
    );
    st.finish("train-base", &cfg)
}

#[derive(Serialize)]
struct StageMetrics {
    steps: usize,
    final_loss: Option<f64>,
    lvlm_checksum_before: String,
    lvlm_checksum_after: String,
    diagnostics: ClassifierDiag,
}

pub fn train_stage1_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::TrainStage1 = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if cfg.train.stage != 1 {
        return Err(Fail::new(Kind::InvalidConfig, "train-stage1 needs train.stage = 1").into());
    }
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let ccfg = classifier_shape(lvlm.config(), cfg.classifier_preset.as_deref())?;
    let mut classifier = Classifier::new(ccfg, cfg.train.seed)?;
    let report = train_stage1(&lvlm, &mut classifier, &ds.train, &ds.config, &cfg.train)?;
    let diagnostics = diagnose(&lvlm, &classifier, &ds)?;
    save_classifier(&classifier, &st.path("classifier.ckpt"))?;
    write_report(&st, &report)?;
    println!(
        "stage 1: {} steps, final loss {:.3e}, signal AUC {:.4}",
        report.steps.len(),
        report.final_loss().unwrap_or(f64::NAN),
        diagnostics.signal_auc
    );
    st.write_json(
        "metrics.json",
        &StageMetrics {
            steps: report.steps.len(),
            final_loss: report.final_loss(),
            lvlm_checksum_before: report.lvlm_checksum_before,
            lvlm_checksum_after: report.lvlm_checksum_after,
            diagnostics,
        },
    )?;
    st.finish("train-stage1", &cfg)
}

pub fn train_stage2_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::TrainStage2 = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if cfg.train.stage != 2 {
        return Err(Fail::new(Kind::InvalidConfig, "train-stage2 needs train.stage = 2").into());
    }
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let mut lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let mut classifier = match cfg.train.init {
        ClassifierInit::Stage1 => {
            let path = cfg.classifier.as_deref().ok_or_else(|| {
                Fail::new(
                    Kind::MissingArtifact,
                    "stage 2 starts from a stage-1 classifier: set `classifier` or train.init = \"random\"",
                )
            })?;
            open_classifier(&mut st, Some(path))?.expect("path given")
        }
        ClassifierInit::Random => {
            let ccfg = classifier_shape(lvlm.config(), cfg.classifier_preset.as_deref())?;
            Classifier::new(ccfg, cfg.train.seed)?
        }
    };
    let report = train_stage2(
        &mut lvlm,
        &mut classifier,
        &ds.train,
        &ds.config,
        &cfg.train,
    )?;
    let diagnostics = diagnose(&lvlm, &classifier, &ds)?;
    save_classifier(&classifier, &st.path("classifier.ckpt"))?;
    if !cfg.train.freeze_lvlm {
        save_lvlm(&lvlm, &st.path("lvlm.ckpt"))?;
    }
    write_report(&st, &report)?;
    st.write_json("histograms.json", &report.histograms)?;
    println!(
        "stage 2: {} steps, final loss {:.4}, signal AUC {:.4}, P outside [0.1, 0.9] {:.3}",
        report.steps.len(),
        report.final_loss().unwrap_or(f64::NAN),
        diagnostics.signal_auc,
        diagnostics.p_histogram.frac_outside
    );
    st.write_json(
        "metrics.json",
        &StageMetrics {
            steps: report.steps.len(),
            final_loss: report.final_loss(),
            lvlm_checksum_before: report.lvlm_checksum_before,
            lvlm_checksum_after: report.lvlm_checksum_after,
            diagnostics,
        },
    )?;
    st.finish("train-stage2", &cfg)
}

fn default_modes(classifier: bool) -> Vec<PruneMode> {
    let mut m = vec![PruneMode::None, PruneMode::Random, PruneMode::Oracle];
    if classifier {
        m.insert(1, PruneMode::CovipalPreLlm);
    }
    m
}

/// Every (mode, r) pair, with `none` once at full ratio.
fn grid(modes: &[PruneMode], ratios: &[f64]) -> Vec<(PruneMode, f64)> {
    let mut out = Vec::new();
    for &m in modes {
        if m == PruneMode::None {
            out.push((m, 1.0));
        } else {
            out.extend(ratios.iter().map(|&r| (m, r)));
        }
    }
    out
}

#[derive(Serialize)]
struct EvalOutput {
    split: String,
    rows: Vec<EvalReport>,
    diagnostics: Option<ClassifierDiag>,
}

pub fn eval_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::Eval = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let classifier = open_classifier(&mut st, cfg.classifier.as_deref())?;
    let samples = split_of(&ds, &cfg.split, cfg.limit)?;
    let modes = cfg
        .modes
        .clone()
        .unwrap_or_else(|| default_modes(classifier.is_some()));
    let mut rows = Vec::new();
    let mut csv = String::from("mode,r,samples,accuracy,signal_recall,mean_retained\n");
    for (mode, r) in grid(&modes, &cfg.ratios) {
        let pc = PruneConfig {
            seed: cfg.seed,
            ..PruneConfig::new(mode, r)
        };
        let rep = evaluate(&lvlm, classifier.as_ref(), &samples, &ds.config, &pc)?;
        println!("{:<20} r={:<5} accuracy {:.4}", rep.mode, r, rep.accuracy);
        csv.push_str(&format!(
            "\"{}\",{},{},{},{},{}\n",
            rep.mode, rep.r, rep.samples, rep.accuracy, rep.signal_recall, rep.mean_retained
        ));
        rows.push(rep);
    }
    let diagnostics = match &classifier {
        Some(cl) => {
            let p = retain_probabilities(&lvlm, cl, &samples, &ds.config)?;
            Some(ClassifierDiag {
                samples: samples.len(),
                signal_auc: mean_signal_auc(&lvlm, cl, &samples, &ds.config)?,
                p_histogram: PHistogram::new(0, &p, 10),
            })
        }
        None => None,
    };
    st.write("eval.csv", csv)?;
    st.write_json(
        "eval.json",
        &EvalOutput {
            split: cfg.split.clone(),
            rows,
            diagnostics,
        },
    )?;
    st.finish("eval", &cfg)
}

fn emit_rows(st: &Staging, rows: &[BenchRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    st.write("metrics.csv", buf)?;
    st.write_json("metrics.json", &rows)?;
    for r in rows {
        println!(
            "{:<20} r={:<5} n={:<5} flops {:>14} prefill {:>9.2} ms kv {:>8}",
            r.mode, r.r, r.n, r.prefill_flops, r.prefill_ms, r.kv_entries
        );
    }
    Ok(())
}

fn cases(modes: &[PruneMode], ratios: &[f64], sizes: &[usize]) -> Vec<BenchCase> {
    sizes
        .iter()
        .flat_map(|&n_v| {
            grid(modes, ratios)
                .into_iter()
                .map(move |(mode, r)| BenchCase { mode, r, n_v })
        })
        .collect()
}

pub fn sweep_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::Sweep = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.bench.seed = s;
    }
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let classifier = open_classifier(&mut st, cfg.classifier.as_deref())?;
    let samples = split_of(&ds, &cfg.split, cfg.limit)?;
    let modes = cfg
        .modes
        .clone()
        .unwrap_or_else(|| default_modes(classifier.is_some()));
    let rows = bench_sweep(
        &lvlm,
        classifier.as_ref(),
        &cases(&modes, &cfg.ratios, &[ds.config.n_v]),
        &samples,
        &ds.config,
        &cfg.bench,
    )?;
    emit_rows(&st, &rows)?;
    st.finish("sweep", &cfg)
}

pub fn bench_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::Bench = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.bench.seed = s;
    }
    let mut st = Staging::new(c.out, c.force)?;
    let lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let classifier = open_classifier(&mut st, cfg.classifier.as_deref())?;
    let (dcfg, samples) = match &cfg.data_dir {
        Some(dir) => {
            let ds = open_data(&mut st, dir)?;
            let samples = split_of(&ds, &cfg.split, cfg.limit)?;
            (ds.config, samples)
        }
        None => {
            let m = lvlm.config();
            let dcfg = DataConfig {
                patch_dim: m.patch_dim,
                classes: m.vocab - 5,
                ..DataConfig::default()
            };
            (dcfg, Vec::new())
        }
    };
    let modes = cfg
        .modes
        .clone()
        .unwrap_or_else(|| default_modes(classifier.is_some()));
    let rows = bench_sweep(
        &lvlm,
        classifier.as_ref(),
        &cases(&modes, &cfg.ratios, &cfg.n_v),
        &samples,
        &dcfg,
        &cfg.bench,
    )?;
    emit_rows(&st, &rows)?;
    st.finish("bench", &cfg)
}

pub fn grad_check_cmd(c: Common) -> Result<PathBuf> {
    let mut cfg: config::GradCheck = config::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let st = Staging::new(c.out, c.force)?;
    let fd = FdConfig {
        step: cfg.step,
        tol: cfg.tol,
        samples: cfg.samples,
        seed: cfg.seed,
    };
    let checks = loss_grad_checks(&fd, cfg.seed)?;
    for ch in &checks {
        println!(
            "{:<20} max rel err {:.3e} over {} coords  {}",
            ch.name,
            ch.max_rel_err,
            ch.checked,
            if ch.pass { "ok" } else { "FAIL" }
        );
    }
    st.write_json("grad_check.json", &checks)?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.as_str())
        .collect();
    let out = st.finish("grad-check", &cfg)?;
    if !failed.is_empty() {
        return Err(Fail::new(
            Kind::CheckFailed,
            format!(
                "gradient check above tolerance {:e}: {}",
                cfg.tol,
                failed.join(", ")
            ),
        )
        .into());
    }
    Ok(out)
}

#[derive(Serialize)]
struct PrelimRow {
    l_p: usize,
    l_g: usize,
    r: f64,
    accuracy: f64,
    signal_recall: f64,
    prefill_flops: u64,
    kv_entries: u64,
}

pub fn repro_prelim_cmd(c: Common) -> Result<PathBuf> {
    let cfg: config::ReproPrelim = config::load(c.config.as_deref())?;
    let mut st = Staging::new(c.out, c.force)?;
    let ds = open_data(&mut st, &cfg.data_dir)?;
    let lvlm = open_lvlm(&mut st, &cfg.lvlm)?;
    let samples = split_of(&ds, &cfg.split, cfg.limit)?;
    let layers: Vec<usize> = (0..lvlm.config().decoder_layers).collect();
    let prune = cfg.prune_layers.clone().unwrap_or_else(|| layers.clone());
    let guide = cfg.guide_layers.clone().unwrap_or(layers);
    let layout = ds.config.prompt_layout();
    let kept = layout.text_len() + retain_count(cfg.r, layout.n_v)?;
    let mut rows = Vec::new();
    let mut csv = String::from("l_p,l_g,r,accuracy,signal_recall,prefill_flops,kv_entries\n");
    for &l_p in &prune {
        for &l_g in &guide {
            let pc = PruneConfig {
                label_mode: cfg.label_mode,
                normalize: cfg.normalize,
                ..PruneConfig::new(PruneMode::LayerPrune { l_p, l_g }, cfg.r)
            };
            let rep = evaluate(&lvlm, None, &samples, &ds.config, &pc)?;
            let row = PrelimRow {
                l_p,
                l_g,
                r: cfg.r,
                accuracy: rep.accuracy,
                signal_recall: rep.signal_recall,
                prefill_flops: layer_prune_flops(layout.n, kept, l_p, l_g, lvlm.config()),
                kv_entries: kv_entries_closed_form(layout.n, kept, l_p, lvlm.config()),
            };
            println!(
                "L_p={l_p} L_g={l_g} accuracy {:.4} recall {:.3}",
                row.accuracy, row.signal_recall
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.l_p,
                row.l_g,
                row.r,
                row.accuracy,
                row.signal_recall,
                row.prefill_flops,
                row.kv_entries
            ));
            rows.push(row);
        }
    }
    st.write("prelim.csv", csv)?;
    st.write_json("prelim.json", &rows)?;
    st.finish("repro-prelim", &cfg)
}
