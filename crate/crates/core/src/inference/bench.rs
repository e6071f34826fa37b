//! Timed sweeps over prune settings.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    evaluate, layer_prune_and_decode, prefill_and_decode, prune_pipeline, PruneConfig, PruneMode,
    RunMetrics,
};
use crate::data::{gen_sample_with, Codebook, DataConfig, NeedleSample};
use crate::error::{ensure, Error, Result};
use crate::model::{Classifier, Lvlm, TokenLayout};
use crate::numerics::mix_seed;

pub const CSV_COLUMNS: [&str; 11] = [
    "mode",
    "r",
    "n",
    "n_v",
    "prefill_flops",
    "prefill_ms",
    "decode_tps",
    "kv_entries",
    "kv_bytes",
    "accuracy",
    "classifier_ms",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub mode: PruneMode,
    pub r: f64,
    /// Visual tokens in the timed prompt.
    pub n_v: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub warmup: usize,
    pub reps: usize,
    pub decode_tokens: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 1,
            reps: 5,
            decode_tokens: 8,
            seed: 0,
        }
    }
}

/// One sweep row. Times are medians over the measured repetitions.
/// `prefill_ms` runs from raw patches to first-token logits minus the
/// classifier's share, which is `classifier_ms`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub r: f64,
    pub n: usize,
    pub n_v: usize,
    pub prefill_flops: u64,
    pub prefill_ms: f64,
    pub decode_tps: Option<f64>,
    pub kv_entries: u64,
    pub kv_bytes: u64,
    pub accuracy: Option<f64>,
    pub classifier_ms: Option<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn median_opt(xs: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().collect::<Option<_>>()?;
    (!v.is_empty()).then(|| median(&mut v))
}

fn run_once(
    lvlm: &Lvlm,
    classifier: Option<&Classifier>,
    sample: &NeedleSample,
    dcfg: &DataConfig,
    cfg: &PruneConfig,
    decode_tokens: usize,
) -> Result<RunMetrics> {
    let t0 = Instant::now();
    if let PruneMode::LayerPrune { l_p, l_g } = cfg.mode {
        let layout = TokenLayout::from_spans(2, sample.patches.rows(), sample.query.len());
        let embeds = lvlm.embed_sequence(
            &layout,
            &sample.text_ids(dcfg.vocab(), false),
            &sample.patches,
        )?;
        let embed_ms = t0.elapsed().as_secs_f64() * 1e3;
        let g = layer_prune_and_decode(lvlm, &embeds, &layout, l_p, l_g, cfg, decode_tokens)?;
        return Ok(RunMetrics {
            prefill_ms: embed_ms + g.metrics.prefill_ms,
            ..g.metrics
        });
    }
    let seq = prune_pipeline(sample, lvlm, classifier, dcfg, cfg)?;
    let prune_ms = t0.elapsed().as_secs_f64() * 1e3;
    let g = prefill_and_decode(lvlm, &seq.embeds, &seq.positions, decode_tokens)?;
    Ok(RunMetrics {
        prefill_ms: prune_ms - seq.classifier_ms.unwrap_or(0.0) + g.metrics.prefill_ms,
        classifier_ms: seq.classifier_ms,
        ..g.metrics
    })
}

/// Adds a `none` case at full ratio for every prompt size that lacks one.
fn with_baselines(cases: &[BenchCase]) -> Vec<BenchCase> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let seen = out
            .iter()
            .any(|o: &BenchCase| o.n_v == c.n_v && o.mode == PruneMode::None);
        if !seen
            && !cases
                .iter()
                .any(|o| o.n_v == c.n_v && o.mode == PruneMode::None)
        {
            out.push(BenchCase {
                mode: PruneMode::None,
                r: 1.0,
                n_v: c.n_v,
            });
        }
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Times every case on one synthetic prompt per size.
///
/// Accuracy over `eval` is reported for cases whose size matches `dcfg.n_v`.
pub fn bench_sweep(
    lvlm: &Lvlm,
    classifier: Option<&Classifier>,
    cases: &[BenchCase],
    eval: &[NeedleSample],
    dcfg: &DataConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    ensure!(
        !cases.is_empty(),
        Error::InvalidArgument("bench needs at least one case".into())
    );
    ensure!(
        opts.reps >= 1,
        Error::InvalidArgument("bench needs at least one repetition".into())
    );
    let codebook = Codebook::new(dcfg.classes, dcfg.patch_dim, dcfg.codebook_seed)?;
    let mut rows = Vec::new();
    for case in with_baselines(cases) {
        let cfg = PruneConfig {
            seed: opts.seed,
            ..PruneConfig::new(case.mode, case.r)
        };
        cfg.validate(lvlm.config().decoder_layers)?;
        let tcfg = DataConfig {
            n_v: case.n_v,
            m: dcfg.m.min(case.n_v),
            ..dcfg.clone()
        };
        let sample = gen_sample_with(&tcfg, &codebook, mix_seed(opts.seed ^ case.n_v as u64))?;
        for _ in 0..opts.warmup {
            run_once(lvlm, classifier, &sample, dcfg, &cfg, opts.decode_tokens)?;
        }
        let mut runs = Vec::with_capacity(opts.reps);
        for _ in 0..opts.reps {
            runs.push(run_once(
                lvlm,
                classifier,
                &sample,
                dcfg,
                &cfg,
                opts.decode_tokens,
            )?);
        }
        let accuracy = if case.n_v == dcfg.n_v && !eval.is_empty() {
            Some(evaluate(lvlm, classifier, eval, dcfg, &cfg)?.accuracy)
        } else {
            None
        };
        let mut prefill: Vec<f64> = runs.iter().map(|m| m.prefill_ms).collect();
        let tps: Vec<Option<f64>> = runs.iter().map(|m| m.decode_tps).collect();
        let cls: Vec<Option<f64>> = runs.iter().map(|m| m.classifier_ms).collect();
        rows.push(BenchRow {
            mode: case.mode.to_string(),
            r: case.r,
            n: case.n_v + sample.query.len() + 2,
            n_v: case.n_v,
            prefill_flops: runs[0].prefill_flops,
            prefill_ms: median(&mut prefill),
            decode_tps: median_opt(&tps),
            kv_entries: runs[0].kv_entries,
            kv_bytes: runs.iter().map(|m| m.kv_bytes).max().unwrap_or(0),
            accuracy,
            classifier_ms: median_opt(&cls),
        });
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes rows as CSV with the [`CSV_COLUMNS`] header; absent values are empty.
pub fn write_csv(rows: &[BenchRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            w,
            "\"{}\",{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.r,
            r.n,
            r.n_v,
            r.prefill_flops,
            r.prefill_ms,
            opt(r.decode_tps),
            r.kv_entries,
            r.kv_bytes,
            opt(r.accuracy),
            opt(r.classifier_ms)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sample_with;
    use crate::model::ModelConfig;

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_opt(&[Some(1.0), None]), None);
    }

    #[test]
    fn baseline_rows_are_added_once() {
        let c = |mode, n_v| BenchCase { mode, r: 0.5, n_v };
        let cases = with_baselines(&[
            c(PruneMode::Random, 8),
            c(PruneMode::Oracle, 8),
            c(PruneMode::Random, 16),
        ]);
        let modes: Vec<_> = cases.iter().map(|c| (c.mode, c.n_v)).collect();
        assert_eq!(
            modes,
            vec![
                (PruneMode::None, 8),
                (PruneMode::Random, 8),
                (PruneMode::Oracle, 8),
                (PruneMode::None, 16),
                (PruneMode::Random, 16)
            ]
        );
    }

    #[test]
    fn sweep_rows_and_csv() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let dcfg = DataConfig {
            n_v: 20,
            m: 4,
            classes: 4,
            patch_dim: cfg.patch_dim,
            ..DataConfig::default()
        };
        let lvlm = Lvlm::new(cfg, 1).unwrap();
        let cb = Codebook::new(dcfg.classes, dcfg.patch_dim, dcfg.codebook_seed).unwrap();
        let eval: Vec<_> = (0..3)
            .map(|i| gen_sample_with(&dcfg, &cb, i).unwrap())
            .collect();
        let cases = [
            BenchCase {
                mode: PruneMode::Random,
                r: 0.25,
                n_v: 20,
            },
            BenchCase {
                mode: PruneMode::LayerPrune { l_p: 1, l_g: 0 },
                r: 0.25,
                n_v: 40,
            },
        ];
        let opts = BenchOptions {
            reps: 2,
            decode_tokens: 2,
            ..BenchOptions::default()
        };
        let rows = bench_sweep(&lvlm, None, &cases, &eval, &dcfg, &opts).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].mode, "none");
        assert!(rows[0].accuracy.is_some() && rows[3].accuracy.is_none());
        assert!(rows[1].prefill_flops < rows[0].prefill_flops);
        assert!(rows[1].kv_entries < rows[0].kv_entries);
        assert!(rows
            .iter()
            .all(|r| r.decode_tps.is_some() && r.classifier_ms.is_none()));
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text
            .lines()
            .nth(4)
            .unwrap()
            .starts_with("\"layer-prune(1,0)\",0.25,44,40,"));
    }
}
