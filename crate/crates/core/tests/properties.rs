use ctxprune::data::{gen_sample_with, sample_seed, Codebook, DataConfig, Split};
use ctxprune::inference::{
    flops_model, prefill_and_decode, prune_pipeline, PruneConfig, PruneMode,
};
use ctxprune::model::{
    AttentionCapture, Classifier, ForwardOptions, Lvlm, ModelConfig, PrefillMask, TokenLayout,
};
use ctxprune::numerics::attention::{attention_forward, HeadLayout, ScoreMask};
use ctxprune::numerics::{stable_softmax, Rng, Tensor, MASK_VALUE};
use ctxprune::scoring::{accumulate_attention_labels, dtopk, retain_count, topk_retain, LabelMode};
use ctxprune::training::{reg_contrastive_value, reg_naive_value};
use proptest::prelude::*;

fn tiny() -> Lvlm {
    Lvlm::new(ModelConfig::preset("tiny").unwrap(), 3).unwrap()
}

fn tiny_data(n_v: usize) -> (DataConfig, Codebook) {
    let dcfg = DataConfig {
        n_v,
        m: (n_v / 8).max(1),
        classes: 4,
        patch_dim: 12,
        ..DataConfig::default()
    };
    let cb = Codebook::new(dcfg.classes, dcfg.patch_dim, dcfg.codebook_seed).unwrap();
    (dcfg, cb)
}

fn normal(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Distinct scores: a shuffled evenly spaced grid.
fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
    (1usize..40, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = Rng::new(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.iter().map(|&i| i as f64 * 0.37 - 5.0).collect()
    })
}

fn ratio() -> impl Strategy<Value = f64> {
    (1u32..=1000).prop_map(|k| k as f64 / 1000.0)
}

/// Standard multi-head attention with one key/value head per query head.
fn mha_oracle(q: &[f64], k: &[f64], v: &[f64], n: usize, heads: usize, hd: usize) -> Vec<f64> {
    let w = heads * hd;
    let mut out = vec![0.0; n * w];
    for h in 0..heads {
        for i in 0..n {
            let mut s: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd)
                        .map(|d| q[i * w + h * hd + d] * k[j * w + h * hd + d])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s
                .iter_mut()
                .map(|x| {
                    *x = (*x - m).exp();
                    *x
                })
                .sum();
            for d in 0..hd {
                out[i * w + h * hd + d] = (0..=i).map(|j| s[j] / z * v[j * w + h * hd + d]).sum();
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..24), c in -100.0f64..100.0) {
        let a = stable_softmax(&Tensor::from_vec(x.clone()), 0).unwrap();
        let b = stable_softmax(&Tensor::from_vec(x.iter().map(|v| v + c).collect()), 0).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn topk_keeps_exact_count_of_unique_indices(s in prop::collection::vec(-10.0f64..10.0, 1..64), r in ratio()) {
        let keep = topk_retain(&s, r).unwrap();
        prop_assert_eq!(keep.len(), ((r * s.len() as f64).floor() as usize).max(1));
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(keep.iter().all(|&i| i < s.len()));
    }

    #[test]
    fn topk_ignores_positive_affine_maps(s in distinct_scores(), r in ratio(), a in 0.01f64..50.0, b in -100.0f64..100.0) {
        let t: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(topk_retain(&s, r).unwrap(), topk_retain(&t, r).unwrap());
    }

    #[test]
    fn topk_and_dtopk_partition(s in prop::collection::vec(-3i32..3, 1..50), r in ratio()) {
        // Small integer values force ties.
        let s: Vec<f64> = s.into_iter().map(f64::from).collect();
        let hi = topk_retain(&s, r).unwrap();
        let lo = dtopk(&s, s.len() - hi.len()).unwrap();
        let mut all: Vec<usize> = hi.iter().chain(&lo).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
        if let (Some(&minhi), Some(&maxlo)) = (hi.iter().map(|&i| s[i]).reduce(f64::min).as_ref(), lo.iter().map(|&i| s[i]).reduce(f64::max).as_ref()) {
            prop_assert!(minhi >= maxlo);
        }
    }

    #[test]
    fn regularizers_stay_in_range(p in prop::collection::vec(0.0f64..=1.0, 2..40), r in ratio()) {
        let naive = reg_naive_value(&p, r);
        prop_assert!((0.0..=1.0).contains(&naive));
        let k = (r * p.len() as f64).floor() as usize;
        if k >= 1 && k < p.len() {
            let c = reg_contrastive_value(&p, r).unwrap();
            prop_assert!((0.0..=2.0).contains(&c));
        } else {
            prop_assert!(reg_contrastive_value(&p, r).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_are_bounded(heads in 1usize..4, pre in 0usize..3, n_v in 1usize..8, post in 0usize..4, seed in any::<u64>(), normalize: bool) {
        let layout = TokenLayout::from_spans(pre, n_v, post);
        let n = layout.n;
        let mut rng = Rng::new(seed);
        let mut w = Vec::with_capacity(heads * n * n);
        for _ in 0..heads * n {
            let mut row = normal(n, &mut rng);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter_mut().map(|x| { *x = (*x - m).exp(); *x }).sum();
            w.extend(row.iter().map(|x| x / z));
        }
        let cap = AttentionCapture { layer: 0, weights: Tensor::new(vec![heads, n, n], w).unwrap() };
        for mode in [LabelMode::LiteralFinalSpan, LabelMode::TextQueries, LabelMode::AllQueries] {
            let q = mode.query_range(&layout).len();
            if q == 0 {
                prop_assert!(accumulate_attention_labels(&cap, &layout, mode, normalize).is_err());
                continue;
            }
            let labels = accumulate_attention_labels(&cap, &layout, mode, normalize).unwrap();
            let top = if normalize { 1.0 } else { (heads * q) as f64 };
            prop_assert_eq!(labels.len(), n_v);
            prop_assert!(labels.iter().all(|&a| a.is_finite() && a >= 0.0 && a <= top + 1e-12));
        }
    }

    #[test]
    fn full_kv_heads_equal_multi_head(n in 1usize..10, heads in 1usize..5, hd in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = heads * hd;
        let (q, k, v) = (normal(n * w, &mut rng), normal(n * w, &mut rng), normal(n * w, &mut rng));
        let layout = HeadLayout { heads, kv_heads: heads, head_dim: hd };
        let mut out = vec![0.0; n * w];
        attention_forward(&q, &k, &v, n, n, layout, ScoreMask { causal: true, ..Default::default() }, &mut out, None);
        let want = mha_oracle(&q, &k, &v, n, heads, hd);
        prop_assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn captured_rows_are_distributions(n in 2usize..20, layer in 0usize..2, seed in any::<u64>()) {
        let m = tiny();
        let mut rng = Rng::new(seed);
        let emb = Tensor::new(vec![n, m.config().hidden], normal(n * m.config().hidden, &mut rng)).unwrap();
        let pos: Vec<usize> = (0..n).collect();
        let opts = ForwardOptions { capture: Some(layer), stop_after: Some(layer), ..Default::default() };
        let cap = m.forward(&emb, &pos, &opts).unwrap().capture.unwrap();
        for h in 0..cap.heads() {
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|j| cap.at(h, i, j)).collect();
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            }
        }
    }

    #[test]
    fn masked_column_is_invisible(n in 2usize..16, j_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = tiny();
        let d = m.config().hidden;
        let j = ((j_frac * n as f64) as usize).min(n - 1);
        let mut rng = Rng::new(seed);
        let emb = Tensor::new(vec![n, d], normal(n * d, &mut rng)).unwrap();
        let mut pert = emb.clone();
        for x in pert.row_mut(j) {
            *x += rng.normal();
        }
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            mask[i * n + j] = MASK_VALUE;
        }
        let mask = Tensor::new(vec![n, n], mask).unwrap();
        let opts = ForwardOptions { mask: PrefillMask::Dense(&mask), ..Default::default() };
        let pos: Vec<usize> = (0..n).collect();
        let a = m.forward(&emb, &pos, &opts).unwrap().logits.unwrap();
        let b = m.forward(&pert, &pos, &opts).unwrap().logits.unwrap();
        for i in (0..n).filter(|&i| i != j) {
            prop_assert!(a.row(i).iter().zip(b.row(i)).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn pre_llm_pruning_keeps_exact_count(n_v in 8usize..48, r in ratio(), seed in any::<u64>(), oracle: bool) {
        let m = tiny();
        let (dcfg, cb) = tiny_data(n_v);
        let s = gen_sample_with(&dcfg, &cb, seed).unwrap();
        let mode = if oracle { PruneMode::Oracle } else { PruneMode::Random };
        let seq = prune_pipeline(&s, &m, None, &dcfg, &PruneConfig::new(mode, r)).unwrap();
        let k = ((r * n_v as f64).floor() as usize).max(1);
        prop_assert_eq!(seq.retained.len(), k);
        prop_assert_eq!(seq.embeds.rows(), k + 4);
        prop_assert!(seq.retained.windows(2).all(|w| w[0] < w[1]) && seq.retained.iter().all(|&i| i < n_v));
    }

    #[test]
    fn trained_classifier_keeps_exact_count(n_v in 8usize..48, r in ratio(), seed in any::<u64>()) {
        let m = tiny();
        let mut c = Classifier::new(m.config().clone(), seed).unwrap();
        c.params_mut().get_mut("cls.out_b").unwrap().data_mut()[0] += 0.5;
        let (dcfg, cb) = tiny_data(n_v);
        let s = gen_sample_with(&dcfg, &cb, seed).unwrap();
        let seq = prune_pipeline(&s, &m, Some(&c), &dcfg, &PruneConfig::new(PruneMode::CovipalPreLlm, r)).unwrap();
        prop_assert_eq!(seq.retained.len(), ((r * n_v as f64).floor() as usize).max(1));
    }

    #[test]
    fn prefill_cost_rises_with_ratio(n_v in 1usize..4096, r1 in ratio(), r2 in ratio()) {
        let cfg = ModelConfig::default();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let n = |r| 4 + retain_count(r, n_v).unwrap();
        prop_assert!(flops_model(n(lo), n(lo), &cfg) <= flops_model(n(hi), n(hi), &cfg));
    }

    #[test]
    fn measured_cost_and_cache_follow_ratio(n_v in 8usize..48, r1 in ratio(), r2 in ratio(), seed in any::<u64>()) {
        let m = tiny();
        let (dcfg, cb) = tiny_data(n_v);
        let s = gen_sample_with(&dcfg, &cb, seed).unwrap();
        let run = |r| {
            let seq = prune_pipeline(&s, &m, None, &dcfg, &PruneConfig::new(PruneMode::Oracle, r)).unwrap();
            prefill_and_decode(&m, &seq.embeds, &seq.positions, 0).unwrap().metrics
        };
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let (a, b) = (run(lo), run(hi));
        prop_assert!(a.prefill_flops <= b.prefill_flops);
        if retain_count(lo, n_v).unwrap() < retain_count(hi, n_v).unwrap() {
            prop_assert!(a.kv_entries < b.kv_entries);
        } else {
            prop_assert_eq!(a.kv_entries, b.kv_entries);
        }
    }

    #[test]
    fn signal_set_and_answer_are_well_formed(n_v in 1usize..200, m_frac in 0.0f64..1.0, classes in 2usize..9, seed in any::<u64>()) {
        let m = ((m_frac * n_v as f64) as usize).clamp(1, n_v);
        let dcfg = DataConfig { n_v, m, classes, ..DataConfig::default() };
        let cb = Codebook::new(classes, dcfg.patch_dim, dcfg.codebook_seed).unwrap();
        let s = gen_sample_with(&dcfg, &cb, seed).unwrap();
        prop_assert_eq!(s.signal.len(), m);
        prop_assert!(s.signal.windows(2).all(|w| w[0] < w[1]) && s.signal.iter().all(|&i| i < n_v));
        let mut counts = vec![0usize; classes];
        for &c in &s.signal_classes {
            counts[c] += 1;
        }
        prop_assert!(counts.iter().enumerate().all(|(c, &k)| c == s.answer || k < counts[s.answer]));
        prop_assert_eq!(s, gen_sample_with(&dcfg, &cb, seed).unwrap());
    }

    #[test]
    fn sample_seeds_are_distinct(base in any::<u64>(), i in 0usize..1 << 20, j in 0usize..1 << 20) {
        for (a, b) in [(Split::Train, Split::Val), (Split::Val, Split::Test), (Split::Train, Split::Test)] {
            prop_assert_ne!(sample_seed(base, a, i), sample_seed(base, b, j));
        }
        if i != j {
            prop_assert_ne!(sample_seed(base, Split::Train, i), sample_seed(base, Split::Train, j));
        }
    }
}
