//! Synthetic needle task with known salient visual tokens.
//!
//! A fixed orthonormal codebook holds one marker direction `u0` and one
//! direction `e_c` per class. Signal patches are `alpha * (u0 + e_c) + z`,
//! noise patches are `z` alone, where `z` is Gaussian noise projected onto the
//! orthogonal complement of the codebook. Noise patches are drawn without
//! looking at the class, so they carry no information about the answer. The
//! answer is the class that appears most often among the signal patches.

mod dataset;
mod probe;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::TokenLayout;
use crate::numerics::{Rng, Tensor};

pub use dataset::{
    gen_dataset, load_dataset, sample_seed, save_dataset, Dataset, DatasetManifest, Split,
    DATA_FORMAT_VERSION,
};
pub use probe::noise_probe_accuracy;

/// Token ids. Classes occupy `0..classes`; specials follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub classes: usize,
}

impl Vocab {
    pub fn bos(&self) -> usize {
        self.classes
    }
    pub fn sys(&self) -> usize {
        self.classes + 1
    }
    pub fn qry(&self) -> usize {
        self.classes + 2
    }
    pub fn ask(&self) -> usize {
        self.classes + 3
    }
    pub fn eos(&self) -> usize {
        self.classes + 4
    }
    pub fn size(&self) -> usize {
        self.classes + 5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_v: usize,
    /// Signal tokens per sample.
    pub m: usize,
    pub classes: usize,
    pub patch_dim: usize,
    /// Signal amplitude along the codebook directions.
    pub alpha: f64,
    pub noise_std: f64,
    /// Share of signal tokens given to the answer class (rounded up).
    pub majority_share: f64,
    pub codebook_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_v: 128,
            m: 16,
            classes: 8,
            patch_dim: 32,
            alpha: 3.0,
            noise_std: 1.0,
            majority_share: 0.4,
            codebook_seed: 0xC0DE_B00C,
            train: 4096,
            val: 512,
            test: 512,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.m >= 1 && self.m <= self.n_v,
            Error::InvalidArgument(format!(
                "need 1 <= m <= n_v, got m = {}, n_v = {}",
                self.m, self.n_v
            ))
        );
        ensure!(
            self.classes >= 2,
            Error::InvalidArgument("need at least 2 classes".into())
        );
        ensure!(
            self.patch_dim > self.classes,
            Error::InvalidArgument(format!(
                "patch_dim {} must exceed classes {} (codebook plus a noise subspace)",
                self.patch_dim, self.classes
            ))
        );
        ensure!(
            self.majority_share > 0.0 && self.majority_share <= 1.0,
            Error::InvalidArgument("majority_share must be in (0, 1]".into())
        );
        ensure!(
            self.alpha.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0,
            Error::InvalidArgument("alpha and noise_std must be finite, noise_std >= 0".into())
        );
        Ok(())
    }

    /// Prompt layout: `[BOS, SYS] visual [QRY, ASK]`.
    pub fn prompt_layout(&self) -> TokenLayout {
        TokenLayout::from_spans(2, self.n_v, 2)
    }

    /// Training layout: the prompt followed by the answer token.
    pub fn train_layout(&self) -> TokenLayout {
        TokenLayout::from_spans(2, self.n_v, 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleSample {
    /// `[n_v, patch_dim]`.
    pub patches: Tensor,
    /// Ascending signal positions within the visual block.
    pub signal: Vec<usize>,
    /// Class encoded at each signal position.
    pub signal_classes: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: usize,
    pub seed: u64,
}

impl NeedleSample {
    /// Text ids in sequence order for the prompt, optionally followed by the answer.
    pub fn text_ids(&self, vocab: Vocab, with_answer: bool) -> Vec<usize> {
        let mut ids = vec![vocab.bos(), vocab.sys()];
        ids.extend_from_slice(&self.query);
        if with_answer {
            ids.push(self.answer);
        }
        ids
    }

    pub fn is_signal(&self, i: usize) -> bool {
        self.signal.binary_search(&i).is_ok()
    }
}

/// `classes + 1` orthonormal rows of length `patch_dim`: the marker, then one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    rows: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(classes: usize, patch_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            patch_dim > classes,
            Error::InvalidArgument("codebook does not fit in patch_dim".into())
        );
        let mut rng = Rng::new(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes + 1);
        while rows.len() < classes + 1 {
            let mut v: Vec<f64> = (0..patch_dim).map(|_| rng.normal()).collect();
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (vi, ri) in v.iter_mut().zip(r) {
                        *vi -= dot * ri;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Ok(Codebook { rows })
    }

    pub fn marker(&self) -> &[f64] {
        &self.rows[0]
    }

    pub fn class(&self, c: usize) -> &[f64] {
        &self.rows[c + 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Removes every codebook component from `v`.
    pub fn project_out(&self, v: &mut [f64]) {
        for _ in 0..2 {
            for r in &self.rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= dot * ri;
                }
            }
        }
    }
}

/// Class counts for the signal tokens: the answer gets `ceil(share * m)`,
/// the rest go round-robin over the other classes, shifted into further
/// classes if needed so the answer stays a strict plurality.
fn class_assignment(
    m: usize,
    classes: usize,
    share: f64,
    answer: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let major = ((share * m as f64).ceil() as usize).clamp(1, m);
    let mut others: Vec<usize> = (0..classes).filter(|&c| c != answer).collect();
    rng.shuffle(&mut others);
    let mut counts = vec![0usize; classes];
    counts[answer] = major;
    for i in 0..m - major {
        counts[others[i % others.len()]] += 1;
    }
    // Any distractor tying or beating the answer donates to the answer.
    loop {
        let worst = others
            .iter()
            .copied()
            .max_by_key(|&c| (counts[c], usize::MAX - c));
        match worst {
            Some(c) if counts[c] >= counts[answer] => {
                counts[c] -= 1;
                counts[answer] += 1;
            }
            _ => break,
        }
    }
    let mut labels = Vec::with_capacity(m);
    for (c, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, k));
    }
    rng.shuffle(&mut labels);
    labels
}

pub fn gen_sample_with(cfg: &DataConfig, codebook: &Codebook, seed: u64) -> Result<NeedleSample> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let answer = rng.below(cfg.classes);
    let signal = rng.sample_indices(cfg.n_v, cfg.m);
    let signal_classes = class_assignment(cfg.m, cfg.classes, cfg.majority_share, answer, &mut rng);
    let p = cfg.patch_dim;
    let mut data = Vec::with_capacity(cfg.n_v * p);
    let mut next_signal = 0;
    for i in 0..cfg.n_v {
        let mut z: Vec<f64> = (0..p).map(|_| rng.normal() * cfg.noise_std).collect();
        codebook.project_out(&mut z);
        if next_signal < cfg.m && signal[next_signal] == i {
            let c = signal_classes[next_signal];
            for ((zi, u), e) in z.iter_mut().zip(codebook.marker()).zip(codebook.class(c)) {
                *zi += cfg.alpha * (u + e);
            }
            next_signal += 1;
        }
        data.extend(z);
    }
    let vocab = cfg.vocab();
    Ok(NeedleSample {
        patches: Tensor::new(vec![cfg.n_v, p], data)?,
        signal,
        signal_classes,
        query: vec![vocab.qry(), vocab.ask()],
        answer,
        seed,
    })
}

/// One sample from the default task geometry with the given sizes.
pub fn gen_sample(n_v: usize, m: usize, classes: usize, seed: u64) -> Result<NeedleSample> {
    let cfg = DataConfig {
        n_v,
        m,
        classes,
        ..DataConfig::default()
    };
    cfg.validate()?;
    let codebook = Codebook::new(cfg.classes, cfg.patch_dim, cfg.codebook_seed)?;
    gen_sample_with(&cfg, &codebook, seed)
}
