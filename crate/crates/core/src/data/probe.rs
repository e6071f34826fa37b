//! Linear probe on noise patches only.

use super::{Dataset, NeedleSample};
use crate::error::{ensure, Error, Result};
use crate::numerics::kernels::softmax_row_inplace;

/// Per-sample feature: mean of the non-signal patches, plus a bias slot.
fn noise_features(s: &NeedleSample) -> Vec<f64> {
    let p = s.patches.cols();
    let mut f = vec![0.0; p + 1];
    let mut count = 0;
    for i in 0..s.patches.rows() {
        if !s.is_signal(i) {
            for (a, b) in f.iter_mut().zip(s.patches.row(i)) {
                *a += b;
            }
            count += 1;
        }
    }
    for a in f.iter_mut().take(p) {
        *a /= count.max(1) as f64;
    }
    f[p] = 1.0;
    f
}

/// Trains a softmax-regression probe on the train split and returns its
/// test-split accuracy at predicting the answer class.
pub fn noise_probe_accuracy(ds: &Dataset, epochs: usize, lr: f64) -> Result<f64> {
    let classes = ds.config.classes;
    ensure!(
        !ds.train.is_empty() && !ds.test.is_empty(),
        Error::InvalidArgument("probe needs train and test samples".into())
    );
    ensure!(
        ds.train.iter().all(|s| s.signal.len() < s.patches.rows()),
        Error::InvalidArgument("probe needs at least one noise patch per sample".into())
    );
    let train: Vec<(Vec<f64>, usize)> = ds
        .train
        .iter()
        .map(|s| (noise_features(s), s.answer))
        .collect();
    let width = train[0].0.len();
    let mut w = vec![0.0; classes * width];
    let mut grad = vec![0.0; classes * width];
    let mut logits = vec![0.0; classes];
    for _ in 0..epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (f, y) in &train {
            for (c, l) in logits.iter_mut().enumerate() {
                *l = w[c * width..(c + 1) * width]
                    .iter()
                    .zip(f)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            softmax_row_inplace(&mut logits);
            for c in 0..classes {
                let d = logits[c] - if c == *y { 1.0 } else { 0.0 };
                for (g, x) in grad[c * width..(c + 1) * width].iter_mut().zip(f) {
                    *g += d * x;
                }
            }
        }
        let scale = lr / train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= scale * g;
        }
    }
    let mut correct = 0;
    for s in &ds.test {
        let f = noise_features(s);
        let pred = (0..classes)
            .map(|c| {
                w[c * width..(c + 1) * width]
                    .iter()
                    .zip(&f)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, v)| {
                if v > best.1 {
                    (c, v)
                } else {
                    best
                }
            })
            .0;
        correct += usize::from(pred == s.answer);
    }
    Ok(correct as f64 / ds.test.len() as f64)
}
