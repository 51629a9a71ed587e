//! Softmax-regression probes.
//!
//! Deliberately independent of the tape/autograd stack: the probes act as
//! external oracles on representations (mel→token, mel→speaker, code→speaker),
//! so they must not share code with the models they judge.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 150, lr: 2.0, train_fraction: 0.8, seed: 17 }
    }
}

/// Train a linear softmax classifier on a shuffled train split and report
/// held-out accuracy. Features are standardized per dimension.
pub fn linear_probe_holdout_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> f64 {
    assert_eq!(features.len(), labels.len());
    assert!(!features.is_empty());
    let dim = features[0].len();
    let n = features.len();

    // standardize
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for f in features {
        for ((v, &x), &m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
    let norm: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&std).map(|((&x, &m), &s)| (x - m) / s).collect())
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let split = ((n as f64) * cfg.train_fraction).round() as usize;
    let (train_idx, test_idx) = order.split_at(split.clamp(1, n - 1));

    // weights (classes × dim) + bias (classes), full-batch gradient descent
    let mut w = vec![0.0f64; num_classes * dim];
    let mut b = vec![0.0f64; num_classes];
    let m = train_idx.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0f64; num_classes * dim];
        let mut gb = vec![0.0f64; num_classes];
        for &i in train_idx {
            let x = &norm[i];
            let mut logits = b.clone();
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &w[c * dim..(c + 1) * dim];
                for (&wv, &xv) in row.iter().zip(x) {
                    *l += wv * xv;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            for (c, &p) in logits.iter().enumerate() {
                let err = p / denom - if c == labels[i] { 1.0 } else { 0.0 };
                gb[c] += err;
                let row = &mut gw[c * dim..(c + 1) * dim];
                for (g, &xv) in row.iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * g / m;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * g / m;
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = &norm[i];
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..num_classes {
            let mut l = b[c];
            let row = &w[c * dim..(c + 1) * dim];
            for (&wv, &xv) in row.iter().zip(x) {
                l += wv * xv;
            }
            if l > best_v {
                best_v = l;
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test_idx.len() as f64
}
