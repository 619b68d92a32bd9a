//! Linear probing of frozen encoder features.

use rand::seq::SliceRandom;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::ProbeConfig;
use crate::data::ShapeSample;
use crate::error::{contract, Result};
use crate::optim::{adamw_step, AdamConfig, AdamState};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::train::batch_patches;
use crate::vit::Encoder;

const FEATURE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Top-1 accuracy on the held-out split.
    pub accuracy: f64,
    pub train_accuracy: f64,
}

/// Mean-pooled encoder features, one row per sample, in `f64`.
pub fn encoder_features<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    samples: &[ShapeSample],
) -> Result<Vec<Vec<f64>>> {
    let p = encoder.config().patch_size;
    let mut out = Vec::with_capacity(samples.len());
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(FEATURE_CHUNK) {
        let patches = batch_patches::<T>(samples, chunk, p)?;
        let f = encoder.pooled_features(store, &patches)?;
        let d = f.shape()[1];
        out.extend(f.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for row in x {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-8);
    }
    (mean, std)
}

fn logits(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let c = b.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for (o, &wjk) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
            *o += xj * wjk;
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Trains a softmax classifier on `train_x` and reports accuracies.
/// Features are standardized with training statistics.
pub fn linear_probe_features(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(contract("probe needs matching, non-empty feature and label sets"));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(contract(format!("label {y} outside 0..{classes}")));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(contract("feature rows of different widths"));
    }
    let (mean, std) = standardizer(train_x);
    let norm = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    let (tx, vx) = (norm(train_x), norm(test_x));

    let mut store = ParamStore::<f64>::new();
    let w_id = store.add("probe.weight", Tensor::zeros(&[d, classes]));
    let b_id = store.add("probe.bias", Tensor::zeros(&[classes]));
    let mut state = AdamState::new(&store);
    let opt = AdamConfig::adamw((0.9, 0.999), cfg.weight_decay);
    let mut order: Vec<usize> = (0..tx.len()).collect();
    let mut z = vec![0.0; classes];
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, "probe.shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                logits(store.get(w_id).data(), store.get(b_id).data(), &tx[i], &mut z);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for (k, zk) in z.iter().enumerate() {
                    let mut delta = (zk - max).exp() / total;
                    if k == train_y[i] {
                        delta -= 1.0;
                    }
                    let delta = delta * scale;
                    gb[k] += delta;
                    for (j, &xj) in tx[i].iter().enumerate() {
                        gw[j * classes + k] += xj * delta;
                    }
                }
            }
            let grads = [Tensor::new(&[d, classes], gw)?, Tensor::new(&[classes], gb)?];
            adamw_step(&mut store, &grads, &mut state, cfg.lr, &opt, step)?;
            step += 1;
        }
    }
    let accuracy = |x: &[Vec<f64>], y: &[usize]| -> f64 {
        if x.is_empty() {
            return f64::NAN;
        }
        let mut z = vec![0.0; classes];
        let hits = x
            .iter()
            .zip(y)
            .filter(|(r, &label)| {
                logits(store.get(w_id).data(), store.get(b_id).data(), r, &mut z);
                argmax(&z) == label
            })
            .count();
        hits as f64 / x.len() as f64
    };
    Ok(ProbeResult {
        accuracy: accuracy(&vx, test_y),
        train_accuracy: accuracy(&tx, train_y),
    })
}

/// Probes a frozen encoder: features of `train` fit the classifier,
/// accuracy is measured on `test`.
pub fn linear_probe<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    train: &[ShapeSample],
    test: &[ShapeSample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let tx = encoder_features(encoder, store, train)?;
    let vx = encoder_features(encoder, store, test)?;
    let labels = |s: &[ShapeSample]| s.iter().map(|x| x.label.index()).collect::<Vec<_>>();
    linear_probe_features(
        &tx,
        &labels(train),
        &vx,
        &labels(test),
        crate::data::ShapeClass::ALL.len(),
        cfg,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(seed, "blobs", 0);
        (0..n)
            .map(|i| {
                let c = i % classes;
                let mut x: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect();
                x[c % 4] += 3.0;
                x[3] += c as f64 * 2.0;
                (x, c)
            })
            .unzip()
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let (x, y) = blobs(200, 5, 0);
        let (tx, ty) = blobs(100, 5, 1);
        let cfg = ProbeConfig {
            epochs: 60,
            lr: 0.05,
            ..ProbeConfig::default()
        };
        let r = linear_probe_features(&x, &y, &tx, &ty, 5, &cfg, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let (x, mut y) = blobs(2000, 5, 2);
        let (tx, mut ty) = blobs(4000, 5, 3);
        y.shuffle(&mut stream(9, "labels", 0));
        ty.shuffle(&mut stream(9, "labels", 1));
        let r = linear_probe_features(&x, &y, &tx, &ty, 5, &ProbeConfig::default(), 0).unwrap();
        assert!((r.accuracy - 0.2).abs() < 0.05, "{}", r.accuracy);
    }

    #[test]
    fn rejects_bad_labels() {
        let x = vec![vec![0.0]];
        assert!(linear_probe_features(&x, &[3], &x, &[0], 2, &ProbeConfig::default(), 0).is_err());
    }
}
