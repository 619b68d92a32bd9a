//! Adaptive-moment optimizer with decoupled weight decay, the warmup+cosine
//! learning-rate schedule, and EMA parameter synchronization.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adamw(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            betas,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Plain Adam: no weight decay.
    pub fn adam(betas: (f64, f64)) -> Self {
        Self::adamw(betas, 0.0)
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update of every parameter in `store`. Gradients are checked for
/// non-finite entries before anything is modified; `step_index` is only used
/// in the diagnostic.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    step_index: u64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(contract(format!(
                "gradient shape {:?} for parameter {} of shape {:?}",
                g.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", store.name(id)),
                step: step_index,
                checkpoint: None,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let step_size = T::of(lr / bc1);
    let (bc2_sqrt, eps) = (T::of(bc2.sqrt()), T::of(cfg.eps));
    for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            *pi *= decay;
            *pi -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every parameter.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, source: &ParamStore<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(contract(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if target.len() != source.len() {
        return Err(contract("EMA between parameter sets of different layouts"));
    }
    let (m, rest) = (T::of(momentum), T::of(1.0 - momentum));
    for (k, q) in target.values_mut().iter_mut().zip(source.values()) {
        if k.shape() != q.shape() {
            return Err(contract(format!("EMA shape mismatch {:?} vs {:?}", k.shape(), q.shape())));
        }
        for (a, &b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = m * *a + rest * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1], vec![value]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = single(2.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::adamw((0.9, 0.95), 0.05);
        adamw_step(&mut s, &[Tensor::zeros(&[1])], &mut st, 1e-3, &cfg, 0).unwrap();
        assert_eq!(s.values()[0].data()[0], 2.0 * (1.0 - 1e-3 * 0.05));
    }

    #[test]
    fn two_steps_match_hand_rolled_update() {
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.95, 1e-8, 0.0);
        let mut s = single(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            betas: (b1, b2),
            eps,
            weight_decay: wd,
        };
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            adamw_step(&mut s, &[Tensor::ones(&[1])], &mut st, lr, &cfg, t).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((s.values()[0].data()[0] - p).abs() < 1e-14);
    }

    #[test]
    fn zero_betas_take_signed_steps() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::adam((0.0, 0.0));
        let g = Tensor::new(&[3], vec![3.0, -0.01, 250.0]).unwrap();
        adamw_step(&mut s, &[g], &mut st, 0.01, &cfg, 0).unwrap();
        for (&p, want) in s.values()[0].data().iter().zip([-0.01f64, 0.01, -0.01]) {
            assert!((p - want).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = single(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::adamw((0.9, 0.95), 0.05);
        let err = adamw_step(&mut s, &[Tensor::full(&[1], f64::NAN)], &mut st, 1e-3, &cfg, 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }));
        assert_eq!(s.values()[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_landmarks() {
        let base = 2e-3;
        assert_eq!(cosine_lr(0, 100, 10, base), 0.0);
        assert_eq!(cosine_lr(5, 100, 10, base), base / 2.0);
        assert_eq!(cosine_lr(10, 100, 10, base), base);
        assert!((cosine_lr(55, 100, 10, base) - base / 2.0).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 10, base).abs() < 1e-12);
    }

    #[test]
    fn ema_extremes() {
        let mut k = single(1.0);
        let q = single(0.0);
        ema_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k.values()[0].data()[0], 1.0);
        ema_update(&mut k, &q, 0.9).unwrap();
        assert!((k.values()[0].data()[0] - 0.9).abs() < 1e-15);
        ema_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k.values()[0].data()[0], 0.0);
        assert!(ema_update(&mut k, &q, 1.5).is_err());
    }
}
