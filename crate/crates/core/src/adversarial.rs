//! Object-centric adversarial branch: pseudo masks with a boosted random
//! rectangle, a spectrally normalized conv discriminator, and least-squares
//! GAN losses.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract, Result};
use crate::generator::conv_params;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const MIN_AREA_FRACTION: f64 = 0.2;
pub const MAX_AREA_FRACTION: f64 = 0.8;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Rectangle in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

/// A synthetic "real" mask: uniform noise plus `α` inside a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub values: Vec<f64>,
    pub rect: Rect,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PseudoMask {
    /// `m_i = ε_i + α·[i ∈ rect]` with the given per-cell noise `ε`.
    pub fn from_rect(grid_h: usize, grid_w: usize, rect: Rect, alpha: f64, eps: &[f64]) -> Result<Self> {
        if eps.len() != grid_h * grid_w {
            return Err(contract(format!("{} noise values for a {grid_h}×{grid_w} grid", eps.len())));
        }
        if rect.top + rect.height > grid_h || rect.left + rect.width > grid_w {
            return Err(contract(format!("{rect:?} outside the {grid_h}×{grid_w} grid")));
        }
        let values = eps
            .iter()
            .enumerate()
            .map(|(i, &e)| if rect.contains(i / grid_w, i % grid_w) { e + alpha } else { e })
            .collect();
        Ok(Self {
            values,
            rect,
            grid_h,
            grid_w,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        (self.rect.height * self.rect.width) as f64 / (self.grid_h * self.grid_w) as f64
    }
}

/// Samples a rectangle uniformly over sizes and positions, rejecting it
/// until its area is 20–80% of the grid, then adds `α` inside it on top of
/// `U(0, 1)` noise.
pub fn sample_pseudo_mask(grid_h: usize, grid_w: usize, alpha: f64, rng: &mut Rng) -> Result<PseudoMask> {
    if grid_h < 2 || grid_w < 2 {
        return Err(contract(format!("pseudo masks need a grid of at least 2×2, got {grid_h}×{grid_w}")));
    }
    let total = (grid_h * grid_w) as f64;
    let rect = loop {
        let height = rng.gen_range(1..=grid_h);
        let width = rng.gen_range(1..=grid_w);
        let frac = (height * width) as f64 / total;
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            continue;
        }
        break Rect {
            top: rng.gen_range(0..=grid_h - height),
            left: rng.gen_range(0..=grid_w - width),
            height,
            width,
        };
    };
    let eps: Vec<f64> = (0..grid_h * grid_w).map(|_| rng.gen::<f64>()).collect();
    PseudoMask::from_rect(grid_h, grid_w, rect, alpha, &eps)
}

/// Stacks pseudo masks into a `[B×1×g×g]` tensor.
pub fn pseudo_mask_batch<T: Scalar>(masks: &[PseudoMask]) -> Tensor<T> {
    let (gh, gw) = masks.first().map_or((0, 0), |m| (m.grid_h, m.grid_w));
    let data = masks.iter().flat_map(|m| m.values.iter().map(|&v| T::of(v))).collect();
    Tensor::new(&[masks.len(), 1, gh, gw], data).expect("uniform pseudo-mask grids")
}

#[derive(Debug, Clone)]
struct SnConv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

/// Persistent power-iteration vectors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalize<T: Scalar>(x: &mut [T]) {
    let norm = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let inv = T::one() / (norm + T::of(1e-12));
    x.iter_mut().for_each(|a| *a *= inv);
}

/// One power-iteration step on the `rows×cols` matrix `w`; updates `u, v`
/// and returns `σ = uᵀ W v`.
pub fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, state: &mut SpectralState<T>) -> T {
    let mut v = vec![T::zero(); cols];
    for (r, &ur) in state.u.iter().enumerate() {
        for (vc, &wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += wrc * ur;
        }
    }
    normalize(&mut v);
    let mut u: Vec<T> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
        .collect();
    normalize(&mut u);
    let sigma = (0..rows)
        .map(|r| u[r] * w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>())
        .sum();
    state.u = u;
    state.v = v;
    sigma
}

/// Three-conv discriminator on a `g×g` mask grid:
/// `4×4/2 (1→16)`, LeakyReLU, `4×4/2 (16→32)`, LeakyReLU, then a conv whose
/// kernel covers the remaining map (`32→1`). Every weight is divided by its
/// spectral-norm estimate before use.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    grid: usize,
    layers: Vec<SnConv>,
    pub spectral: Vec<SpectralState<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(grid: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        let after = |s: usize| (s + 2 - 4) / 2 + 1;
        if grid < 4 {
            return Err(contract(format!("discriminator needs a grid of at least 4×4, got {grid}")));
        }
        let last = after(after(grid));
        let specs = [(1, 16, 4, 2, 1), (16, 32, 4, 2, 1), (32, 1, last, 1, 0)];
        let mut layers = Vec::new();
        let mut spectral = Vec::new();
        for (i, &(in_c, out_c, k, stride, pad)) in specs.iter().enumerate() {
            let (weight, bias) = conv_params(store, rng, &format!("discriminator.conv{}", i + 1), out_c, in_c, k);
            *store.get_mut(bias) = Tensor::zeros(&[out_c]);
            let mut u: Vec<T> = (0..out_c).map(|_| T::of(rng.sample(StandardNormal))).collect();
            normalize(&mut u);
            spectral.push(SpectralState {
                u,
                v: vec![T::zero(); in_c * k * k],
            });
            layers.push(SnConv {
                weight,
                bias,
                stride,
                pad,
            });
        }
        Ok(Self { grid, layers, spectral })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.weight).collect()
    }

    /// Advances every layer's power iteration by one step; returns the
    /// per-layer `σ` estimates.
    pub fn update_spectral(&mut self, store: &ParamStore<T>) -> Vec<T> {
        self.layers
            .iter()
            .zip(&mut self.spectral)
            .map(|(layer, state)| {
                let w = store.get(layer.weight);
                let rows = w.shape()[0];
                // Floor keeps an all-zero weight finite after division.
                power_iteration(w.data(), rows, w.len() / rows, state).max(T::of(1e-12))
            })
            .collect()
    }

    /// Scores masks `[B×1×g×g]` with fixed normalizers `sigmas`; returns `[B]`.
    /// The normalizers enter the graph as constants.
    pub fn forward_with(&self, g: &mut Graph<T>, p: &BoundParams, masks: Var, sigmas: &[T]) -> Result<Var> {
        let s = g.shape(masks);
        if s.len() != 4 || s[1] != 1 || s[2] != self.grid || s[3] != self.grid {
            return Err(contract(format!(
                "discriminator expects [B, 1, {0}, {0}] masks, got {s:?}",
                self.grid
            )));
        }
        let batch = s[0];
        let mut x = masks;
        for (i, (layer, &sigma)) in self.layers.iter().zip(sigmas).enumerate() {
            let w = g.scale(p[layer.weight], T::one() / sigma);
            x = g.conv2d(x, w, Some(p[layer.bias]), layer.stride, layer.pad)?;
            if i + 1 < self.layers.len() {
                x = g.leaky_relu(x, T::of(LEAKY_SLOPE));
            }
        }
        Ok(g.reshape(x, &[batch])?)
    }

    /// One power-iteration step, then [`Self::forward_with`].
    pub fn forward(&mut self, g: &mut Graph<T>, p: &BoundParams, store: &ParamStore<T>, masks: Var) -> Result<Var> {
        let sigmas = self.update_spectral(store);
        self.forward_with(g, p, masks, &sigmas)
    }
}

/// Least-squares GAN targets: fake `a`, real `b`, generator `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsganTargets {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LsganTargets {
    fn default() -> Self {
        Self { a: -1.0, b: 1.0, c: 0.0 }
    }
}

/// Sign of the generator's adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSign {
    /// `L_adv = −mean((D(M) − c)²)`.
    #[default]
    AsPrinted,
    /// `L_adv = +mean((D(M) − c)²)`, the usual least-squares generator loss.
    LsganStandard,
}

fn mean_sq_offset<T: Scalar>(g: &mut Graph<T>, d: Var, target: f64) -> Var {
    let shifted = g.add_scalar(d, T::of(-target));
    let sq = g.square(shifted);
    g.mean(sq)
}

pub fn adv_loss_generator<T: Scalar>(g: &mut Graph<T>, d_fake: Var, c: f64, sign: AdvSign) -> Var {
    let m = mean_sq_offset(g, d_fake, c);
    match sign {
        AdvSign::AsPrinted => g.scale(m, -T::one()),
        AdvSign::LsganStandard => m,
    }
}

/// `mean((D(real) − b)²) + mean((D(fake) − a)²)`.
pub fn adv_loss_discriminator<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var, a: f64, b: f64) -> Result<Var> {
    let real = mean_sq_offset(g, d_real, b);
    let fake = mean_sq_offset(g, d_fake, a);
    Ok(g.add(real, fake)?)
}

/// `L_G = L_recon + λ·L_adv`.
pub fn generator_total_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, adv: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(contract(format!("adversarial weight must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(adv, T::of(lambda));
    Ok(g.add(recon, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn scalar_losses(real: &[f64], fake: &[f64]) -> (f64, f64, f64) {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::new(&[real.len()], real.to_vec()).unwrap());
        let f = g.constant(Tensor::new(&[fake.len()], fake.to_vec()).unwrap());
        let t = LsganTargets::default();
        let lg = adv_loss_generator(&mut g, f, t.c, AdvSign::AsPrinted);
        let ls = adv_loss_generator(&mut g, f, t.c, AdvSign::LsganStandard);
        let ld = adv_loss_discriminator(&mut g, r, f, t.a, t.b).unwrap();
        (g.value(lg).item(), g.value(ls).item(), g.value(ld).item())
    }

    #[test]
    fn loss_fixtures() {
        assert_eq!(scalar_losses(&[1.0], &[0.0]).0, 0.0);
        assert_eq!(scalar_losses(&[1.0], &[1.0]).0, -1.0);
        assert_eq!(scalar_losses(&[1.0], &[1.0]).1, 1.0);
        assert!((scalar_losses(&[1.0, 1.0], &[0.5, -0.5]).0 + 0.25).abs() < 1e-12);
        assert_eq!(scalar_losses(&[1.0], &[-1.0]).2, 0.0);
        assert_eq!(scalar_losses(&[0.0], &[0.0]).2, 2.0);
        assert!((scalar_losses(&[0.5], &[0.5]).2 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::scalar(1.0));
        let a = g.constant(Tensor::scalar(-1.0));
        let l = generator_total_loss(&mut g, r, a, 0.2).unwrap();
        assert!((g.value(l).item() - 0.8).abs() < 1e-15);
        let l0 = generator_total_loss(&mut g, r, a, 0.0).unwrap();
        assert_eq!(g.value(l0).item(), 1.0);
        assert!(generator_total_loss(&mut g, r, a, -0.1).is_err());
    }

    #[test]
    fn pseudo_mask_with_zero_noise() {
        let rect = Rect {
            top: 0,
            left: 0,
            height: 2,
            width: 1,
        };
        let m = PseudoMask::from_rect(2, 2, rect, 0.5, &[0.0; 4]).unwrap();
        assert_eq!(m.values, vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn pseudo_mask_rejects_tiny_grid() {
        assert!(sample_pseudo_mask(1, 4, 0.5, &mut stream(0, "p", 0)).is_err());
    }

    #[test]
    fn discriminator_spatial_sizes() {
        let mut store = ParamStore::<f64>::new();
        let mut d = Discriminator::new(8, &mut store, &mut stream(0, "d", 0)).unwrap();
        let ws: Vec<Vec<usize>> = d.weight_ids().iter().map(|&id| store.get(id).shape().to_vec()).collect();
        assert_eq!(ws, vec![vec![16, 1, 4, 4], vec![32, 16, 4, 4], vec![1, 32, 2, 2]]);
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let x = g.constant(Tensor::from_fn(&[3, 1, 8, 8], |i| (i % 7) as f64 * 0.1));
        let out = d.forward(&mut g, &p, &store, x).unwrap();
        assert_eq!(g.shape(out), &[3]);
        assert!(g.value(out).all_finite());
        let bad = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(d.forward(&mut g, &p, &store, bad).is_err());
    }

    #[test]
    fn zero_weights_give_zero_score() {
        let mut store = ParamStore::<f64>::new();
        let mut d = Discriminator::new(8, &mut store, &mut stream(0, "d", 0)).unwrap();
        for id in d.weight_ids() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let x = g.constant(Tensor::from_fn(&[2, 1, 8, 8], |i| i as f64));
        let out = d.forward(&mut g, &p, &store, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }
}
