//! Differentiable mask generator: attention maps → two-layer conv head →
//! Gumbel-Softmax mask field → boosted top-K priorities → mask plan, plus the
//! stop-gradient token reweighting that routes reconstruction gradients back
//! into the head.

use std::io::Write as _;
use std::path::Path;

use rand::distributions::Open01;
use rand::Rng as _;

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract, Result};
use crate::mae::MaskPlan;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vit::AttentionStack;

/// Hidden channels of the generator head.
pub const HEAD_HIDDEN: usize = 16;

/// Uniform `U(-1/√fan_in, 1/√fan_in)` conv weight and bias.
pub(crate) fn conv_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> (ParamId, ParamId) {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| T::of(rng.gen_range(-bound..bound)));
    let b = Tensor::from_fn(&[out_c], |_| T::of(rng.gen_range(-bound..bound)));
    (store.add(format!("{name}.weight"), w), store.add(format!("{name}.bias"), b))
}

/// Two 3×3 convolutions (`H → 16 → 1`, padding 1) with a ReLU in between.
/// The output is left unconstrained since a log-softmax follows.
#[derive(Debug, Clone)]
pub struct GeneratorHead {
    heads: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

impl GeneratorHead {
    pub fn new<T: Scalar>(heads: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let conv1 = conv_params(store, rng, "generator.conv1", HEAD_HIDDEN, heads, 3);
        let conv2 = conv_params(store, rng, "generator.conv2", 1, HEAD_HIDDEN, 3);
        Self { heads, conv1, conv2 }
    }

    pub fn conv2_bias(&self) -> ParamId {
        self.conv2.1
    }

    /// `F = conv2(relu(conv1(A)))` for `A[B×H×g×g]`; returns `[B×1×g×g]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, attn: Var) -> Result<Var> {
        let s = g.shape(attn);
        if s.len() != 4 || s[1] != self.heads {
            return Err(contract(format!(
                "generator expects [B, {}, g, g] attention, got {s:?}",
                self.heads
            )));
        }
        let h = g.conv2d(attn, p[self.conv1.0], Some(p[self.conv1.1]), 1, 1)?;
        let h = g.relu(h);
        Ok(g.conv2d(h, p[self.conv2.0], Some(p[self.conv2.1]), 1, 1)?)
    }
}

/// Max over heads of the attention maps, `[B×1×g×g]`; the parameter-free
/// stand-in for the conv head.
pub fn max_over_heads<T: Scalar>(attn: &AttentionStack<T>) -> Tensor<T> {
    let (b, h, gr) = (attn.batch(), attn.heads(), attn.grid());
    let n = gr * gr;
    let src = attn.maps.data();
    Tensor::from_fn(&[b, 1, gr, gr], |idx| {
        let (bi, i) = (idx / n, idx % n);
        (0..h).map(|hi| src[(bi * h + hi) * n + i]).fold(T::neg_infinity(), T::max)
    })
}

/// Standard Gumbel noise `−log(−log u)`, `u ~ U(0, 1)` open.
pub fn gumbel_noise<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.sample(Open01);
        T::of(-(-u.ln()).ln())
    })
}

/// Graph handles of a Gumbel-Softmax mask field.
#[derive(Debug, Clone, Copy)]
pub struct MaskFieldVars {
    /// Mask weights `m`, `[B×n]`.
    pub weights: Var,
    /// `log_softmax(F)` before the noise is added, `[B×n]`.
    pub log_probs: Var,
}

/// `f' = log_softmax(F) + z`, `m = softmax(f'/τ)` for `F[B×…]` flattened
/// per sample to `n` logits and noise `z[B×n]`.
pub fn gumbel_mask_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    noise: &Tensor<T>,
    temperature: T,
) -> Result<MaskFieldVars> {
    if !(temperature > T::zero()) {
        return Err(contract(format!("temperature must be positive, got {temperature}")));
    }
    let batch = g.shape(logits)[0];
    let n = g.value(logits).len() / batch.max(1);
    if noise.shape() != [batch, n] {
        return Err(contract(format!("noise shape {:?}, expected [{batch}, {n}]", noise.shape())));
    }
    let flat = g.reshape(logits, &[batch, n])?;
    let log_probs = g.log_softmax(flat, 1)?;
    let z = g.constant(noise.clone());
    let perturbed = g.add(log_probs, z)?;
    let scaled = if temperature == T::one() {
        perturbed
    } else {
        g.scale(perturbed, T::one() / temperature)
    };
    let weights = g.softmax(scaled, 1)?;
    Ok(MaskFieldVars { weights, log_probs })
}

/// Per-patch continuous importance weights of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField<T> {
    /// `m_i`, positive, summing to one.
    pub weights: Vec<T>,
    /// `log_softmax(F)_i` before Gumbel noise; used for visualization.
    pub pre_noise_logits: Vec<T>,
}

impl<T: Scalar> MaskField<T> {
    /// Splits batched graph values into per-sample fields.
    pub fn from_graph(g: &Graph<T>, vars: MaskFieldVars) -> Vec<Self> {
        let w = g.value(vars.weights);
        let l = g.value(vars.log_probs);
        let n = w.shape()[1];
        w.data()
            .chunks(n)
            .zip(l.data().chunks(n))
            .map(|(w, l)| Self {
                weights: w.to_vec(),
                pre_noise_logits: l.to_vec(),
            })
            .collect()
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }
}

/// Value-level Gumbel-Softmax of one logit map `F` (any shape, flattened).
pub fn gumbel_mask<T: Scalar>(logits: &Tensor<T>, rng: &mut Rng, temperature: T) -> Result<MaskField<T>> {
    let noise = gumbel_noise(rng, &[1, logits.len()]);
    gumbel_mask_with_noise(logits, &noise, temperature)
}

pub fn gumbel_mask_with_noise<T: Scalar>(logits: &Tensor<T>, noise: &Tensor<T>, temperature: T) -> Result<MaskField<T>> {
    let mut g = Graph::new();
    let f = g.constant(logits.clone().reshaped(&[1, logits.len()])?);
    let vars = gumbel_mask_graph(&mut g, f, noise, temperature)?;
    Ok(MaskField::from_graph(&g, vars).remove(0))
}

/// Indices of the `k` largest values, ties broken by ascending index;
/// returned in ascending order.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(contract(format!("k={k} outside 1..={}", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// `γ_i = ε_i + β·[i ∈ Y]`, `ε_i ~ U(0, 1)` drawn in index order.
pub fn sample_gamma(top: &[usize], n: usize, beta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(contract(format!("boost β must be non-negative, got {beta}")));
    }
    let mut gamma: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    for &i in top {
        if i >= n {
            return Err(contract(format!("top-k index {i} outside 0..{n}")));
        }
        gamma[i] += beta;
    }
    Ok(gamma)
}

/// Partitions patches by priority: the top `floor(ratio·n)` are dropped.
pub fn build_mask_plan(gamma: Vec<f64>, ratio: f64) -> Result<MaskPlan> {
    MaskPlan::from_priorities(gamma, ratio)
}

/// `z'_i = z_i·m_i + z_i·sg(1 − m_i)`, evaluated in the equivalent form
/// `z_i + z_i·(m_i − sg(m_i))`: the forward value is exactly `z_i` while
/// `∂z'_i/∂m_i = z_i` and `∂z'_i/∂z_i = 1`.
///
/// `tokens` is `[(B·n)×d]`, `weights` holds `B·n` mask weights.
pub fn reweight_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, weights: Var) -> Result<Var> {
    let rows = g.shape(tokens)[0];
    if g.value(weights).len() != rows {
        return Err(contract(format!(
            "{} mask weights for {rows} tokens",
            g.value(weights).len()
        )));
    }
    let m = g.reshape(weights, &[rows])?;
    let frozen = g.stop_gradient(m);
    reweight_tokens_against(g, tokens, m, frozen)
}

/// `z_i + z_i·(m_i − r_i)` for an explicit reference `r`. With `r = sg(m)`
/// this is [`reweight_tokens`]; with `r` a constant copy of `m` it is the
/// same gradient as a function that can be finite-differenced.
pub fn reweight_tokens_against<T: Scalar>(g: &mut Graph<T>, tokens: Var, weights: Var, reference: Var) -> Result<Var> {
    let rows = g.shape(tokens)[0];
    if g.value(weights).len() != rows || g.value(reference).len() != rows {
        return Err(contract(format!(
            "{} mask weights and {} references for {rows} tokens",
            g.value(weights).len(),
            g.value(reference).len()
        )));
    }
    let m = g.reshape(weights, &[rows])?;
    let r = g.reshape(reference, &[rows])?;
    let delta = g.sub(m, r)?;
    let bump = g.scale_rows(tokens, delta)?;
    Ok(g.add(tokens, bump)?)
}

/// Binary patch grid marking the top `ceil(0.25·n)` pre-noise logits.
pub fn visualize_mask<T: Scalar>(field: &MaskField<T>) -> Vec<bool> {
    let n = field.n();
    let k = n.div_ceil(4).max(1);
    let top = topk_indices(&field.pre_noise_logits, k).expect("k within range");
    let mut cells = vec![false; n];
    for i in top {
        cells[i] = true;
    }
    cells
}

/// Binary PGM (P5) of a `grid_h×grid_w` cell mask, each cell drawn as a
/// `scale×scale` block; white marks set cells.
pub fn encode_pgm(cells: &[bool], grid_h: usize, grid_w: usize, scale: usize) -> Vec<u8> {
    assert_eq!(cells.len(), grid_h * grid_w);
    let (h, w) = (grid_h * scale, grid_w * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(if cells[(y / scale) * grid_w + x / scale] { 255 } else { 0 });
        }
    }
    out
}

pub fn write_pgm(path: &Path, cells: &[bool], grid_h: usize, grid_w: usize, scale: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(cells, grid_h, grid_w, scale))?;
    Ok(())
}

/// Parses a P5 file written by [`encode_pgm`] into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| crate::Error::Format {
        kind: "pgm",
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not utf-8"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("no pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel count mismatch"));
    }
    Ok((w, h, pixels.to_vec()))
}
