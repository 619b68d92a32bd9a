//! Vision transformer backbone: patch embedding, pre-norm transformer blocks
//! and extraction of the last block's CLS-to-patch attention maps.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract, Result};
use crate::mae::MaskPlan;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Backbone geometry. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            dim: 32,
            heads: 4,
            depth: 4,
            decoder_dim: 16,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(contract(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(contract(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(contract(format!(
                "decoder dim {} not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(contract("channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Splits `[c×h×w]` into `n = hw/p²` rows of `p²·c` values. Row `i` is the
/// patch at grid position `(i / (w/p), i % (w/p))`, flattened row-major with
/// the channel varying fastest.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(contract(format!("patchify expects [c, h, w], got {:?}", image.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(crate::autodiff::TensorError::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: vec![p, p],
        }
        .into());
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, p * p * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if p == 0 || h % p != 0 || w % p != 0 || patches.shape() != [h * w / (p * p), p * p * c] {
        return Err(contract(format!(
            "cannot unpatchify {:?} into [{c}, {h}, {w}] with p={p}",
            patches.shape()
        )));
    }
    let gw = w / p;
    let src = patches.data();
    let mut out = vec![T::zero(); c * h * w];
    for (i, row) in src.chunks(p * p * c).enumerate() {
        let (gy, gx) = (i / gw, i % gw);
        for py in 0..p {
            for px in 0..p {
                for ch in 0..c {
                    out[(ch * h + gy * p + py) * w + gx * p + px] = row[(py * p + px) * c + ch];
                }
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Truncated normal at two standard deviations.
pub(crate) fn trunc_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

/// 2-D sine-cosine table `[(1+g²)×d]` for a `g×g` grid with a zero CLS row.
/// The first half of the columns encodes the row, the second the column; an
/// odd remainder stays zero.
pub fn sincos_pos_embed<T: Scalar>(grid: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let freqs = half / 2;
    Tensor::from_fn(&[grid * grid + 1, d], |i| {
        let (row, col) = (i / d, i % d);
        if row == 0 || freqs == 0 || col >= 2 * half {
            return T::zero();
        }
        let cell = row - 1;
        let pos = if col < half { cell / grid } else { cell % grid } as f64;
        let k = col % half;
        if k >= 2 * freqs {
            return T::zero();
        }
        let omega = 1.0 / 10000f64.powf((k % freqs) as f64 / freqs as f64);
        T::of(if k < freqs { (pos * omega).sin() } else { (pos * omega).cos() })
    })
}

/// Registers a `[fan_in × fan_out]` weight and its bias.
pub(crate) fn linear_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], 0.02));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    (w, b)
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl BlockParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, dim: usize, mlp_ratio: usize) -> Self {
        let ln = |store: &mut ParamStore<T>, part: &str| {
            (
                store.add(format!("{name}.{part}.gamma"), Tensor::ones(&[dim])),
                store.add(format!("{name}.{part}.beta"), Tensor::zeros(&[dim])),
            )
        };
        let ln1 = ln(store, "ln1");
        let qkv = linear_params(store, rng, &format!("{name}.qkv"), dim, 3 * dim);
        let proj = linear_params(store, rng, &format!("{name}.proj"), dim, dim);
        let ln2 = ln(store, "ln2");
        let fc1 = linear_params(store, rng, &format!("{name}.fc1"), dim, mlp_ratio * dim);
        let fc2 = linear_params(store, rng, &format!("{name}.fc2"), mlp_ratio * dim, dim);
        Self {
            ln1,
            qkv,
            proj,
            ln2,
            fc1,
            fc2,
        }
    }

    /// Pre-norm block on `x[(batch·tokens)×dim]`. Also returns the attention
    /// scores and probabilities, each `[(batch·heads)×tokens×tokens]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<(Var, AttentionVars)> {
        let dim = g.shape(x)[1];
        let hd = dim / heads;
        let h = g.layer_norm(x, p[self.ln1.0], p[self.ln1.1])?;
        let qkv = linear(g, h, p[self.qkv.0], p[self.qkv.1])?;
        let qkv = g.reshape(qkv, &[batch, tokens, 3, heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let bh = batch * heads;
        let qkv = g.reshape(qkv, &[3 * bh, tokens, hd])?;
        let q = g.narrow(qkv, 0, bh)?;
        let k = g.narrow(qkv, bh, bh)?;
        let v = g.narrow(qkv, 2 * bh, bh)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::one() / T::of_usize(hd).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, heads, tokens, hd])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * tokens, dim])?;
        let out = linear(g, ctx, p[self.proj.0], p[self.proj.1])?;
        let x = g.add(x, out)?;
        let h = g.layer_norm(x, p[self.ln2.0], p[self.ln2.1])?;
        let h = linear(g, h, p[self.fc1.0], p[self.fc1.1])?;
        let h = g.gelu(h);
        let h = linear(g, h, p[self.fc2.0], p[self.fc2.1])?;
        Ok((g.add(x, h)?, AttentionVars { scores, probs: attn }))
    }
}

/// Scaled pre-softmax scores and softmax probabilities of one block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub scores: Var,
    pub probs: Var,
}

/// Last-block attention of the CLS query over patch keys, one `grid×grid`
/// map per head, renormalized to sum to one over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    /// `[batch × heads × grid × grid]`.
    pub maps: Tensor<T>,
}

impl<T: Scalar> AttentionStack<T> {
    /// Extracts CLS rows from attention probabilities `[(B·H)×(n+1)×(n+1)]`
    /// whose token 0 is the CLS token and tokens `1..=n` are patches in grid
    /// order.
    pub fn from_probs(probs: &Tensor<T>, batch: usize, heads: usize, grid: usize) -> Self {
        let n = grid * grid;
        let t = n + 1;
        assert_eq!(probs.shape(), [batch * heads, t, t]);
        let src = probs.data();
        let mut out = Vec::with_capacity(batch * heads * n);
        for bh in 0..batch * heads {
            let row = &src[bh * t * t + 1..bh * t * t + t];
            let total: T = row.iter().copied().sum();
            out.extend(row.iter().map(|&v| v / total));
        }
        Self {
            maps: Tensor::new(&[batch, heads, grid, grid], out).expect("attention shape"),
        }
    }

    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn grid(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Maps of one sample, `[heads × grid × grid]`.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let per = self.heads() * self.grid() * self.grid();
        Tensor::new(
            &[self.heads(), self.grid(), self.grid()],
            self.maps.data()[b * per..(b + 1) * per].to_vec(),
        )
        .expect("sample shape")
    }
}

/// ViT encoder parameter layout.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ViTConfig,
    patch: (ParamId, ParamId),
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    norm: (ParamId, ParamId),
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn new<T: Scalar>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let patch = linear_params(store, rng, "encoder.patch_embed", cfg.patch_dim(), d);
        let cls = store.add("encoder.cls_token", trunc_normal(rng, &[1, d], 0.02));
        let pos = store.add("encoder.pos_embed", sincos_pos_embed(cfg.grid(), d));
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::new(store, rng, &format!("encoder.blocks.{i}"), d, cfg.mlp_ratio))
            .collect();
        let norm = (
            store.add("encoder.norm.gamma", Tensor::ones(&[d])),
            store.add("encoder.norm.beta", Tensor::zeros(&[d])),
        );
        Self {
            cfg: cfg.clone(),
            patch,
            cls,
            pos,
            blocks,
            norm,
        }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn patch_embed_ids(&self) -> (ParamId, ParamId) {
        self.patch
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos
    }

    /// `z_i = patch_i · W + b + pos_i` for patches `[(B·n)×(p²c)]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, patches: Var) -> Result<Var> {
        let n = self.cfg.num_patches();
        let rows = g.shape(patches)[0];
        if rows % n != 0 {
            return Err(contract(format!("{rows} patch rows is not a multiple of n={n}")));
        }
        let batch = rows / n;
        let z = linear(g, patches, p[self.patch.0], p[self.patch.1])?;
        let idx: Vec<usize> = (0..batch).flat_map(|_| 1..=n).collect();
        let pos = g.gather_rows(p[self.pos], &idx)?;
        Ok(g.add(z, pos)?)
    }

    fn cls_row<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams) -> Result<Var> {
        let pos0 = g.narrow(p[self.pos], 0, 1)?;
        Ok(g.add(p[self.cls], pos0)?)
    }

    /// Runs the blocks and final norm over `x[(batch·tokens)×d]`; returns the
    /// output and the last block's attention probabilities.
    pub fn transformer_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        mut x: Var,
        batch: usize,
        tokens: usize,
    ) -> Result<(Var, Option<AttentionVars>)> {
        let mut last = None;
        for blk in &self.blocks {
            let (y, attn) = blk.forward(g, p, x, batch, tokens, self.cfg.heads)?;
            x = y;
            last = Some(attn);
        }
        let x = g.layer_norm(x, p[self.norm.0], p[self.norm.1])?;
        Ok((x, last))
    }

    /// Encodes `[CLS] + visible tokens` per sample. `tokens` holds all `B·n`
    /// embedded patch tokens; returns `[(B·(1+V))×d]`.
    pub fn encode_visible<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        tokens: Var,
        plans: &[MaskPlan],
    ) -> Result<Var> {
        let n = self.cfg.num_patches();
        let batch = plans.len();
        if g.shape(tokens)[0] != batch * n {
            return Err(contract(format!(
                "{} token rows for {batch} plans of n={n}",
                g.shape(tokens)[0]
            )));
        }
        let vis = plans.first().map_or(0, |pl| pl.visible().len());
        let mut gather = Vec::with_capacity(batch * vis);
        for (b, plan) in plans.iter().enumerate() {
            if plan.n() != n || plan.visible().len() != vis {
                return Err(contract("mask plans in a batch must share n and visible count"));
            }
            gather.extend(plan.visible().iter().map(|&i| b * n + i));
        }
        let visible = g.gather_rows(tokens, &gather)?;
        let cls = self.cls_row(g, p)?;
        let stacked = g.concat_rows(&[cls, visible])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..vis).map(move |j| 1 + b * vis + j)))
            .collect();
        let seq = g.gather_rows(stacked, &order)?;
        let (out, _) = self.transformer_forward(g, p, seq, batch, vis + 1)?;
        Ok(out)
    }

    /// Full-visibility forward over `[CLS] + all n tokens`. Returns
    /// `[(B·(n+1))×d]`, the last block's CLS attention maps and that block's
    /// attention scores.
    pub fn forward_full<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        tokens: Var,
    ) -> Result<(Var, AttentionStack<T>, Var)> {
        let n = self.cfg.num_patches();
        let batch = g.shape(tokens)[0] / n;
        let cls = self.cls_row(g, p)?;
        let stacked = g.concat_rows(&[cls, tokens])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
            .collect();
        let seq = g.gather_rows(stacked, &order)?;
        let (out, attn) = self.transformer_forward(g, p, seq, batch, n + 1)?;
        let attn = attn.ok_or_else(|| contract("encoder has no blocks"))?;
        let stack = AttentionStack::from_probs(g.value(attn.probs), batch, self.cfg.heads, self.cfg.grid());
        Ok((out, stack, attn.scores))
    }

    /// Differentiable CLS attention `[B×H×g×g]` from last-block scores
    /// `[(B·H)×(n+1)×(n+1)]`: a softmax over the patch keys of the CLS row,
    /// which equals the full-row softmax renormalized over patches.
    pub fn cls_attention<T: Scalar>(&self, g: &mut Graph<T>, scores: Var) -> Result<Var> {
        let (heads, grid) = (self.cfg.heads, self.cfg.grid());
        let t = grid * grid + 1;
        let bh = g.shape(scores)[0];
        let rows = g.reshape(scores, &[bh * t, t])?;
        let cls_rows: Vec<usize> = (0..bh).map(|i| i * t).collect();
        let cls = g.gather_rows(rows, &cls_rows)?;
        let by_key = g.permute(cls, &[1, 0])?;
        let patch_keys = g.narrow(by_key, 1, t - 1)?;
        let back = g.permute(patch_keys, &[1, 0])?;
        let probs = g.softmax(back, 1)?;
        Ok(g.reshape(probs, &[bh / heads, heads, grid, grid])?)
    }

    /// Mean of encoded patch tokens per sample (no masking), `[B×d]`.
    pub fn pooled_features<T: Scalar>(&self, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let x = g.constant(patches.clone());
        let z = self.embed(&mut g, &p, x)?;
        let (out, _, _) = self.forward_full(&mut g, &p, z)?;
        let n = self.cfg.num_patches();
        let d = self.cfg.dim;
        let v = g.value(out);
        let batch = v.shape()[0] / (n + 1);
        let mut feats = vec![T::zero(); batch * d];
        for b in 0..batch {
            for i in 1..=n {
                for (f, &x) in feats[b * d..(b + 1) * d].iter_mut().zip(v.row(b * (n + 1) + i)) {
                    *f += x;
                }
            }
        }
        let scale = T::one() / T::of_usize(n);
        feats.iter_mut().for_each(|f| *f *= scale);
        Ok(Tensor::new(&[batch, d], feats)?)
    }

    /// CLS attention maps from a frozen forward pass over all patches.
    pub fn attention_maps<T: Scalar>(&self, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<AttentionStack<T>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let x = g.constant(patches.clone());
        let z = self.embed(&mut g, &p, x)?;
        let (_, stack, _) = self.forward_full(&mut g, &p, z)?;
        Ok(stack)
    }
}

/// MAE decoder parameter layout.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ViTConfig,
    embed: (ParamId, ParamId),
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    norm: (ParamId, ParamId),
    pred: (ParamId, ParamId),
}

impl Decoder {
    pub fn new<T: Scalar>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let dd = cfg.decoder_dim;
        let embed = linear_params(store, rng, "decoder.embed", cfg.dim, dd);
        let mask_token = store.add("decoder.mask_token", trunc_normal(rng, &[1, dd], 0.02));
        let pos = store.add("decoder.pos_embed", sincos_pos_embed(cfg.grid(), dd));
        let blocks = (0..cfg.decoder_depth)
            .map(|i| BlockParams::new(store, rng, &format!("decoder.blocks.{i}"), dd, cfg.mlp_ratio))
            .collect();
        let norm = (
            store.add("decoder.norm.gamma", Tensor::ones(&[dd])),
            store.add("decoder.norm.beta", Tensor::zeros(&[dd])),
        );
        let pred = linear_params(store, rng, "decoder.pred", dd, cfg.patch_dim());
        Self {
            cfg: cfg.clone(),
            embed,
            mask_token,
            pos,
            blocks,
            norm,
            pred,
        }
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    /// Builds the decoder input: encoded CLS and visible tokens projected to
    /// decoder width, the shared mask token at every dropped position, and
    /// decoder positional embeddings. Returns `[(B·(n+1))×dd]`.
    pub fn assemble<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, encoded: Var, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.cfg.num_patches();
        let batch = plans.len();
        let vis = plans.first().map_or(0, |pl| pl.visible().len());
        if g.shape(encoded)[0] != batch * (vis + 1) {
            return Err(contract("encoded rows do not match plans"));
        }
        let y = linear(g, encoded, p[self.embed.0], p[self.embed.1])?;
        let all = g.concat_rows(&[y, p[self.mask_token]])?;
        let mask_row = batch * (vis + 1);
        let mut order = Vec::with_capacity(batch * (n + 1));
        for (b, plan) in plans.iter().enumerate() {
            let base = b * (vis + 1);
            order.push(base);
            let mut slot = vec![mask_row; n];
            for (j, &i) in plan.visible().iter().enumerate() {
                slot[i] = base + 1 + j;
            }
            order.extend(slot);
        }
        let seq = g.gather_rows(all, &order)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..=n).collect();
        let pos = g.gather_rows(p[self.pos], &pos_idx)?;
        Ok(g.add(seq, pos)?)
    }

    /// Pixel predictions for every patch, `[(B·n)×(p²c)]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, encoded: Var, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.cfg.num_patches();
        let batch = plans.len();
        let mut x = self.assemble(g, p, encoded, plans)?;
        for blk in &self.blocks {
            x = blk.forward(g, p, x, batch, n + 1, self.cfg.decoder_heads)?.0;
        }
        let x = g.layer_norm(x, p[self.norm.0], p[self.norm.1])?;
        let keep: Vec<usize> = (0..batch).flat_map(|b| (1..=n).map(move |i| b * (n + 1) + i)).collect();
        let x = g.gather_rows(x, &keep)?;
        linear(g, x, p[self.pred.0], p[self.pred.1])
    }
}
