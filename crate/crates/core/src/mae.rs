//! Masked-autoencoding pipeline: mask plans, visible-token encoding,
//! mask-token decoding and the reconstruction loss over dropped patches.

use rand::Rng as _;

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vit::{patchify, Decoder, Encoder, ViTConfig};

/// Default fraction of patches hidden from the encoder.
pub const MASK_RATIO: f64 = 0.75;

/// Partition of the `n` patches of one image into visible and dropped sets,
/// together with the priorities that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    gamma: Vec<f64>,
    visible: Vec<usize>,
    dropped: Vec<usize>,
}

/// `floor(ratio·n)`, guarding against representation error in `ratio·n`.
pub fn dropped_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Drops the `floor(ratio·n)` patches with the largest priority; ties go
    /// to the lower index.
    pub fn from_priorities(gamma: Vec<f64>, ratio: f64) -> Result<Self> {
        let n = gamma.len();
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(contract(format!("mask ratio {ratio} outside (0, 1)")));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(contract("non-finite mask priority"));
        }
        let drop = dropped_count(n, ratio);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
        let mut dropped = order[..drop].to_vec();
        let mut visible = order[drop..].to_vec();
        dropped.sort_unstable();
        visible.sort_unstable();
        Ok(Self {
            gamma,
            visible,
            dropped,
        })
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Visible patch indices, ascending.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    /// Dropped patch indices, ascending.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn is_dropped(&self, i: usize) -> bool {
        self.dropped.binary_search(&i).is_ok()
    }
}

/// Uniform random masking: `γ_i ~ U(0, 1)`.
pub fn random_mask_plan(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if n < 2 {
        return Err(contract(format!("need at least 2 patches, got {n}")));
    }
    let gamma = (0..n).map(|_| rng.gen::<f64>()).collect();
    MaskPlan::from_priorities(gamma, ratio)
}

/// `γ_i = ε_i + β·[i ∈ bbox]`, `ε_i ~ U(0, 1)`. Draws the same noise
/// sequence as [`random_mask_plan`], so `β = 0` reproduces it exactly.
pub fn bbox_boosted_plan(n: usize, bbox_patches: &[usize], beta: f64, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(beta >= 0.0) {
        return Err(contract(format!("boost β must be non-negative, got {beta}")));
    }
    if n < 2 {
        return Err(contract(format!("need at least 2 patches, got {n}")));
    }
    if let Some(&bad) = bbox_patches.iter().find(|&&i| i >= n) {
        return Err(contract(format!("bbox patch {bad} outside 0..{n}")));
    }
    let mut gamma: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let mut inside = vec![false; n];
    for &i in bbox_patches {
        inside[i] = true;
    }
    for (g, &inb) in gamma.iter_mut().zip(&inside) {
        if inb {
            *g += beta;
        }
    }
    MaskPlan::from_priorities(gamma, ratio)
}

/// Mean squared error over the dropped patches of every sample.
/// `pred` and `target` are `[(B·n)×(p²c)]`.
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, plans: &[MaskPlan]) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(crate::autodiff::TensorError::shapes("recon_loss", g.shape(pred), g.shape(target)).into());
    }
    let mut rows = Vec::new();
    let mut offset = 0;
    for plan in plans {
        rows.extend(plan.dropped().iter().map(|&i| offset + i));
        offset += plan.n();
    }
    if rows.is_empty() {
        return Err(contract("reconstruction loss needs at least one dropped patch"));
    }
    if offset != g.shape(pred)[0] {
        return Err(contract("plans do not cover the prediction rows"));
    }
    let p = g.gather_rows(pred, &rows)?;
    let t = g.gather_rows(target, &rows)?;
    let diff = g.sub(p, t)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Normalizes every patch row to zero mean and unit variance.
pub fn normalize_patches<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let d = patches.shape()[1];
    let mut out = patches.clone();
    let df = T::of_usize(d);
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let rs = T::one() / (var + T::of(1e-6)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
    }
    out
}

/// Patchifies a batch of `[c×h×w]` images into one `[(B·n)×(p²c)]` tensor.
pub fn patchify_batch<T: Scalar>(images: &[&Tensor<T>], p: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for img in images {
        let pt = patchify(img, p)?;
        rows += pt.shape()[0];
        width = pt.shape()[1];
        data.extend_from_slice(pt.data());
    }
    Ok(Tensor::new(&[rows, width], data)?)
}

/// Encoder and decoder layouts with their parameters.
#[derive(Debug, Clone)]
pub struct Mae<T> {
    pub cfg: ViTConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_params: ParamStore<T>,
    pub decoder_params: ParamStore<T>,
}

/// Graph handles produced by one MAE forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MaeOutputs {
    pub tokens: Var,
    pub encoded: Var,
    pub pred: Var,
}

impl<T: Scalar> Mae<T> {
    pub fn new(cfg: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut encoder_params = ParamStore::new();
        let mut decoder_params = ParamStore::new();
        let encoder = Encoder::new(cfg, &mut encoder_params, rng);
        let decoder = Decoder::new(cfg, &mut decoder_params, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            encoder_params,
            decoder_params,
        })
    }

    /// Embeds `patches`, optionally lets `reweight` transform the token matrix,
    /// then encodes the visible tokens and decodes every patch.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        enc: &BoundParams,
        dec: &BoundParams,
        patches: Var,
        plans: &[MaskPlan],
        reweight: Option<&dyn Fn(&mut Graph<T>, Var) -> Result<Var>>,
    ) -> Result<MaeOutputs> {
        let mut tokens = self.encoder.embed(g, enc, patches)?;
        if let Some(f) = reweight {
            tokens = f(g, tokens)?;
        }
        let encoded = self.encoder.encode_visible(g, enc, tokens, plans)?;
        let pred = self.decoder.forward(g, dec, encoded, plans)?;
        Ok(MaeOutputs { tokens, encoded, pred })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn plan_sizes_are_exact() {
        let mut rng = stream(1, "t", 0);
        for (n, drop) in [(4, 3), (8, 6), (16, 12), (64, 48), (5, 3), (2, 1)] {
            let plan = random_mask_plan(n, MASK_RATIO, &mut rng).unwrap();
            assert_eq!(plan.dropped().len(), drop, "n={n}");
            assert_eq!(plan.visible().len(), n - drop);
            let mut all: Vec<usize> = plan.visible().iter().chain(plan.dropped()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_break_towards_lower_index() {
        let plan = MaskPlan::from_priorities(vec![0.5; 8], 0.75).unwrap();
        assert_eq!(plan.dropped(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(plan.visible(), &[6, 7]);
    }

    #[test]
    fn rejects_tiny_n_and_bad_ratio() {
        let mut rng = stream(1, "t", 0);
        assert!(random_mask_plan(1, 0.75, &mut rng).is_err());
        assert!(random_mask_plan(4, 1.0, &mut rng).is_err());
        assert!(bbox_boosted_plan(4, &[0], -0.1, 0.75, &mut rng).is_err());
        assert!(bbox_boosted_plan(4, &[4], 0.5, 0.75, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        let a = random_mask_plan(16, 0.75, &mut stream(9, "m", 0)).unwrap();
        let b = random_mask_plan(16, 0.75, &mut stream(9, "m", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_boost_matches_random_plan() {
        for s in 0..20 {
            let a = random_mask_plan(16, 0.75, &mut stream(s, "m", 0)).unwrap();
            let b = bbox_boosted_plan(16, &[1, 2, 5, 6], 0.0, 0.75, &mut stream(s, "m", 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unit_boost_drops_every_bbox_patch() {
        for s in 0..200 {
            let plan = bbox_boosted_plan(16, &[0, 5, 10, 15], 1.0, 0.75, &mut stream(s, "m", 0)).unwrap();
            for i in [0, 5, 10, 15] {
                assert!(plan.is_dropped(i));
            }
        }
    }

    fn loss_of(pred: Vec<f64>, target: Vec<f64>, plan: &MaskPlan, width: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let rows = pred.len() / width;
        let p = g.constant(Tensor::new(&[rows, width], pred).unwrap());
        let t = g.constant(Tensor::new(&[rows, width], target).unwrap());
        let l = recon_loss(&mut g, p, t, std::slice::from_ref(plan)).unwrap();
        g.value(l).item()
    }

    #[test]
    fn recon_loss_hand_values() {
        // gammas chosen so exactly patch 1 is dropped with ratio 0.5 on n=2
        let plan = MaskPlan::from_priorities(vec![0.1, 0.9], 0.5).unwrap();
        assert_eq!(plan.dropped(), &[1]);
        let target = vec![0.0, 0.0, 1.0, 2.0];
        assert_eq!(loss_of(target.clone(), target.clone(), &plan, 2), 0.0);
        let pred = vec![0.0, 0.0, 1.5, 2.5];
        assert_eq!(loss_of(pred.clone(), target.clone(), &plan, 2), 0.25);
        // visible-patch target changes are invisible to the loss
        let moved = vec![7.0, -3.0, 1.0, 2.0];
        assert_eq!(
            loss_of(pred.clone(), target, &plan, 2).to_bits(),
            loss_of(pred, moved, &plan, 2).to_bits()
        );
    }

    #[test]
    fn recon_loss_needs_dropped_patches() {
        let plan = MaskPlan::from_priorities(vec![0.3, 0.4], 0.4).unwrap();
        assert!(plan.dropped().is_empty());
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::zeros(&[2, 3]));
        assert!(recon_loss(&mut g, p, p, &[plan]).is_err());
    }
}
