//! Pretraining loop for every masking mode, checkpointing and the per-epoch
//! metrics log.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::adversarial::{
    adv_loss_discriminator, adv_loss_generator, generator_total_loss, pseudo_mask_batch, sample_pseudo_mask,
    Discriminator,
};
use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, GeneratorKind, Mode};
use crate::data::ShapeSample;
use crate::error::{contract, Error, Result};
use crate::generator::{
    gumbel_mask_graph, gumbel_noise, max_over_heads, reweight_tokens, reweight_tokens_against, sample_gamma, topk_indices, GeneratorHead,
    MaskField, MaskFieldVars,
};
use crate::mae::{bbox_boosted_plan, normalize_patches, random_mask_plan, recon_loss, Mae, MaskPlan};
use crate::optim::{adamw_step, cosine_lr, ema_update, AdamConfig, AdamState};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::vit::{patchify, AttentionStack};

pub const METRICS_HEADER: &str = "epoch,mode,loss_recon,loss_adv_g,loss_adv_d,lr,seed";

/// Rows fed to the frozen extractor at once when caching attention maps.
const EXTRACT_CHUNK: usize = 256;

/// Every trainable and frozen parameter set of a run.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub mae: Mae<T>,
    pub head: GeneratorHead,
    pub head_params: ParamStore<T>,
    pub disc: Discriminator<T>,
    pub disc_params: ParamStore<T>,
    /// Encoder parameters used for attention extraction: the frozen warmup
    /// model, or the EMA copy in `from_scratch` mode.
    pub extractor: Option<ParamStore<T>>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let mae = Mae::new(&cfg.model, &mut stream(seed, "init.mae", 0))?;
        let mut head_params = ParamStore::new();
        let head = GeneratorHead::new(cfg.model.heads, &mut head_params, &mut stream(seed, "init.generator", 0));
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(
            cfg.model.grid(),
            &mut disc_params,
            &mut stream(seed, "init.discriminator", 0),
        )?;
        Ok(Self {
            mae,
            head,
            head_params,
            disc,
            disc_params,
            extractor: None,
        })
    }

    /// Encoder parameters that produce attention maps for mask generation.
    pub fn extractor_params(&self) -> &ParamStore<T> {
        self.extractor.as_ref().unwrap_or(&self.mae.encoder_params)
    }

    pub fn attention_maps(&self, patches: &Tensor<T>) -> Result<AttentionStack<T>> {
        self.mae.encoder.attention_maps(self.extractor_params(), patches)
    }

    /// Pre-noise generator logits `log_softmax(F)` per sample, `[B×n]`.
    pub fn mask_logits(&self, attn: &AttentionStack<T>, kind: GeneratorKind) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.head_params, false);
        let f = match kind {
            GeneratorKind::Conv => {
                let a = g.constant(attn.maps.clone());
                self.head.forward(&mut g, &p, a)?
            }
            GeneratorKind::MaxAttention => g.constant(max_over_heads(attn)),
        };
        let b = attn.batch();
        let flat = g.reshape(f, &[b, g.value(f).len() / b])?;
        let l = g.log_softmax(flat, 1)?;
        Ok(g.value(l).clone())
    }

    /// Pre-noise mask fields of `samples`: `weights` is `softmax(F)`.
    pub fn mask_fields(&self, samples: &[ShapeSample], kind: GeneratorKind) -> Result<Vec<MaskField<T>>> {
        let p = self.mae.encoder.config().patch_size;
        let mut out = Vec::with_capacity(samples.len());
        let all: Vec<usize> = (0..samples.len()).collect();
        for chunk in all.chunks(EXTRACT_CHUNK) {
            let patches = batch_patches::<T>(samples, chunk, p)?;
            let stack = self.attention_maps(&patches)?;
            let logits = self.mask_logits(&stack, kind)?;
            let n = logits.shape()[1];
            for row in logits.data().chunks(n) {
                out.push(MaskField {
                    weights: row.iter().map(|v| v.exp()).collect(),
                    pre_noise_logits: row.to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Overwrites parameters, the extractor (when both sides have one) and
    /// power-iteration vectors from a training checkpoint.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_store("", &mut self.mae.encoder_params)?;
        ckpt.load_store("", &mut self.mae.decoder_params)?;
        ckpt.load_store("", &mut self.head_params)?;
        ckpt.load_store("", &mut self.disc_params)?;
        if let Some(ex) = self.extractor.as_mut() {
            ckpt.load_store("extractor.", ex)?;
        }
        for (i, s) in self.disc.spectral.iter_mut().enumerate() {
            s.u = ckpt.require(&format!("discriminator.conv{}.u", i + 1))?.cast::<T>().into_data();
            s.v = ckpt.require(&format!("discriminator.conv{}.v", i + 1))?.cast::<T>().into_data();
        }
        Ok(())
    }

    /// Models of a saved run, for evaluation.
    pub fn from_checkpoint(cfg: &Config, seed: u64, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, seed)?;
        let has_extractor = ckpt.entries().iter().any(|(n, _)| n.starts_with("extractor."));
        if has_extractor {
            m.extractor = Some(m.mae.encoder_params.clone());
        }
        m.load_checkpoint(ckpt)?;
        Ok(m)
    }
}

/// Patch rows `[(B·n)×(p²c)]` of the selected samples.
pub fn batch_patches<T: Scalar>(samples: &[ShapeSample], idx: &[usize], p: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut width = 0;
    for &i in idx {
        let pt = patchify(&samples[i].image_tensor::<T>(), p)?;
        width = pt.shape()[1];
        data.extend_from_slice(pt.data());
    }
    let rows = if width == 0 { 0 } else { data.len() / width };
    Ok(Tensor::new(&[rows, width], data)?)
}

/// Mean losses of one epoch; `None` where a term is not part of the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub loss_recon: Option<f64>,
    pub loss_adv_g: Option<f64>,
    pub loss_adv_d: Option<f64>,
    pub lr: f64,
    pub seed: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.mode.name(),
            fmt_opt(self.loss_recon),
            fmt_opt(self.loss_adv_g),
            fmt_opt(self.loss_adv_d),
            self.lr,
            self.seed
        )
    }
}

/// Appends rows to a metrics CSV, writing the header first.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file })
    }

    /// Reopens an existing log, keeping only rows up to `epochs` so a
    /// resumed run continues without gaps.
    pub fn resume(path: &Path, epochs: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let kept: Vec<&str> = text.lines().take(epochs + 1).collect();
        let mut file = std::fs::File::create(path)?;
        for line in kept {
            writeln!(file, "{line}")?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// `two_stage` warmup: generator and discriminator only.
    GeneratorOnly,
    Main,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    recon: Option<f64>,
    adv_g: Option<f64>,
    adv_d: Option<f64>,
}

#[derive(Debug, Clone)]
struct Optimizers<T> {
    encoder: AdamState<T>,
    decoder: AdamState<T>,
    head: AdamState<T>,
    disc: AdamState<T>,
}

/// Training state of one run.
pub struct Trainer<'a, T> {
    pub cfg: Config,
    pub seed: u64,
    pub models: ModelBundle<T>,
    samples: &'a [ShapeSample],
    opt: Optimizers<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Frozen-extractor attention per training sample, `H·n` values each.
    attn_cache: Option<Vec<T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run on `samples`. `extractor` must be given for modes that use
    /// a frozen warmup encoder.
    pub fn new(cfg: &Config, seed: u64, samples: &'a [ShapeSample], extractor: Option<ParamStore<T>>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(contract("training needs at least one sample"));
        }
        let mut models = ModelBundle::new(cfg, seed)?;
        let mode = cfg.train.mode;
        if mode.needs_warmup() {
            let ex = extractor.ok_or_else(|| contract(format!("mode {} needs a warmup extractor", mode.name())))?;
            if ex.len() != models.mae.encoder_params.len()
                || ex.iter().zip(models.mae.encoder_params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
            {
                return Err(contract("extractor layout does not match the encoder"));
            }
            models.extractor = Some(ex);
        } else if mode == Mode::FromScratch && cfg.train.ema_momentum.is_some() {
            models.extractor = Some(models.mae.encoder_params.clone());
        }
        let opt = Optimizers {
            encoder: AdamState::new(&models.mae.encoder_params),
            decoder: AdamState::new(&models.mae.decoder_params),
            head: AdamState::new(&models.head_params),
            disc: AdamState::new(&models.disc_params),
        };
        let mut t = Self {
            cfg: cfg.clone(),
            seed,
            models,
            samples,
            opt,
            step: 0,
            epoch: 0,
            attn_cache: None,
        };
        if mode.needs_warmup() {
            t.cache_attention()?;
        }
        Ok(t)
    }

    fn cache_attention(&mut self) -> Result<()> {
        let p = self.cfg.model.patch_size;
        let mut cache = Vec::new();
        let all: Vec<usize> = (0..self.samples.len()).collect();
        for chunk in all.chunks(EXTRACT_CHUNK) {
            let patches = batch_patches::<T>(self.samples, chunk, p)?;
            cache.extend_from_slice(self.models.attention_maps(&patches)?.maps.data());
        }
        self.attn_cache = Some(cache);
        Ok(())
    }

    pub fn samples(&self) -> &'a [ShapeSample] {
        self.samples
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.train.batch_size) as u64
    }

    fn stage1_epochs(&self) -> usize {
        if self.cfg.train.mode == Mode::TwoStage {
            self.cfg.train.stage1_epochs.unwrap_or(self.cfg.train.epochs)
        } else {
            0
        }
    }

    /// Epochs of the whole run, including a `two_stage` generator stage.
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs() + self.cfg.train.epochs
    }

    fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.stage1_epochs() {
            Stage::GeneratorOnly
        } else {
            Stage::Main
        }
    }

    /// Learning rate at global `step`; each stage has its own warmup+cosine
    /// schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        let spe = self.steps_per_epoch();
        let s1 = self.stage1_epochs() as u64 * spe;
        let (local, epochs) = if step < s1 {
            (step, self.stage1_epochs())
        } else {
            (step - s1, self.cfg.train.epochs)
        };
        let total = epochs as u64 * spe;
        let warmup_epochs = self.cfg.train.warmup().min(epochs as f64);
        let warmup = (warmup_epochs * spe as f64).round() as u64;
        cosine_lr(local, total, warmup, self.cfg.train.effective_lr())
    }

    fn batch_order(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut stream(self.seed, "train.shuffle", epoch as u64));
        order.chunks(self.cfg.train.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Runs the next epoch.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.epoch >= self.total_epochs() {
            return Err(contract("training already finished"));
        }
        let epoch = self.epoch;
        let stage = self.stage_of(epoch);
        let batches = self.batch_order(epoch);
        let (mut recon, mut adv_g, mut adv_d) = (Vec::new(), Vec::new(), Vec::new());
        let mut lr = 0.0;
        for batch in &batches {
            lr = self.lr_at(self.step);
            let losses = self.train_step(batch, stage, lr)?;
            recon.extend(losses.recon);
            adv_g.extend(losses.adv_g);
            adv_d.extend(losses.adv_d);
            self.step += 1;
        }
        self.epoch += 1;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(EpochMetrics {
            epoch: self.epoch,
            mode: self.cfg.train.mode,
            loss_recon: mean(&recon),
            loss_adv_g: mean(&adv_g),
            loss_adv_d: mean(&adv_d),
            lr,
            seed: self.seed,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochMetrics, &Self) -> Result<()>) -> Result<()> {
        while self.epoch < self.total_epochs() {
            let m = self.run_epoch()?;
            on_epoch(&m, self)?;
        }
        Ok(())
    }

    /// Single optimization step on the samples in `batch` at the current
    /// step counter. Returns the reconstruction loss when there is one.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<Option<f64>> {
        let stage = self.stage_of(self.epoch);
        let lr = self.lr_at(self.step);
        let losses = self.train_step(batch, stage, lr)?;
        self.step += 1;
        Ok(losses.recon)
    }

    /// The batches of the current epoch, in training order.
    pub fn current_batches(&self) -> Vec<Vec<usize>> {
        self.batch_order(self.epoch)
    }

    fn targets(&self, patches: &Tensor<T>) -> Tensor<T> {
        if self.cfg.train.normalize_targets {
            normalize_patches(patches)
        } else {
            patches.clone()
        }
    }

    fn attention_for(&self, batch: &[usize], patches: &Tensor<T>) -> Result<AttentionStack<T>> {
        let (h, gr) = (self.cfg.model.heads, self.cfg.model.grid());
        match &self.attn_cache {
            Some(cache) => {
                let per = h * gr * gr;
                let mut data = Vec::with_capacity(batch.len() * per);
                for &i in batch {
                    data.extend_from_slice(&cache[i * per..(i + 1) * per]);
                }
                Ok(AttentionStack {
                    maps: Tensor::new(&[batch.len(), h, gr, gr], data)?,
                })
            }
            None => self.models.attention_maps(patches),
        }
    }

    fn adversarial_active(&self) -> bool {
        self.cfg.mask.generator == GeneratorKind::Conv
    }

    fn check_loss(&self, what: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: what.to_string(),
                step: self.step,
                checkpoint: None,
            })
        }
    }

    fn train_step(&mut self, batch: &[usize], stage: Stage, lr: f64) -> Result<StepLosses> {
        let mode = self.cfg.train.mode;
        match (mode, stage) {
            (Mode::Random | Mode::Bbox, _) => self.plain_step(batch, lr),
            (Mode::TwoStage, Stage::GeneratorOnly) => self.generator_only_step(batch, lr),
            (Mode::TwoStage, Stage::Main) => self.frozen_generator_step(batch, lr),
            (Mode::Automae | Mode::FromScratch, _) => self.joint_step(batch, lr),
        }
    }

    fn adamw(&self) -> AdamConfig {
        let [b1, b2] = self.cfg.train.betas;
        AdamConfig::adamw((b1, b2), self.cfg.train.weight_decay)
    }

    fn adam_disc(&self) -> AdamConfig {
        let [b1, b2] = self.cfg.train.betas;
        AdamConfig::adam((b1, b2))
    }

    fn update_mae(&mut self, enc: Vec<Tensor<T>>, dec: Vec<Tensor<T>>, lr: f64) -> Result<()> {
        let cfg = self.adamw();
        adamw_step(&mut self.models.mae.encoder_params, &enc, &mut self.opt.encoder, lr, &cfg, self.step)?;
        adamw_step(&mut self.models.mae.decoder_params, &dec, &mut self.opt.decoder, lr, &cfg, self.step)?;
        if self.cfg.train.mode == Mode::FromScratch {
            if let (Some(m), Some(ex)) = (self.cfg.train.ema_momentum, self.models.extractor.as_mut()) {
                ema_update(ex, &self.models.mae.encoder_params, m)?;
            }
        }
        Ok(())
    }

    /// Random or bbox-boosted plans, reconstruction loss only.
    fn plain_step(&mut self, batch: &[usize], lr: f64) -> Result<StepLosses> {
        let n = self.cfg.model.num_patches();
        let ratio = self.cfg.train.mask_ratio;
        let p = self.cfg.model.patch_size;
        let mut rng = stream(self.seed, "train.plan", self.step);
        let plans = batch
            .iter()
            .map(|&i| match self.cfg.train.mode {
                Mode::Bbox => bbox_boosted_plan(n, &self.samples[i].bbox_patches(p), self.cfg.mask.beta, ratio, &mut rng),
                _ => random_mask_plan(n, ratio, &mut rng),
            })
            .collect::<Result<Vec<_>>>()?;
        let patches = batch_patches::<T>(self.samples, batch, p)?;
        let target = self.targets(&patches);
        let mae = &self.models.mae;
        let mut g = Graph::new();
        let enc = g.bind(&mae.encoder_params, true);
        let dec = g.bind(&mae.decoder_params, true);
        let x = g.constant(patches);
        let y = g.constant(target);
        let out = mae.forward(&mut g, &enc, &dec, x, &plans, None)?;
        let loss = recon_loss(&mut g, out.pred, y, &plans)?;
        let value = self.check_loss("reconstruction loss", g.value(loss).item().as_f64())?;
        g.backward(loss)?;
        let (eg, dg) = (enc.grads(&g), dec.grads(&g));
        self.update_mae(eg, dg, lr)?;
        Ok(StepLosses {
            recon: Some(value),
            ..Default::default()
        })
    }

    fn noise(&self, rows: usize) -> Tensor<T> {
        gumbel_noise(&mut stream(self.seed, "train.gumbel", self.step), &[rows, self.cfg.model.num_patches()])
    }

    /// Mask field of the current generator, evaluated without gradients.
    fn mask_values(&self, stack: &AttentionStack<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let head = g.bind(&self.models.head_params, false);
        let a = g.constant(stack.maps.clone());
        let f = generator_logits(&mut g, &self.models, self.cfg.mask.generator, &head, a, stack)?;
        let vars = gumbel_mask_graph(&mut g, f, noise, T::of(self.cfg.mask.temperature))?;
        Ok(g.value(vars.weights).clone())
    }

    /// Top-K boosted plans from mask weights `[B×n]`.
    fn plans_from_weights(&self, weights: &Tensor<T>) -> Result<Vec<MaskPlan>> {
        let n = self.cfg.model.num_patches();
        let k = self.cfg.top_k();
        let mut rng = stream(self.seed, "train.plan", self.step);
        weights
            .data()
            .chunks(n)
            .map(|m| {
                let top = topk_indices(m, k)?;
                let gamma = sample_gamma(&top, n, self.cfg.mask.beta, &mut rng)?;
                MaskPlan::from_priorities(gamma, self.cfg.train.mask_ratio)
            })
            .collect()
    }

    fn as_grid(&self, g: &mut Graph<T>, weights: Var) -> Result<Var> {
        let gr = self.cfg.model.grid();
        let b = g.shape(weights)[0];
        Ok(g.reshape(weights, &[b, 1, gr, gr])?)
    }

    /// Discriminator update on pseudo masks (real) vs. the given generated
    /// mask weights (fake). Returns its loss.
    fn discriminator_step(&mut self, fake_weights: &Tensor<T>, lr: f64) -> Result<f64> {
        let gr = self.cfg.model.grid();
        let b = fake_weights.shape()[0];
        let mut rng = stream(self.seed, "train.pseudo", self.step);
        let pseudo = (0..b)
            .map(|_| sample_pseudo_mask(gr, gr, self.cfg.adversarial.alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = self.cfg.adversarial.targets();
        let sigmas = self.models.disc.update_spectral(&self.models.disc_params);
        let mut g = Graph::new();
        let dp = g.bind(&self.models.disc_params, true);
        let real = g.constant(pseudo_mask_batch::<T>(&pseudo));
        let fake = g.constant(fake_weights.clone().reshaped(&[b, 1, gr, gr])?);
        let d_real = self.models.disc.forward_with(&mut g, &dp, real, &sigmas)?;
        let d_fake = self.models.disc.forward_with(&mut g, &dp, fake, &sigmas)?;
        let loss = adv_loss_discriminator(&mut g, d_real, d_fake, targets.a, targets.b)?;
        let value = self.check_loss("discriminator loss", g.value(loss).item().as_f64())?;
        g.backward(loss)?;
        let grads = dp.grads(&g);
        let cfg = self.adam_disc();
        adamw_step(&mut self.models.disc_params, &grads, &mut self.opt.disc, lr, &cfg, self.step)?;
        Ok(value)
    }

    /// `L_adv` of the generated weights under the current discriminator.
    fn generator_adv_loss(&mut self, g: &mut Graph<T>, weights: Var) -> Result<Var> {
        let grid = self.as_grid(g, weights)?;
        let dp = g.bind(&self.models.disc_params, false);
        let d_fake = self.models.disc.forward(g, &dp, &self.models.disc_params, grid)?;
        let adv = &self.cfg.adversarial;
        Ok(adv_loss_generator(g, d_fake, adv.c, adv.sign))
    }

    /// AutoMAE step: discriminator update, then a joint MAE + generator
    /// update on `L_recon + λ·L_adv`.
    fn joint_step(&mut self, batch: &[usize], lr: f64) -> Result<StepLosses> {
        let p = self.cfg.model.patch_size;
        let patches = batch_patches::<T>(self.samples, batch, p)?;
        let target = self.targets(&patches);
        let attention = self.attention_for(batch, &patches)?;
        let noise = self.noise(batch.len());
        let adversarial = self.adversarial_active();
        let fake = self.mask_values(&attention, &noise)?;
        let adv_d = if adversarial {
            Some(self.discriminator_step(&fake, lr)?)
        } else {
            None
        };
        let plans = self.plans_from_weights(&fake)?;
        let sigmas = if adversarial {
            self.models.disc.update_spectral(&self.models.disc_params)
        } else {
            Vec::new()
        };
        let inputs = ObjectiveInputs {
            patches,
            target,
            attention,
            noise,
            plans,
            sigmas,
            reference_weights: None,
        };
        let mut g = Graph::new();
        let obj = generator_objective(&mut g, &self.models, &self.cfg, &inputs)?;
        let recon_value = self.check_loss("reconstruction loss", g.value(obj.recon).item().as_f64())?;
        let adv_g = match obj.adv {
            Some(adv) => Some(self.check_loss("adversarial loss", g.value(adv).item().as_f64())?),
            None => None,
        };
        g.backward(obj.loss)?;
        let (eg, dg, hg) = (obj.enc.grads(&g), obj.dec.grads(&g), obj.head.grads(&g));
        self.update_mae(eg, dg, lr)?;
        if adversarial {
            let cfg = self.adamw();
            adamw_step(&mut self.models.head_params, &hg, &mut self.opt.head, lr, &cfg, self.step)?;
        }
        Ok(StepLosses {
            recon: Some(recon_value),
            adv_g,
            adv_d,
        })
    }

    /// First stage of `two_stage`: generator trained on the adversarial loss
    /// alone against the discriminator.
    fn generator_only_step(&mut self, batch: &[usize], lr: f64) -> Result<StepLosses> {
        if !self.adversarial_active() {
            return Ok(StepLosses::default());
        }
        let p = self.cfg.model.patch_size;
        let patches = batch_patches::<T>(self.samples, batch, p)?;
        let stack = self.attention_for(batch, &patches)?;
        let noise = self.noise(batch.len());
        let fake = self.mask_values(&stack, &noise)?;
        let adv_d = self.discriminator_step(&fake, lr)?;

        let mut g = Graph::new();
        let head = g.bind(&self.models.head_params, true);
        let a = g.constant(stack.maps.clone());
        let f = self.models.head.forward(&mut g, &head, a)?;
        let MaskFieldVars { weights, .. } = gumbel_mask_graph(&mut g, f, &noise, T::of(self.cfg.mask.temperature))?;
        let adv = self.generator_adv_loss(&mut g, weights)?;
        let adv_value = self.check_loss("adversarial loss", g.value(adv).item().as_f64())?;
        g.backward(adv)?;
        let hg = head.grads(&g);
        let cfg = self.adamw();
        adamw_step(&mut self.models.head_params, &hg, &mut self.opt.head, lr, &cfg, self.step)?;
        Ok(StepLosses {
            recon: None,
            adv_g: Some(adv_value),
            adv_d: Some(adv_d),
        })
    }

    /// Second stage of `two_stage`: frozen generator picks the plans, MAE
    /// trains on reconstruction alone.
    fn frozen_generator_step(&mut self, batch: &[usize], lr: f64) -> Result<StepLosses> {
        let p = self.cfg.model.patch_size;
        let patches = batch_patches::<T>(self.samples, batch, p)?;
        let target = self.targets(&patches);
        let stack = self.attention_for(batch, &patches)?;
        let noise = self.noise(batch.len());
        let weights = self.mask_values(&stack, &noise)?;
        let plans = self.plans_from_weights(&weights)?;
        let mae = &self.models.mae;
        let mut g = Graph::new();
        let enc = g.bind(&mae.encoder_params, true);
        let dec = g.bind(&mae.decoder_params, true);
        let x = g.constant(patches);
        let y = g.constant(target);
        let out = mae.forward(&mut g, &enc, &dec, x, &plans, None)?;
        let loss = recon_loss(&mut g, out.pred, y, &plans)?;
        let value = self.check_loss("reconstruction loss", g.value(loss).item().as_f64())?;
        g.backward(loss)?;
        let (eg, dg) = (enc.grads(&g), dec.grads(&g));
        self.update_mae(eg, dg, lr)?;
        Ok(StepLosses {
            recon: Some(value),
            ..Default::default()
        })
    }

    /// Pre-noise mask fields of the given samples under the current
    /// generator.
    pub fn mask_fields(&self, samples: &[ShapeSample]) -> Result<Vec<MaskField<T>>> {
        self.models.mask_fields(samples, self.cfg.mask.generator)
    }

    /// Serializes parameters, optimizer moments, power-iteration vectors and
    /// counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let m = &self.models;
        let mut c = Checkpoint::new();
        c.insert_store("", &m.mae.encoder_params);
        c.insert_store("", &m.mae.decoder_params);
        c.insert_store("", &m.head_params);
        c.insert_store("", &m.disc_params);
        if let Some(ex) = &m.extractor {
            c.insert_store("extractor.", ex);
        }
        for (i, s) in m.disc.spectral.iter().enumerate() {
            c.insert(format!("discriminator.conv{}.u", i + 1), &Tensor::new(&[s.u.len()], s.u.clone()).expect("u"));
            c.insert(format!("discriminator.conv{}.v", i + 1), &Tensor::new(&[s.v.len()], s.v.clone()).expect("v"));
        }
        for (name, st) in [
            ("encoder", &self.opt.encoder),
            ("decoder", &self.opt.decoder),
            ("generator", &self.opt.head),
            ("discriminator", &self.opt.disc),
        ] {
            c.insert_tensors(&format!("optim.{name}.m."), &st.m);
            c.insert_tensors(&format!("optim.{name}.v."), &st.v);
            c.insert_scalar(format!("optim.{name}.step"), st.step as f64);
        }
        c.insert_scalar("train.step", self.step as f64);
        c.insert_scalar("train.epoch", self.epoch as f64);
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores a run written by [`Self::checkpoint`] under the same config
    /// and seed.
    pub fn from_checkpoint(cfg: &Config, seed: u64, samples: &'a [ShapeSample], ckpt: &Checkpoint) -> Result<Self> {
        let extractor = if cfg.train.mode.needs_warmup() {
            let mut ex = Mae::<T>::new(&cfg.model, &mut stream(seed, "init.mae", 0))?.encoder_params;
            ckpt.load_store("extractor.", &mut ex)?;
            Some(ex)
        } else {
            None
        };
        let mut t = Self::new(cfg, seed, samples, extractor)?;
        t.models.load_checkpoint(ckpt)?;
        for (name, st) in [
            ("encoder", &mut t.opt.encoder),
            ("decoder", &mut t.opt.decoder),
            ("generator", &mut t.opt.head),
            ("discriminator", &mut t.opt.disc),
        ] {
            ckpt.load_tensors(&format!("optim.{name}.m."), &mut st.m)?;
            ckpt.load_tensors(&format!("optim.{name}.v."), &mut st.v)?;
            st.step = ckpt.scalar(&format!("optim.{name}.step"))? as u64;
        }
        t.step = ckpt.scalar("train.step")? as u64;
        t.epoch = ckpt.scalar("train.epoch")? as usize;
        Ok(t)
    }
}

/// Everything the joint objective treats as constant for one step.
#[derive(Debug, Clone)]
pub struct ObjectiveInputs<T> {
    pub patches: Tensor<T>,
    pub target: Tensor<T>,
    pub attention: AttentionStack<T>,
    pub noise: Tensor<T>,
    pub plans: Vec<MaskPlan>,
    /// Spectral norms of the discriminator layers.
    pub sigmas: Vec<T>,
    /// Replaces the stop-gradient copy of the mask weights in token
    /// reweighting; `None` in training.
    pub reference_weights: Option<Tensor<T>>,
}

/// Graph handles of [`generator_objective`].
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    pub enc: BoundParams,
    pub dec: BoundParams,
    pub head: BoundParams,
    pub weights: Var,
    pub recon: Var,
    pub adv: Option<Var>,
    pub loss: Var,
}

/// Generator logits `F` on attention `a`.
pub fn generator_logits<T: Scalar>(
    g: &mut Graph<T>,
    models: &ModelBundle<T>,
    kind: GeneratorKind,
    head: &BoundParams,
    a: Var,
    stack: &AttentionStack<T>,
) -> Result<Var> {
    match kind {
        GeneratorKind::Conv => models.head.forward(g, head, a),
        GeneratorKind::MaxAttention => Ok(g.constant(max_over_heads(stack))),
    }
}

/// Joint loss `L_recon + λ·L_adv` of the MAE and the mask generator, with
/// encoder, decoder and generator parameters bound as differentiable leaves.
/// The max-attention generator has no adversarial term.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    models: &ModelBundle<T>,
    cfg: &Config,
    inputs: &ObjectiveInputs<T>,
) -> Result<ObjectiveVars> {
    let adversarial = cfg.mask.generator == GeneratorKind::Conv;
    // With `adv_grad_into_vit` in shared-encoder mode, the discriminator sees
    // masks built from attention that stays attached to the encoder; the
    // reconstruction path always uses detached attention.
    let attached = adversarial
        && cfg.train.mode == Mode::FromScratch
        && cfg.train.adv_grad_into_vit
        && cfg.train.ema_momentum.is_none();
    let tau = T::of(cfg.mask.temperature);
    let mae = &models.mae;
    let enc = g.bind(&mae.encoder_params, true);
    let dec = g.bind(&mae.decoder_params, true);
    let head = g.bind(&models.head_params, adversarial);
    let x = g.constant(inputs.patches.clone());
    let y = g.constant(inputs.target.clone());
    let a = g.constant(inputs.attention.maps.clone());
    let f = generator_logits(g, models, cfg.mask.generator, &head, a, &inputs.attention)?;
    let weights = gumbel_mask_graph(g, f, &inputs.noise, tau)?.weights;
    let reference = inputs.reference_weights.clone().map(|r| g.constant(r));
    let reweight = move |g: &mut Graph<T>, tokens: Var| match reference {
        Some(r) => reweight_tokens_against(g, tokens, weights, r),
        None => reweight_tokens(g, tokens, weights),
    };
    let out = mae.forward(g, &enc, &dec, x, &inputs.plans, Some(&reweight))?;
    let recon = recon_loss(g, out.pred, y, &inputs.plans)?;
    if !adversarial {
        return Ok(ObjectiveVars {
            enc,
            dec,
            head,
            weights,
            recon,
            adv: None,
            loss: recon,
        });
    }
    let adv_weights = if attached {
        let tokens = mae.encoder.embed(g, &enc, x)?;
        let (_, _, scores) = mae.encoder.forward_full(g, &enc, tokens)?;
        let a_live = mae.encoder.cls_attention(g, scores)?;
        let f_live = models.head.forward(g, &head, a_live)?;
        gumbel_mask_graph(g, f_live, &inputs.noise, tau)?.weights
    } else {
        weights
    };
    let gr = cfg.model.grid();
    let b = g.shape(adv_weights)[0];
    let grid = g.reshape(adv_weights, &[b, 1, gr, gr])?;
    let dp = g.bind(&models.disc_params, false);
    let d_fake = models.disc.forward_with(g, &dp, grid, &inputs.sigmas)?;
    let adv = adv_loss_generator(g, d_fake, cfg.adversarial.c, cfg.adversarial.sign);
    let loss = generator_total_loss(g, recon, adv, cfg.adversarial.lambda)?;
    Ok(ObjectiveVars {
        enc,
        dec,
        head,
        weights,
        recon,
        adv: Some(adv),
        loss,
    })
}

/// Splits samples into a training head and a held-out tail.
pub fn split_holdout(samples: &[ShapeSample], holdout_fraction: f64) -> (&[ShapeSample], &[ShapeSample]) {
    let test = ((samples.len() as f64) * holdout_fraction).round() as usize;
    samples.split_at(samples.len() - test.min(samples.len()))
}

/// Where [`pretrain`] writes artifacts; everything is optional.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Result of a full pretraining run.
pub struct Pretrained<T> {
    pub models: ModelBundle<T>,
    pub metrics: Vec<EpochMetrics>,
    pub step: u64,
}

/// Encoder of a plain random-masking MAE trained with `cfg`'s budget; used as
/// the frozen extractor of `automae` and `two_stage` runs.
pub fn warmup_extractor<T: Scalar>(cfg: &Config, seed: u64, samples: &[ShapeSample]) -> Result<ParamStore<T>> {
    let mut warm = cfg.clone();
    warm.train.mode = Mode::Random;
    let mut t = Trainer::<T>::new(&warm, seed, samples, None)?;
    t.fit(|_, _| Ok(()))?;
    Ok(t.models.mae.encoder_params)
}

/// Loads the encoder parameters of a checkpoint as an extractor.
pub fn load_extractor<T: Scalar>(cfg: &Config, path: &Path) -> Result<ParamStore<T>> {
    let mut ex = Mae::<T>::new(&cfg.model, &mut stream(0, "init.mae", 0))?.encoder_params;
    Checkpoint::load(path)?.load_store("", &mut ex)?;
    Ok(ex)
}

/// Trains `cfg.train.mode` from scratch, pretraining a warmup extractor first
/// when the mode needs one and none is supplied.
pub fn pretrain<T: Scalar>(
    cfg: &Config,
    seed: u64,
    samples: &[ShapeSample],
    extractor: Option<ParamStore<T>>,
    outputs: &RunOutputs,
) -> Result<Pretrained<T>> {
    let extractor = match (cfg.train.mode.needs_warmup(), extractor, &cfg.train.extractor_checkpoint) {
        (false, _, _) => None,
        (true, Some(ex), _) => Some(ex),
        (true, None, Some(path)) => Some(load_extractor(cfg, path)?),
        (true, None, None) => Some(warmup_extractor(cfg, seed, samples)?),
    };
    let mut trainer = Trainer::new(cfg, seed, samples, extractor)?;
    run_trainer(&mut trainer, outputs, None)
}

/// Continues `trainer` to the end, writing metrics and checkpoints each
/// epoch. `resume_rows` keeps that many existing CSV rows.
pub fn run_trainer<T: Scalar>(
    trainer: &mut Trainer<'_, T>,
    outputs: &RunOutputs,
    resume_rows: Option<usize>,
) -> Result<Pretrained<T>> {
    let mut writer = match (&outputs.metrics_csv, resume_rows) {
        (Some(p), Some(rows)) => Some(MetricsWriter::resume(p, rows)?),
        (Some(p), None) => Some(MetricsWriter::create(p)?),
        (None, _) => None,
    };
    let mut metrics = Vec::new();
    let mut last_ckpt: Option<PathBuf> = None;
    let result = trainer.fit(|m, t| {
        if let Some(w) = writer.as_mut() {
            w.write(m)?;
        }
        if let Some(path) = &outputs.checkpoint {
            t.save_checkpoint(path)?;
            last_ckpt = Some(path.clone());
        }
        metrics.push(m.clone());
        Ok(())
    });
    match result {
        Err(Error::NonFinite { what, step, .. }) => Err(Error::NonFinite {
            what,
            step,
            checkpoint: last_ckpt,
        }),
        Err(e) => Err(e),
        Ok(()) => Ok(Pretrained {
            models: trainer.models.clone(),
            metrics,
            step: trainer.step,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn tiny(mode: Mode) -> Config {
        let mut cfg = Config::default();
        cfg.model.dim = 8;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg.model.decoder_dim = 8;
        cfg.model.decoder_heads = 2;
        cfg.model.decoder_depth = 1;
        cfg.train.mode = mode;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.stage1_epochs = Some(1);
        cfg.train.base_lr = 1e-2;
        cfg
    }

    #[test]
    fn every_mode_runs_and_logs_each_epoch() {
        let data = generate_dataset(8, 0, 0.05).unwrap();
        for mode in [Mode::Random, Mode::Bbox, Mode::Automae, Mode::TwoStage, Mode::FromScratch] {
            let cfg = tiny(mode);
            let out = pretrain::<f64>(&cfg, 1, &data, None, &RunOutputs::default()).unwrap();
            let expected = if mode == Mode::TwoStage { 3 } else { 2 };
            assert_eq!(out.metrics.len(), expected, "{mode:?}");
            for (i, m) in out.metrics.iter().enumerate() {
                assert_eq!(m.epoch, i + 1);
            }
        }
    }

    #[test]
    fn lr_schedule_per_stage() {
        let data = generate_dataset(8, 0, 0.05).unwrap();
        let mut cfg = tiny(Mode::Random);
        cfg.train.epochs = 10;
        cfg.train.warmup_epochs = Some(2.0);
        let t = Trainer::<f64>::new(&cfg, 0, &data, None).unwrap();
        assert_eq!(t.steps_per_epoch(), 2);
        assert_eq!(t.lr_at(0), 0.0);
        assert_eq!(t.lr_at(4), cfg.train.effective_lr());
        assert!(t.lr_at(20).abs() < 1e-15);
    }

    #[test]
    fn holdout_split_sizes() {
        let data = generate_dataset(10, 0, 0.0).unwrap();
        let (a, b) = split_holdout(&data, 0.2);
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = split_holdout(&data, 0.0);
        assert_eq!((a.len(), b.len()), (10, 0));
    }
}
