//! Central finite-difference checks of every graph operation, the model
//! building blocks and the composed training objectives.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::adversarial::{adv_loss_discriminator, adv_loss_generator, AdvSign, Discriminator};
use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::config::{Config, GradcheckConfig, Mode};
use crate::data::generate_sample;
use crate::error::Result;
use crate::generator::{gumbel_mask_graph, gumbel_noise, reweight_tokens, reweight_tokens_against, GeneratorHead};
use crate::mae::{random_mask_plan, recon_loss, MaskPlan};
use crate::rng::{stream, Rng};
use crate::train::{batch_patches, generator_objective, ModelBundle, ObjectiveInputs};
use crate::vit::{Encoder, ViTConfig};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Coordinates sampled per seed when a check has more parameters than this.
const MAX_COORDS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Composed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub seeds: u64,
    pub coords: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<34} seeds={:<3} coords={:<5} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.seeds,
            self.coords,
            self.max_rel_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        self.results.iter().map(|r| r.line() + "\n").collect()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Normal entries pushed at least 0.1 away from zero, for ops with a kink
/// there.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| v + 0.1 * v.signum())
}

/// `Σ r ⊙ out` with `r` a fixed pseudo-random tensor, turning any output into
/// a scalar whose gradient exercises every output element.
pub fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = normal(&mut stream(0, "gradcheck.projection", shape.iter().product::<usize>() as u64), &shape);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Coordinates `(param, element)` to check: all of them, or a seeded sample
/// of `MAX_COORDS` when there are more.
fn coordinates(store: &ParamStore<f64>, rng: &mut Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = store
        .values()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if all.len() <= MAX_COORDS {
        all
    } else {
        all.choose_multiple(rng, MAX_COORDS).copied().collect()
    }
}

/// Largest relative error between backprop and central differences of the
/// scalar `f(store)` over the chosen coordinates. `numeric_f` evaluates the
/// function for the finite differences; it differs from `f` only where `f`
/// uses a stop-gradient.
pub fn check_store(
    store: &ParamStore<f64>,
    coords: &[(usize, usize)],
    h: f64,
    f: &dyn Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
    numeric_f: &dyn Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(store, true);
    let loss = f(&mut g, &p)?;
    g.backward(loss)?;
    let grads = p.grads(&g);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind(s, false);
        let l = numeric_f(&mut g, &p)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for &(i, j) in coords {
        let x0 = store.values()[i].data()[j];
        work.values_mut()[i].data_mut()[j] = x0 + h;
        let plus = eval(&work)?;
        work.values_mut()[i].data_mut()[j] = x0 - h;
        let minus = eval(&work)?;
        work.values_mut()[i].data_mut()[j] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(grads[i].data()[j], numeric));
    }
    Ok(worst)
}

type Inputs = fn(&mut Rng) -> Vec<Tensor<f64>>;
type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// A primitive applied to generated inputs; the output is projected to a
/// scalar.
struct OpCase {
    name: &'static str,
    inputs: Inputs,
    build: Build,
}

fn op_cases() -> Vec<OpCase> {
    fn n(rng: &mut Rng, s: &[usize]) -> Tensor<f64> {
        normal(rng, s)
    }
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| vec![n(r, &[3, 4]), n(r, &[4, 5])],
            build: |g, x| Ok(g.matmul(x[0], x[1])?),
        },
        OpCase {
            name: "batch_matmul",
            inputs: |r| vec![n(r, &[2, 3, 4]), n(r, &[2, 4, 5])],
            build: |g, x| Ok(g.batch_matmul(x[0], x[1], false)?),
        },
        OpCase {
            name: "batch_matmul (transposed rhs)",
            inputs: |r| vec![n(r, &[2, 3, 4]), n(r, &[2, 5, 4])],
            build: |g, x| Ok(g.batch_matmul(x[0], x[1], true)?),
        },
        OpCase {
            name: "add",
            inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])],
            build: |g, x| Ok(g.add(x[0], x[1])?),
        },
        OpCase {
            name: "add (scalar rhs)",
            inputs: |r| vec![n(r, &[3, 4]), n(r, &[])],
            build: |g, x| Ok(g.add(x[0], x[1])?),
        },
        OpCase {
            name: "sub",
            inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])],
            build: |g, x| Ok(g.sub(x[0], x[1])?),
        },
        OpCase {
            name: "mul",
            inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])],
            build: |g, x| Ok(g.mul(x[0], x[1])?),
        },
        OpCase {
            name: "mul (scalar lhs)",
            inputs: |r| vec![n(r, &[]), n(r, &[3, 4])],
            build: |g, x| Ok(g.mul(x[0], x[1])?),
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![n(r, &[3, 4])],
            build: |g, x| Ok(g.scale(x[0], -1.7)),
        },
        OpCase {
            name: "add_scalar",
            inputs: |r| vec![n(r, &[3, 4])],
            build: |g, x| Ok(g.add_scalar(x[0], 0.3)),
        },
        OpCase {
            name: "add_bias",
            inputs: |r| vec![n(r, &[2, 3, 4]), n(r, &[4])],
            build: |g, x| Ok(g.add_bias(x[0], x[1])?),
        },
        OpCase {
            name: "scale_rows",
            inputs: |r| vec![n(r, &[4, 3, 2]), n(r, &[4])],
            build: |g, x| Ok(g.scale_rows(x[0], x[1])?),
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![off_zero(r, &[3, 5])],
            build: |g, x| Ok(g.relu(x[0])),
        },
        OpCase {
            name: "leaky_relu",
            inputs: |r| vec![off_zero(r, &[3, 5])],
            build: |g, x| Ok(g.leaky_relu(x[0], 0.2)),
        },
        OpCase {
            name: "gelu",
            inputs: |r| vec![n(r, &[3, 5]).map(|v| 2.0 * v)],
            build: |g, x| Ok(g.gelu(x[0])),
        },
        OpCase {
            name: "square",
            inputs: |r| vec![n(r, &[3, 4])],
            build: |g, x| Ok(g.square(x[0])),
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| vec![n(r, &[3, 6]), n(r, &[6]), n(r, &[6])],
            build: |g, x| Ok(g.layer_norm(x[0], x[1], x[2])?),
        },
        OpCase {
            name: "softmax (axis 0)",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.softmax(x[0], 0)?),
        },
        OpCase {
            name: "softmax (axis 1)",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.softmax(x[0], 1)?),
        },
        OpCase {
            name: "softmax (last axis)",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.softmax(x[0], 2)?),
        },
        OpCase {
            name: "log_softmax (axis 1)",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.log_softmax(x[0], 1)?),
        },
        OpCase {
            name: "log_softmax (last axis)",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.log_softmax(x[0], 2)?),
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![n(r, &[3, 4])],
            build: |g, x| {
                let s = g.sum(x[0]);
                Ok(g.square(s))
            },
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![n(r, &[3, 4])],
            build: |g, x| {
                let s = g.mean(x[0]);
                Ok(g.square(s))
            },
        },
        OpCase {
            name: "reshape",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.reshape(x[0], &[6, 4])?),
        },
        OpCase {
            name: "permute",
            inputs: |r| vec![n(r, &[2, 3, 4])],
            build: |g, x| Ok(g.permute(x[0], &[2, 0, 1])?),
        },
        OpCase {
            name: "narrow",
            inputs: |r| vec![n(r, &[5, 3])],
            build: |g, x| Ok(g.narrow(x[0], 1, 3)?),
        },
        OpCase {
            name: "gather_rows (repeated rows)",
            inputs: |r| vec![n(r, &[4, 3])],
            build: |g, x| Ok(g.gather_rows(x[0], &[2, 0, 2, 3])?),
        },
        OpCase {
            name: "concat_rows",
            inputs: |r| vec![n(r, &[2, 3]), n(r, &[3, 3])],
            build: |g, x| Ok(g.concat_rows(&[x[0], x[1]])?),
        },
        OpCase {
            name: "conv2d (batched, bias, pad 1)",
            inputs: |r| vec![n(r, &[2, 2, 5, 5]), n(r, &[3, 2, 3, 3]), n(r, &[3])],
            build: |g, x| Ok(g.conv2d(x[0], x[1], Some(x[2]), 1, 1)?),
        },
        OpCase {
            name: "conv2d (stride 2, no bias)",
            inputs: |r| vec![n(r, &[2, 1, 6, 6]), n(r, &[2, 1, 4, 4])],
            build: |g, x| Ok(g.conv2d(x[0], x[1], None, 2, 1)?),
        },
        OpCase {
            name: "conv2d (unbatched)",
            inputs: |r| vec![n(r, &[2, 4, 4]), n(r, &[2, 2, 3, 3]), n(r, &[2])],
            build: |g, x| Ok(g.conv2d(x[0], x[1], Some(x[2]), 1, 0)?),
        },
    ]
}

fn store_of(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.add(format!("x{i}"), t);
    }
    s
}

fn run_op(case: &OpCase, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..cfg.seeds {
        let mut rng = stream(seed, "gradcheck.op", 0);
        let store = store_of((case.inputs)(&mut rng));
        let cs = coordinates(&store, &mut rng);
        coords += cs.len();
        let f = |g: &mut Graph<f64>, p: &BoundParams| {
            let out = (case.build)(g, p.vars())?;
            project(g, out)
        };
        worst = worst.max(check_store(&store, &cs, cfg.step, &f, &f)?);
    }
    Ok(CheckResult {
        name: case.name.to_string(),
        kind: CheckKind::Op,
        seeds: cfg.seeds,
        coords,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

/// The stop-gradient op has no finite-difference counterpart: its
/// backpropagated gradient must be exactly zero.
fn run_stop_gradient(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..cfg.seeds {
        let mut rng = stream(seed, "gradcheck.op", 1);
        let mut g = Graph::new();
        let x = g.param(normal(&mut rng, &[3, 4]));
        let s = g.stop_gradient(x);
        let loss = project(&mut g, s)?;
        g.backward(loss)?;
        let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(&[3, 4]));
        worst = grad.data().iter().fold(worst, |w, v| w.max(v.abs()));
    }
    Ok(CheckResult {
        name: "stop_gradient (zero gradient)".into(),
        kind: CheckKind::Op,
        seeds: cfg.seeds,
        coords: 12 * cfg.seeds as usize,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

/// Model used by the composed checks: grid 4×4, one block each side.
pub fn tiny_model_config() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        channels: 3,
        patch_size: 8,
        dim: 8,
        heads: 2,
        depth: 1,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
    }
}

fn composed(name: &str, cfg: &GradcheckConfig, coords: usize, worst: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        kind: CheckKind::Composed,
        seeds: cfg.seeds,
        coords,
        max_rel_error: worst,
        tolerance: COMPOSED_TOLERANCE,
    }
}

/// A module forward with its own parameters, checked with respect to the
/// parameters and the module input together.
fn run_module(
    name: &str,
    cfg: &GradcheckConfig,
    setup: &dyn Fn(u64) -> Result<(ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>>)>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..cfg.seeds {
        let (store, f) = setup(seed)?;
        let cs = coordinates(&store, &mut stream(seed, "gradcheck.coords", 0));
        count += cs.len();
        worst = worst.max(check_store(&store, &cs, cfg.step, &*f, &*f)?);
    }
    Ok(composed(name, cfg, count, worst))
}

fn module_checks(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let vit = tiny_model_config();
    let n = vit.num_patches();
    let mut out = Vec::new();

    out.push(run_module("vit encoder + cls attention", cfg, &|seed| {
        let mut rng = stream(seed, "gradcheck.vit", 0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&vit, &mut store, &mut rng);
        let input = store.add("input", normal(&mut rng, &[2 * n, vit.patch_dim()]));
        let f = move |g: &mut Graph<f64>, p: &BoundParams| {
            let z = enc.embed(g, p, p[input])?;
            let (h, _, scores) = enc.forward_full(g, p, z)?;
            let a = enc.cls_attention(g, scores)?;
            let l1 = project(g, h)?;
            let l2 = project(g, a)?;
            Ok(g.add(l1, l2)?)
        };
        Ok((store, Box::new(f) as Box<_>))
    })?);

    out.push(run_module("generator head", cfg, &|seed| {
        let mut rng = stream(seed, "gradcheck.head", 0);
        let mut store = ParamStore::new();
        let head = GeneratorHead::new(vit.heads, &mut store, &mut rng);
        let input = store.add("input", normal(&mut rng, &[2, vit.heads, 4, 4]).map(|v| 0.2 * v.abs()));
        let f = move |g: &mut Graph<f64>, p: &BoundParams| {
            let y = head.forward(g, p, p[input])?;
            project(g, y)
        };
        Ok((store, Box::new(f) as Box<_>))
    })?);

    out.push(run_module("gumbel mask field", cfg, &|seed| {
        let mut rng = stream(seed, "gradcheck.gumbel", 0);
        let noise: Tensor<f64> = gumbel_noise(&mut rng, &[2, n]);
        let store = store_of(vec![normal(&mut rng, &[2, 1, 4, 4])]);
        let f = move |g: &mut Graph<f64>, p: &BoundParams| {
            let m = gumbel_mask_graph(g, p.vars()[0], &noise, 0.7)?;
            project(g, m.weights)
        };
        Ok((store, Box::new(f) as Box<_>))
    })?);

    out.push(run_module("discriminator (fixed sigma)", cfg, &|seed| {
        let mut rng = stream(seed, "gradcheck.disc", 0);
        let mut store = ParamStore::new();
        let mut disc = Discriminator::new(4, &mut store, &mut rng)?;
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let sigmas = disc.update_spectral(&store);
        let input = store.add("input", normal(&mut rng, &[3, 1, 4, 4]).map(f64::abs));
        let f = move |g: &mut Graph<f64>, p: &BoundParams| {
            let d = disc.forward_with(g, p, p[input], &sigmas)?;
            let lg = adv_loss_generator(g, d, 0.0, AdvSign::AsPrinted);
            let ld = adv_loss_discriminator(g, d, d, -1.0, 1.0)?;
            let lg2 = adv_loss_generator(g, d, 0.3, AdvSign::LsganStandard);
            let s = g.add(lg, ld)?;
            Ok(g.add(s, lg2)?)
        };
        Ok((store, Box::new(f) as Box<_>))
    })?);

    out.push(run_module("reconstruction loss", cfg, &|seed| {
        let mut rng = stream(seed, "gradcheck.recon", 0);
        let plans: Vec<MaskPlan> = (0..2).map(|_| random_mask_plan(n, 0.75, &mut rng)).collect::<Result<_>>()?;
        let store = store_of(vec![normal(&mut rng, &[2 * n, 3]), normal(&mut rng, &[2 * n, 3])]);
        let f = move |g: &mut Graph<f64>, p: &BoundParams| recon_loss(g, p.vars()[0], p.vars()[1], &plans);
        Ok((store, Box::new(f) as Box<_>))
    })?);

    // Stop-gradient reweighting: finite differences run on the same
    // expression with the stop-gradient copy frozen at its base value.
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..cfg.seeds {
        let mut rng = stream(seed, "gradcheck.reweight", 0);
        let m0 = normal(&mut rng, &[6]).map(f64::exp);
        let store = store_of(vec![normal(&mut rng, &[6, 4]), m0.clone()]);
        let f = |g: &mut Graph<f64>, p: &BoundParams| {
            let z = reweight_tokens(g, p.vars()[0], p.vars()[1])?;
            let z = g.square(z);
            project(g, z)
        };
        let numeric = move |g: &mut Graph<f64>, p: &BoundParams| {
            let r = g.constant(m0.clone());
            let z = reweight_tokens_against(g, p.vars()[0], p.vars()[1], r)?;
            let z = g.square(z);
            project(g, z)
        };
        let cs = coordinates(&store, &mut rng);
        count += cs.len();
        worst = worst.max(check_store(&store, &cs, cfg.step, &f, &numeric)?);
    }
    out.push(composed("stop-gradient token reweighting", cfg, count, worst));
    Ok(out)
}

/// Inputs of one composed-objective check: a fresh model, two samples,
/// attention from a separately seeded extractor, plans from the generator.
fn objective_setup(cfg: &Config, seed: u64) -> Result<(ModelBundle<f64>, ObjectiveInputs<f64>)> {
    let mut models = ModelBundle::<f64>::new(cfg, seed)?;
    let mut rng = stream(seed, "gradcheck.objective", 0);
    for store in [&mut models.head_params, &mut models.disc_params] {
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += 0.02 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let samples: Vec<_> = (0..2).map(|i| generate_sample(seed, i, 0.05)).collect();
    let patches = batch_patches::<f64>(&samples, &[0, 1], cfg.model.patch_size)?;
    let extractor = ModelBundle::<f64>::new(cfg, seed + 1_000)?;
    let attention = extractor.attention_maps(&patches)?;
    let n = cfg.model.num_patches();
    let noise = gumbel_noise(&mut rng, &[2, n]);
    let sigmas = models.disc.update_spectral(&models.disc_params);
    let plans = (0..2).map(|_| random_mask_plan(n, 0.75, &mut rng)).collect::<Result<Vec<_>>>()?;
    let target = patches.clone();
    Ok((
        models,
        ObjectiveInputs {
            patches,
            target,
            attention,
            noise,
            plans,
            sigmas,
            reference_weights: None,
        },
    ))
}

/// Encoder, decoder and generator parameters as one store, in that order.
fn merged(models: &ModelBundle<f64>) -> (ParamStore<f64>, [usize; 3]) {
    let mut s = ParamStore::new();
    let stores = [&models.mae.encoder_params, &models.mae.decoder_params, &models.head_params];
    for st in stores {
        for (name, t) in st.iter() {
            s.add(name.to_string(), t.clone());
        }
    }
    (s, stores.map(ParamStore::len))
}

fn split_into(models: &mut ModelBundle<f64>, merged: &ParamStore<f64>, lens: [usize; 3]) {
    let vals = merged.values();
    let (e, rest) = vals.split_at(lens[0]);
    let (d, h) = rest.split_at(lens[1]);
    models.mae.encoder_params.values_mut().clone_from_slice(e);
    models.mae.decoder_params.values_mut().clone_from_slice(d);
    models.head_params.values_mut().clone_from_slice(h);
}

/// Full joint objective `L_recon + λ·L_adv` as trained, with respect to
/// encoder, decoder and generator parameters.
fn run_objective(name: &str, cfg: &Config, gc: &GradcheckConfig) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..gc.seeds {
        let (models, mut inputs) = objective_setup(cfg, seed)?;
        let (store, lens) = merged(&models);
        let mut g = Graph::new();
        let vars = generator_objective(&mut g, &models, cfg, &inputs)?;
        g.backward(vars.loss)?;
        let grads: Vec<Tensor<f64>> = [vars.enc.grads(&g), vars.dec.grads(&g), vars.head.grads(&g)].concat();
        inputs.reference_weights = Some(g.value(vars.weights).clone());

        let mut rng = stream(seed, "gradcheck.coords", 1);
        let mut coords = Vec::new();
        // Sample each parameter group separately so the small generator head
        // is always covered.
        let mut offset = 0;
        for len in lens {
            let group: Vec<(usize, usize)> = (offset..offset + len)
                .flat_map(|i| (0..store.values()[i].len()).map(move |j| (i, j)))
                .collect();
            coords.extend(group.choose_multiple(&mut rng, MAX_COORDS / 3).copied());
            offset += len;
        }
        count += coords.len();

        let mut work = models.clone();
        let mut perturbed = store.clone();
        let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
            split_into(&mut work, s, lens);
            let mut g = Graph::new();
            let v = generator_objective(&mut g, &work, cfg, &inputs)?;
            Ok(g.value(v.loss).item())
        };
        for (i, j) in coords {
            let x0 = store.values()[i].data()[j];
            perturbed.values_mut()[i].data_mut()[j] = x0 + gc.step;
            let plus = eval(&perturbed)?;
            perturbed.values_mut()[i].data_mut()[j] = x0 - gc.step;
            let minus = eval(&perturbed)?;
            perturbed.values_mut()[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * gc.step);
            worst = worst.max(relative_error(grads[i].data()[j], numeric));
        }
    }
    Ok(composed(name, gc, count, worst))
}

fn objective_config(mode: Mode, attached: bool) -> Config {
    let mut cfg = Config::default();
    cfg.model = tiny_model_config();
    cfg.train.mode = mode;
    cfg.train.adv_grad_into_vit = attached;
    cfg.train.normalize_targets = false;
    cfg.mask.temperature = 0.8;
    cfg
}

/// Runs every check; `cfg.seeds` seeds each, central differences with step
/// `cfg.step`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for case in op_cases() {
        results.push(run_op(&case, cfg)?);
    }
    results.push(run_stop_gradient(cfg)?);
    results.extend(module_checks(cfg)?);
    results.push(run_objective(
        "joint objective (frozen extractor)",
        &objective_config(Mode::Automae, false),
        cfg,
    )?);
    results.push(run_objective(
        "joint objective (shared encoder)",
        &objective_config(Mode::FromScratch, true),
        cfg,
    )?);
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let store = store_of(vec![Tensor::new(&[2], vec![0.5, -1.5]).unwrap()]);
        let right = |g: &mut Graph<f64>, p: &BoundParams| {
            let s = g.square(p.vars()[0]);
            Ok(g.sum(s))
        };
        // Stop-gradient hides half of the dependence from backprop.
        let wrong = |g: &mut Graph<f64>, p: &BoundParams| {
            let x = p.vars()[0];
            let frozen = g.stop_gradient(x);
            let s = g.mul(x, frozen)?;
            Ok(g.sum(s))
        };
        let coords = [(0, 0), (0, 1)];
        assert!(check_store(&store, &coords, 1e-5, &right, &right).unwrap() < 1e-8);
        assert!(check_store(&store, &coords, 1e-5, &wrong, &wrong).unwrap() > 0.3);
    }

    #[test]
    fn quick_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig { seeds: 2, step: 1e-5 }).unwrap();
        assert!(report.all_passed(), "{}", report.render());
    }
}
