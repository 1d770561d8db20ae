//! Finite-difference verification of every differentiable operator, the
//! composite modules and the end-to-end segmentation pipeline.
//!
//! Each case builds a scalar from random f64 inputs seeded by the case seed.
//! Operator outputs are reduced through a fixed random projection so that no
//! gradient coordinate is structurally uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, GradCheckConfig, MAX_KINK_FRACTION, GradCheckReport, Graph, PoolMode, Var};
use crate::data::derive_seed;
use crate::diffusion::encoder::stride2_stack_register;
use crate::diffusion::{PdEncoder, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::labels::{LabelMap, IGNORE};
use crate::params::{ParamGroup, ParamStore};
use crate::pdam::{Pdam, PdamConfig};
use crate::segnet::{seg_loss, FusionMode, LossWeights, PdSource, SegNet, SegNetConfig};
use crate::tensor::Tensor;

type CaseFn = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

/// One named gradient check, run once per seed.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    run: CaseFn,
}

impl Case {
    pub fn run(&self, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        (self.run)(seed, cfg)
    }
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Case").field("name", &self.name).finish()
    }
}

/// Worst result of one case over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub name: String,
    pub seeds: usize,
    pub coords: usize,
    /// Coordinates excluded as non-differentiable within the stencil.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_input: String,
    pub tolerance: f64,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.kinks as f64 <= MAX_KINK_FRACTION * self.coords as f64
    }
}

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            Case { name: $name, run: $f }
        };
    }
    vec![
        case!("conv2d", conv2d_dense),
        case!("conv2d_depthwise", conv2d_depthwise),
        case!("conv2d_pointwise", conv2d_pointwise),
        case!("global_pool_max", |s, c| global_pool(s, c, PoolMode::Max)),
        case!("global_pool_avg", |s, c| global_pool(s, c, PoolMode::Avg)),
        case!("linear", linear),
        case!("relu", relu),
        case!("sigmoid", sigmoid),
        case!("concat_split", concat_split),
        case!("elementwise_add", |s, c| elementwise(s, c, 0)),
        case!("elementwise_mul", |s, c| elementwise(s, c, 1)),
        case!("elementwise_sub_div", |s, c| elementwise(s, c, 2)),
        case!("scale_shift", scale_shift),
        case!("reductions", reductions),
        case!("softmax", softmax),
        case!("upsample_nearest", upsample_nearest),
        case!("resize_bilinear", resize_bilinear),
        case!("seg_loss", seg_loss_case),
        case!("pdam", pdam_case),
        case!("pd_encoder", encoder_case),
        case!("stem", stem_case),
        case!("pipeline", pipeline_case),
    ]
}

/// Runs the cases whose names contain `filter` (all when `None`) for seeds
/// `0..seeds`.
pub fn run_suite(seeds: usize, filter: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<CaseOutcome>> {
    if seeds == 0 {
        return Err(Error::config("gradient suite needs at least one seed"));
    }
    let selected: Vec<Case> = cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::config(format!(
            "no gradient case matches {:?}",
            filter.unwrap_or_default()
        )));
    }
    selected
        .iter()
        .map(|case| {
            let mut out = CaseOutcome {
                name: case.name.to_string(),
                seeds,
                coords: 0,
                kinks: 0,
                max_rel_error: 0.0,
                worst_seed: 0,
                worst_input: String::new(),
                tolerance: cfg.tolerance,
            };
            for seed in 0..seeds as u64 {
                let cfg = GradCheckConfig { seed, ..cfg.clone() };
                let report = case.run(seed, &cfg)?;
                for r in &report.inputs {
                    out.coords += r.checked;
                    out.kinks += r.kinks;
                    if r.max_rel_error > out.max_rel_error || out.worst_input.is_empty() {
                        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                        out.worst_seed = seed;
                        out.worst_input = r.name.clone();
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Values with magnitude in `[gap, 1]` and random sign, keeping kinks at zero
/// out of the difference stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..=1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(x * r)` for a fixed random `r` drawn from `seed`.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_for(seed, 0xD1CE);
    let r = uniform(g.shape(x), -1.0, 1.0, &mut rng);
    let r = g.constant(r)?;
    let y = g.mul(x, r)?;
    g.sum(y)
}

fn conv2d_dense(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 1);
    let inputs = [
        uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng),
        uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng),
        uniform(&[4], -0.5, 0.5, &mut rng),
    ];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn conv2d_depthwise(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 2);
    let inputs = [
        uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut rng),
        uniform(&[3, 1, 5, 5], -0.5, 0.5, &mut rng),
        uniform(&[3], -0.5, 0.5, &mut rng),
    ];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 2, 3)?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn conv2d_pointwise(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 3);
    let inputs = [
        uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng),
        uniform(&[6, 2, 1, 1], -0.5, 0.5, &mut rng),
    ];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0, 2)?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn global_pool(seed: u64, cfg: &GradCheckConfig, mode: PoolMode) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 4);
    let inputs = [uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng)];
    grad_check(
        |g, v| {
            let y = g.global_pool(v[0], mode)?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn linear(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 5);
    let inputs = [
        uniform(&[3, 5], -1.0, 1.0, &mut rng),
        uniform(&[4, 5], -1.0, 1.0, &mut rng),
        uniform(&[4], -1.0, 1.0, &mut rng),
    ];
    grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn relu(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 6);
    let inputs = [away_from_zero(&[2, 3, 4, 4], 0.01, &mut rng)];
    grad_check(
        |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn sigmoid(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 7);
    let inputs = [uniform(&[2, 3, 4, 4], -4.0, 4.0, &mut rng)];
    grad_check(
        |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn concat_split(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 8);
    let inputs = [
        uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng),
        uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng),
        uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng),
    ];
    grad_check(
        |g, v| {
            let cat = g.concat(v, 1)?;
            let parts = g.split(cat, &[2, 4], 1)?;
            let a = project(g, parts[0], seed)?;
            let b = project(g, parts[1], seed ^ 1)?;
            let mid = g.narrow(cat, 2, 1, 2)?;
            let c = project(g, mid, seed ^ 2)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &inputs,
        cfg,
    )
}

fn elementwise(seed: u64, cfg: &GradCheckConfig, which: u8) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 9 + which as u64);
    let shape = [2, 3, 4, 4];
    let inputs = [
        uniform(&shape, -1.0, 1.0, &mut rng),
        uniform(&shape, 0.5, 1.5, &mut rng),
        uniform(&[1, 3, 1, 1], 0.5, 1.5, &mut rng),
        uniform(&[2, 1, 4, 4], 0.5, 1.5, &mut rng),
    ];
    grad_check(
        |g, v| {
            let (full, chan, pix) = match which {
                0 => (g.add(v[0], v[1])?, g.add(v[0], v[2])?, g.add(v[0], v[3])?),
                1 => (g.mul(v[0], v[1])?, g.mul(v[0], v[2])?, g.mul(v[0], v[3])?),
                _ => (g.sub(v[0], v[1])?, g.div(v[0], v[2])?, g.div(v[1], v[3])?),
            };
            let a = project(g, full, seed)?;
            let b = project(g, chan, seed ^ 1)?;
            let c = project(g, pix, seed ^ 2)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &inputs,
        cfg,
    )
}

fn scale_shift(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 12);
    let inputs = [uniform(&[2, 3, 2, 5], -1.0, 1.0, &mut rng)];
    grad_check(
        |g, v| {
            let y = g.scale(v[0], -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.reshape(y, &[6, 10])?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn reductions(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 13);
    let inputs = [uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng)];
    grad_check(
        |g, v| {
            let per_channel = g.sum_to(v[0], &[1, 3, 1, 1])?;
            let a = project(g, per_channel, seed)?;
            let sq = g.mul(v[0], v[0])?;
            let b = g.mean(sq)?;
            let c = g.sum(v[0])?;
            let c = g.scale(c, 0.1)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &inputs,
        cfg,
    )
}

fn softmax(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 14);
    let inputs = [uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng)];
    grad_check(
        |g, v| {
            let p = g.softmax(v[0])?;
            let a = project(g, p, seed)?;
            let lp = g.log_softmax(v[0])?;
            let b = project(g, lp, seed ^ 1)?;
            g.add(a, b)
        },
        &inputs,
        cfg,
    )
}

fn upsample_nearest(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 15);
    let inputs = [uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng)];
    grad_check(
        |g, v| {
            let y = g.upsample_nearest(v[0], 6, 7)?;
            project(g, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn resize_bilinear(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 16);
    let inputs = [
        uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng),
        uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng),
    ];
    grad_check(
        |g, v| {
            let up = g.resize_bilinear(v[0], 7, 5)?;
            let down = g.resize_bilinear(v[1], 5, 3)?;
            let a = project(g, up, seed)?;
            let b = project(g, down, seed ^ 1)?;
            g.add(a, b)
        },
        &inputs,
        cfg,
    )
}

fn random_labels(n: usize, h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Result<Vec<LabelMap>> {
    (0..n)
        .map(|_| {
            let data = (0..h * w)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 {
                        IGNORE
                    } else {
                        rng.random_range(0..classes)
                    }
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

fn seg_loss_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 17);
    let inputs = [uniform(&[2, 4, 5, 5], -2.0, 2.0, &mut rng)];
    let labels = random_labels(2, 5, 5, 4, &mut rng)?;
    grad_check(
        |g, v| Ok(seg_loss(g, v[0], &labels, LossWeights::default())?.total),
        &inputs,
        cfg,
    )
}

fn pdam_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 18);
    let pdam = Pdam::new(PdamConfig::new(2), "pdam")?;
    let mut store = ParamStore::new();
    pdam.register(&mut store, Init::FanIn, &mut rng)?;
    perturb_biases(&mut store, &mut rng);
    let maps: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng)).collect();
    let by_param = grad_check_params(
        |g, s| {
            let m = maps.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
            let out = pdam.aggregate(g, s, &m)?;
            project(g, out, seed)
        },
        &store,
        cfg,
    )?;
    let by_input = grad_check(
        |g, v| {
            let out = pdam.aggregate(g, &store, v)?;
            project(g, out, seed)
        },
        &maps,
        cfg,
    )?;
    Ok(merge(by_param, by_input))
}

fn encoder_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 19);
    let enc = PdEncoder::new((4, 6), "enc");
    let mut store = ParamStore::new();
    enc.register(&mut store, Init::FanIn, &mut rng)?;
    perturb_biases(&mut store, &mut rng);
    let pd = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let by_param = grad_check_params(
        |g, s| {
            let x = g.constant(pd.clone())?;
            let z = enc.forward(g, s, x)?;
            project(g, z, seed)
        },
        &store,
        cfg,
    )?;
    let by_input = grad_check(
        |g, v| {
            let z = enc.forward(g, &store, v[0])?;
            project(g, z, seed)
        },
        std::slice::from_ref(&pd),
        &limited(cfg, 48),
    )?;
    Ok(merge(by_param, by_input))
}

fn stem_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 20);
    let net = SegNet::new(SegNetConfig {
        classes: 3,
        stem_widths: (4, 6),
        unet_width: 4,
        ..SegNetConfig::default()
    })?;
    let mut store = ParamStore::new();
    stride2_stack_register(&mut store, "stem", 3, (4, 6), LATENT_CHANNELS, Init::FanIn, ParamGroup::Rest, &mut rng)?;
    perturb_biases(&mut store, &mut rng);
    let rgb = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let by_param = grad_check_params(
        |g, s| {
            let x = g.constant(rgb.clone())?;
            let z = net.stem(g, s, x)?;
            project(g, z, seed)
        },
        &store,
        cfg,
    )?;
    let by_input = grad_check(
        |g, v| {
            let z = net.stem(g, &store, v[0])?;
            project(g, z, seed)
        },
        std::slice::from_ref(&rgb),
        &limited(cfg, 48),
    )?;
    Ok(merge(by_param, by_input))
}

/// 32x32 input, three classes, two pseudo-depth maps through PDAM, the depth
/// encoder, structured fusion, the UNet, the head and the fused loss.
fn pipeline_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 22);
    let net = SegNet::new(SegNetConfig {
        classes: 3,
        stem_widths: (4, 6),
        encoder_widths: (4, 6),
        unet_width: 4,
        fusion: FusionMode::Structured,
        pd_source: PdSource::Pdam,
        maps: 2,
        ..SegNetConfig::default()
    })?;
    let mut store = net.init_params::<f64>(derive_seed(seed, 23))?;
    perturb_biases(&mut store, &mut rng);
    let rgb = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let maps: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng)).collect();
    let labels = random_labels(1, 32, 32, 3, &mut rng)?;
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: Var, m: &[Var]| -> Result<Var> {
        let logits = net.forward(g, s, x, m, 0)?;
        Ok(seg_loss(g, logits, &labels, LossWeights::default())?.total)
    };
    let by_param = grad_check_params(
        |g, s| {
            let x = g.constant(rgb.clone())?;
            let m = maps.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
            loss(g, s, x, &m)
        },
        &store,
        &limited(cfg, 6),
    )?;
    let mut inputs = vec![rgb.clone()];
    inputs.extend(maps.iter().cloned());
    let by_input = grad_check(|g, v| loss(g, &store, v[0], &v[1..]), &inputs, &limited(cfg, 12))?;
    Ok(merge(by_param, by_input))
}

/// Zero biases leave many ReLU pre-activations identical across a channel;
/// random biases give a generic operating point.
fn perturb_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            p.tensor.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
}

fn limited(cfg: &GradCheckConfig, coords: usize) -> GradCheckConfig {
    GradCheckConfig {
        max_coords: Some(cfg.max_coords.map_or(coords, |m| m.min(coords))),
        ..cfg.clone()
    }
}

fn merge(mut a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    a.inputs.extend(b.inputs);
    a
}
