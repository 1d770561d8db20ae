use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adamw::AdamW;
use super::augment::{augment, AugmentConfig};
use super::config::TrainConfig;
use super::loss::{seg_loss, LossWeights};
use super::model::SegNet;
use super::predict::{evaluate, PredictOptions};
use crate::autodiff::Graph;
use crate::data::{derive_seed, SegSample};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One row of the metric trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Mean over the iterations since the previous row.
    pub ce: f64,
    pub dice: f64,
    /// `None` when there is no validation split.
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun<F> {
    pub params: ParamStore<F>,
    pub trace: Vec<TraceRow>,
    /// Loss of each iteration, before the update.
    pub losses: Vec<f64>,
    pub skipped_steps: u64,
    pub ignored_batches: usize,
    /// Iteration at which training stopped on a non-finite loss; `params`
    /// then hold the last finite state.
    pub diverged: Option<usize>,
}

impl<F> TrainRun<F> {
    pub fn check(&self) -> Result<()> {
        match self.diverged {
            Some(iteration) => Err(Error::Diverged { iteration }),
            None => Ok(()),
        }
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,ce,dice,val_miou\n");
    for r in rows {
        let miou = r.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{:.6},{miou}", r.iteration, r.ce, r.dice);
    }
    out
}

/// Writes the parameters with the config echo as header.
pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, params: &ParamStore<F>, cfg: &TrainConfig) -> Result<()> {
    params.save(path, &cfg.to_echo())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<(ParamStore<F>, TrainConfig)> {
    let (store, header) = ParamStore::load(path)?;
    Ok((store, TrainConfig::from_echo(&header)?))
}

struct Batch<F> {
    rgb: Tensor<F>,
    maps: Vec<Tensor<F>>,
    labels: Vec<crate::labels::LabelMap>,
}

fn make_batch<F: Scalar, R: Rng + ?Sized>(
    net: &SegNet,
    samples: &[&SegSample<F>],
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Batch<F>> {
    let mut rgbs = Vec::with_capacity(samples.len());
    let mut maps: Vec<Vec<Tensor<F>>> = Vec::new();
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let [_, _, h, w] = s.rgb.dims4();
        let selected = net.config().pd_source.select(&s.pd_set)?;
        let a = augment(&s.rgb, &selected, &s.labels, (h, w), aug, rng)?;
        rgbs.push(a.rgb);
        maps.resize_with(a.maps.len(), Vec::new);
        for (slot, m) in maps.iter_mut().zip(a.maps) {
            slot.push(m);
        }
        labels.push(a.labels);
    }
    let cat = |ts: &[Tensor<F>]| Tensor::concat(&ts.iter().collect::<Vec<_>>(), 0);
    Ok(Batch {
        rgb: cat(&rgbs)?,
        maps: maps.iter().map(|m| cat(m)).collect::<Result<Vec<_>>>()?,
        labels,
    })
}

/// Trains from a fresh initialisation drawn from `cfg.seed`.
pub fn train<F: Scalar>(
    train_set: &[SegSample<F>],
    val_set: &[SegSample<F>],
    cfg: &TrainConfig,
) -> Result<TrainRun<F>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let net = SegNet::new(cfg.model.clone())?;
    let mut params = net.init_params::<F>(derive_seed(cfg.seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut opt = AdamW::<F>::new(cfg.weight_decay);
    let aug = AugmentConfig::default();

    let mut order: Vec<usize> = Vec::new();
    let mut run = TrainRun {
        params: ParamStore::new(),
        trace: Vec::new(),
        losses: Vec::with_capacity(cfg.iterations),
        skipped_steps: 0,
        ignored_batches: 0,
        diverged: None,
    };
    let (mut ce_sum, mut dice_sum, mut since) = (0.0, 0.0, 0usize);

    for it in 1..=cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(&train_set[order.pop().expect("refilled above")]);
        }
        let batch = make_batch(&net, &picked, &aug, &mut rng)?;
        let noise_seed = rng.random::<u64>();

        let mut g = Graph::new();
        let step = (|| {
            let x = g.constant(batch.rgb)?;
            let maps = batch
                .maps
                .into_iter()
                .map(|m| g.constant(m))
                .collect::<Result<Vec<_>>>()?;
            let logits = net.forward(&mut g, &params, x, &maps, noise_seed)?;
            seg_loss(&mut g, logits, &batch.labels, LossWeights::default())
        })();
        let loss = match step {
            Err(Error::NonFinite { .. }) => {
                run.diverged = Some(it);
                break;
            }
            other => other?,
        };
        let value = g.value(loss.total).item().to_f64_lossy();
        if !value.is_finite() {
            run.diverged = Some(it);
            break;
        }
        run.losses.push(value);
        if loss.all_ignored {
            run.ignored_batches += 1;
        } else {
            params.zero_grad();
            g.backward_into(loss.total, &mut params)?;
            let (lb, lr) = cfg.rates_at(it - 1);
            opt.step(&mut params, lb, lr);
        }
        ce_sum += loss.ce;
        dice_sum += loss.dice;
        since += 1;

        if it % cfg.eval_interval == 0 || it == cfg.iterations {
            let val_miou = if val_set.is_empty() {
                None
            } else {
                Some(evaluate(&net, &params, val_set, &PredictOptions::single_scale())?.scores()?.miou)
            };
            run.trace.push(TraceRow {
                iteration: it,
                ce: ce_sum / since as f64,
                dice: dice_sum / since as f64,
                val_miou,
            });
            (ce_sum, dice_sum, since) = (0.0, 0.0, 0);
        }
    }
    params.zero_grad();
    run.skipped_steps = opt.skipped();
    run.params = params;
    Ok(run)
}
