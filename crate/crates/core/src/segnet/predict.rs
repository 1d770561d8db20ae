use super::model::SegNet;
use crate::autodiff::Graph;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::ConfusionMatrix;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Noise seed used for the Gaussian fusion mode at inference.
pub const INFERENCE_NOISE_SEED: u64 = 0x5EED;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOptions {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl PredictOptions {
    pub fn single_scale() -> Self {
        Self {
            scales: vec![1.0],
            flip: false,
        }
    }

    pub fn multi_scale() -> Self {
        Self {
            scales: vec![0.75, 1.0, 1.25],
            flip: true,
        }
    }
}

/// Extent nearest to `size * scale` that is a positive multiple of 8.
pub fn scaled_extent(size: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::dim(format!("invalid inference scale {scale}")));
    }
    let e = ((size as f64 * scale / 8.0).round() as usize) * 8;
    if e == 0 {
        return Err(Error::dim(format!("scale {scale} shrinks extent {size} below 8")));
    }
    Ok(e)
}

fn softmax_channels<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let [n, k, h, w] = logits.dims4();
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![F::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |c: usize| (b * k + c) * hw + p;
            let m = (0..k).map(|c| x[at(c)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for c in 0..k {
                let e = (x[at(c)] - m).exp();
                out[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                out[at(c)] /= z;
            }
        }
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Logits `1 x K x H x W` for one image without gradient tracking.
pub fn logits<F: Scalar>(
    net: &SegNet,
    store: &ParamStore<F>,
    rgb: &Tensor<F>,
    maps: &[Tensor<F>],
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let x = g.constant(rgb.detached())?;
    let m = maps
        .iter()
        .map(|t| g.constant(t.detached()))
        .collect::<Result<Vec<_>>>()?;
    let out = net.forward(&mut g, store, x, &m, INFERENCE_NOISE_SEED)?;
    Ok(g.value(out).detached())
}

/// Class probabilities averaged over the configured scales and flips.
pub fn predict_probs<F: Scalar>(
    net: &SegNet,
    store: &ParamStore<F>,
    rgb: &Tensor<F>,
    maps: &[Tensor<F>],
    opts: &PredictOptions,
) -> Result<Tensor<F>> {
    let [_, _, h, w] = rgb.dims4();
    if opts.scales.is_empty() {
        return Err(Error::config("at least one inference scale is required"));
    }
    let mut acc: Option<Tensor<F>> = None;
    let mut count = 0usize;
    for &s in &opts.scales {
        let (sh, sw) = (scaled_extent(h, s)?, scaled_extent(w, s)?);
        let rgb_s = rgb.resize_bilinear(sh, sw)?;
        let maps_s = maps
            .iter()
            .map(|m| m.resize_bilinear(sh, sw))
            .collect::<Result<Vec<_>>>()?;
        for flip in [false, true].into_iter().take(if opts.flip { 2 } else { 1 }) {
            let out = if flip {
                let maps_f: Vec<_> = maps_s.iter().map(Tensor::flip_w).collect();
                logits(net, store, &rgb_s.flip_w(), &maps_f)?.flip_w()
            } else {
                logits(net, store, &rgb_s, &maps_s)?
            };
            let p = softmax_channels(&out.resize_bilinear(h, w)?);
            acc = Some(match acc {
                None => p,
                Some(a) => a.add(&p)?,
            });
            count += 1;
        }
    }
    let inv = F::one() / F::from_usize(count).unwrap();
    Ok(acc.expect("at least one pass").scale(inv))
}

/// Per-pixel argmax over classes; ties go to the lowest class id.
pub fn argmax_labels<F: Scalar>(probs: &Tensor<F>) -> Result<LabelMap> {
    let [n, k, h, w] = probs.dims4();
    if n != 1 {
        return Err(Error::dim(format!("expected a single image, got batch {n}")));
    }
    let x = probs.data();
    let hw = h * w;
    let data = (0..hw)
        .map(|p| (1..k).fold(0, |m, c| if x[c * hw + p] > x[m * hw + p] { c } else { m }) as u8)
        .collect();
    LabelMap::new(h, w, data)
}

pub fn predict<F: Scalar>(
    net: &SegNet,
    store: &ParamStore<F>,
    rgb: &Tensor<F>,
    maps: &[Tensor<F>],
    opts: &PredictOptions,
) -> Result<LabelMap> {
    argmax_labels(&predict_probs(net, store, rgb, maps, opts)?)
}

/// Confusion matrix of the predictions over `samples`.
pub fn evaluate<F: Scalar>(
    net: &SegNet,
    store: &ParamStore<F>,
    samples: &[SegSample<F>],
    opts: &PredictOptions,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.config().classes);
    for s in samples {
        let maps = net.config().pd_source.select(&s.pd_set)?;
        let pred = predict(net, store, &s.rgb, &maps, opts)?;
        cm.update(&pred, &s.labels)?;
    }
    Ok(cm)
}
