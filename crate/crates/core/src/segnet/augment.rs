use rand::Rng;

use crate::error::Result;
use crate::labels::{LabelMap, IGNORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub flip_prob: f64,
    /// Half-width of the uniform brightness offset added to RGB.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.75, 1.25),
            flip_prob: 0.5,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented<F> {
    pub rgb: Tensor<F>,
    pub maps: Vec<Tensor<F>>,
    pub labels: LabelMap,
}

/// Copies `src` into an `oh x ow` window shifted by `(dy, dx)`, filling
/// positions outside the source with `fill`.
fn shift_planes<T: Copy>(
    src: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (dy, dx): (isize, isize),
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            let sy = y as isize + dy;
            for x in 0..ow {
                let sx = x as isize + dx;
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                out.push(if inside {
                    src[(p * h + sy as usize) * w + sx as usize]
                } else {
                    fill
                });
            }
        }
    }
    out
}

fn offset<R: Rng + ?Sized>(size: usize, target: usize, rng: &mut R) -> isize {
    if size >= target {
        rng.random_range(0..=size - target) as isize
    } else {
        -(rng.random_range(0..=target - size) as isize)
    }
}

/// Random rescale, crop or pad to `out`, horizontal flip and RGB brightness jitter.
/// Padding is zero for images and the ignore label for targets.
pub fn augment<F: Scalar, R: Rng + ?Sized>(
    rgb: &Tensor<F>,
    maps: &[Tensor<F>],
    labels: &LabelMap,
    (oh, ow): (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Augmented<F>> {
    let [_, _, h, w] = rgb.dims4();
    let s = if cfg.scale.0 < cfg.scale.1 {
        rng.random_range(cfg.scale.0..=cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let nh = ((h as f64 * s).round() as usize).max(1);
    let nw = ((w as f64 * s).round() as usize).max(1);
    let shift = (offset(nh, oh, rng), offset(nw, ow, rng));
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let bright = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };

    let image = |t: &Tensor<F>| -> Result<Tensor<F>> {
        let r = t.resize_bilinear(nh, nw)?;
        let [n, c, _, _] = r.dims4();
        let data = shift_planes(r.data(), n * c, (nh, nw), (oh, ow), shift, F::zero());
        let out = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(if flip { out.flip_w() } else { out })
    };
    let b = F::from_f64_lossy(bright);
    let rgb = image(rgb)?.map(|v| (v + b).max(F::zero()).min(F::one()));
    let maps = maps.iter().map(image).collect::<Result<Vec<_>>>()?;
    let l = labels.resize_nearest(nh, nw)?;
    let l = LabelMap::new(oh, ow, shift_planes(l.data(), 1, (nh, nw), (oh, ow), shift, IGNORE))?;
    let labels = if flip { l.flip_w() } else { l };
    Ok(Augmented { rgb, maps, labels })
}
