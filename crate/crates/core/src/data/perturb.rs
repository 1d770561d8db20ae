//! Simulated pseudo-depth estimators: each profile corrupts ground-truth depth
//! with its own mix of value error, smoothing, noise and quantisation, then
//! min-max normalises to `[0, 1]` and replicates to three channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbProfile {
    pub name: String,
    pub blur_radius: usize,
    /// Affine value error `scale * d + shift`.
    pub scale: f64,
    pub shift: f64,
    pub noise_sigma: f64,
    /// Quantisation levels; 0 disables.
    pub quant_levels: usize,
    /// Grey-scale erosion radius (near surfaces bleed outward).
    pub erosion: usize,
    /// Amplitude of a smooth random bias field.
    pub drift: f64,
    /// Fraction of pixels knocked out to 0 after normalisation.
    pub holes: f64,
    /// Probability that a surface is placed at the wrong depth.
    pub surface_error: f64,
    /// Magnitude of that misplacement, with random sign.
    pub surface_shift: f64,
}

impl PerturbProfile {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            blur_radius: 0,
            scale: 1.0,
            shift: 0.0,
            noise_sigma: 0.0,
            quant_levels: 0,
            erosion: 0,
            drift: 0.0,
            holes: 0.0,
            surface_error: 0.0,
            surface_shift: 0.0,
        }
    }

    /// Light blur and low noise.
    pub fn sharp() -> Self {
        Self {
            blur_radius: 1,
            scale: 1.3,
            shift: 0.1,
            noise_sigma: 0.05,
            drift: 0.03,
            surface_error: 0.3,
            surface_shift: 0.3,
            ..Self::identity("sharp")
        }
    }

    /// Heavy blur, no noise.
    pub fn smooth() -> Self {
        Self {
            blur_radius: 4,
            scale: 0.8,
            shift: -0.05,
            drift: 0.03,
            surface_error: 0.3,
            surface_shift: 0.3,
            ..Self::identity("smooth")
        }
    }

    /// Moderate blur with coarse quantisation.
    pub fn quantized() -> Self {
        Self {
            blur_radius: 2,
            scale: 1.1,
            quant_levels: 16,
            erosion: 1,
            drift: 0.03,
            surface_error: 0.3,
            surface_shift: 0.3,
            ..Self::identity("quantized")
        }
    }

    /// Sensor-like depth: sharp but speckled, with missing pixels.
    pub fn sensor() -> Self {
        Self {
            noise_sigma: 0.06,
            holes: 0.08,
            ..Self::identity("sensor")
        }
    }

    /// The three estimator-like profiles, in a fixed order.
    pub fn pseudo_trio() -> Vec<Self> {
        vec![Self::sharp(), Self::smooth(), Self::quantized()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sharp" => Ok(Self::sharp()),
            "smooth" => Ok(Self::smooth()),
            "quantized" => Ok(Self::quantized()),
            "sensor" => Ok(Self::sensor()),
            "identity" => Ok(Self::identity("identity")),
            _ => Err(Error::config(format!("unknown perturbation profile {name}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.is_nan() || self.scale <= 0.0 {
            return Err(Error::config(format!(
                "profile {}: affine scale must be positive",
                self.name
            )));
        }
        if self.noise_sigma < 0.0 || self.drift < 0.0 || !(0.0..1.0).contains(&self.holes) {
            return Err(Error::config(format!(
                "profile {}: noise, drift and hole fraction out of range",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.surface_error) || self.surface_shift < 0.0 {
            return Err(Error::config(format!(
                "profile {}: surface error probability or shift out of range",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbOutput<F> {
    /// `1 x 3 x H x W` map in `[0, 1]`.
    pub map: Tensor<F>,
    /// Set when the corrupted map was constant and normalisation fell back to 0.5.
    pub degenerate: bool,
}

fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    let norm = (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| src[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

fn erode(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    m = m.min(src[yy * w + xx]);
                }
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// Depth step below which neighbouring pixels belong to the same surface.
const SURFACE_STEP: f64 = 0.02;

/// Labels 4-connected regions whose neighbouring depths differ by at most
/// `step`; returns per-pixel region ids and the region count.
pub fn segment_surfaces(depth: &[f64], h: usize, w: usize, step: f64) -> (Vec<usize>, usize) {
    const UNSET: usize = usize::MAX;
    let mut id = vec![UNSET; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if id[start] != UNSET {
            continue;
        }
        id[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if id[j] == UNSET && (depth[j] - depth[i]).abs() <= step {
                    id[j] = count;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        count += 1;
    }
    (id, count)
}

/// Smooth field from a 4x4 grid of uniform values, bilinearly interpolated.
fn drift_field<R: Rng + ?Sized>(h: usize, w: usize, amp: f64, rng: &mut R) -> Vec<f64> {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.random_range(-amp..=amp)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1).max(1) as f64 * (G - 1) as f64;
        let y0 = (fy.floor() as usize).min(G - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1).max(1) as f64 * (G - 1) as f64;
            let x0 = (fx.floor() as usize).min(G - 2);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy * G + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Min-max normalisation; a constant map becomes all 0.5 and reports `true`.
pub fn min_max_normalize(values: &mut [f64]) -> bool {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 || range < 1e-12 * hi.abs().max(1.0) {
        values.iter_mut().for_each(|v| *v = 0.5);
        return true;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
    false
}

/// Corrupts a `1 x 1 x H x W` depth plane according to `profile`.
pub fn perturb_depth<F: Scalar>(
    gt_depth: &Tensor<F>,
    profile: &PerturbProfile,
    seed: u64,
) -> Result<PerturbOutput<F>> {
    profile.validate()?;
    let d = gt_depth.dims4();
    if d[0] != 1 || d[1] != 1 {
        return Err(Error::dim(format!(
            "expected a single depth plane, got {:?}",
            gt_depth.shape()
        )));
    }
    let (h, w) = (d[2], d[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = gt_depth.data().iter().map(|x| x.to_f64_lossy()).collect();
    if profile.surface_error > 0.0 {
        let (id, count) = segment_surfaces(&v, h, w, SURFACE_STEP);
        let offsets: Vec<f64> = (0..count)
            .map(|_| {
                let hit = rng.random::<f64>() < profile.surface_error;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                if hit {
                    sign * profile.surface_shift
                } else {
                    0.0
                }
            })
            .collect();
        v.iter_mut().zip(&id).for_each(|(d, &r)| *d += offsets[r]);
    }
    v.iter_mut().for_each(|d| *d = profile.scale * *d + profile.shift);
    v = box_blur(&v, h, w, profile.blur_radius);
    v = erode(&v, h, w, profile.erosion);
    if profile.drift > 0.0 {
        let field = drift_field(h, w, profile.drift * profile.scale, &mut rng);
        v.iter_mut().zip(field).for_each(|(a, b)| *a += b);
    }
    if profile.noise_sigma > 0.0 {
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += profile.noise_sigma * profile.scale * z;
        }
    }
    if profile.quant_levels > 1 {
        let (lo, hi) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if hi > lo {
            let steps = (profile.quant_levels - 1) as f64;
            v.iter_mut()
                .for_each(|x| *x = lo + ((*x - lo) / (hi - lo) * steps).round() / steps * (hi - lo));
        }
    }
    let degenerate = min_max_normalize(&mut v);
    if profile.holes > 0.0 {
        for x in v.iter_mut() {
            if rng.random::<f64>() < profile.holes {
                *x = 0.0;
            }
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(v.iter().map(|&x| F::from_f64_lossy(x)));
    }
    Ok(PerturbOutput {
        map: Tensor::new(&[1, 3, h, w], data)?,
        degenerate,
    })
}
