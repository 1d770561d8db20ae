//! Early fusion of the RGB latent with a second latent under a diffusion
//! forward-process weighting.

use super::schedule::NoiseSchedule;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn same_shape<F: Scalar>(g: &Graph<F>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "latent shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn weighted_sum<F: Scalar>(g: &mut Graph<F>, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
    same_shape(g, a, b)?;
    let a = g.scale(a, F::from_f64_lossy(wa))?;
    let b = g.scale(b, F::from_f64_lossy(wb))?;
    g.add(a, b)
}

/// `sqrt(abar_t) * z_rgb + sqrt(1 - abar_t) * noise`.
pub fn fuse_gaussian<F: Scalar>(
    g: &mut Graph<F>,
    z_rgb: Var,
    noise: Var,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Var> {
    let (ws, wn) = schedule.weights(t)?;
    weighted_sum(g, z_rgb, ws, noise, wn)
}

/// Same weighting as [`fuse_gaussian`] with the encoded pseudo depth in place
/// of the noise sample; differentiable through both latents.
pub fn fuse_structured<F: Scalar>(
    g: &mut Graph<F>,
    z_rgb: Var,
    pd_latent: Var,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Var> {
    let (ws, wn) = schedule.weights(t)?;
    weighted_sum(g, z_rgb, ws, pd_latent, wn)
}

/// Fixed modality weights `w_rgb * z_rgb + w_pd * pd_latent`.
pub fn fuse_manual<F: Scalar>(
    g: &mut Graph<F>,
    z_rgb: Var,
    pd_latent: Var,
    w_rgb: f64,
    w_pd: f64,
) -> Result<Var> {
    if !(w_rgb >= 0.0 && w_pd >= 0.0) {
        return Err(Error::config(format!(
            "modality weights must be non-negative, got {w_rgb}:{w_pd}"
        )));
    }
    weighted_sum(g, z_rgb, w_rgb, pd_latent, w_pd)
}

/// RGB:PD ratios of the manual-weight sweep.
pub const MANUAL_WEIGHT_GRID: [(f64, f64); 6] = [
    (0.6, 0.4),
    (0.8, 0.2),
    (0.9, 0.1),
    (0.95, 0.05),
    (0.99, 0.01),
    (1.0, 0.0),
];

/// Timesteps of the timestep sweep.
pub const TIMESTEP_GRID: [usize; 4] = [0, 50, 100, 200];
