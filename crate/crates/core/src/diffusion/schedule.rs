use std::fmt::Write;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    /// Betas evenly spaced in square-root space, then squared.
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" | "scaled-linear" => Ok(Self::ScaledLinear),
            _ => Err(Error::config(format!("unknown schedule kind {s}"))),
        }
    }
}

/// DDPM variance schedule. Timesteps are 0-based: `alpha_bars[0] = alphas[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 0.00085;
    pub const DEFAULT_BETA_END: f64 = 0.012;

    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let frac = |t: usize| {
            if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..steps)
            .map(|t| match kind {
                ScheduleKind::Linear => beta_start + frac(t) * (beta_end - beta_start),
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let r = a + frac(t) * (b - a);
                    r * r
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Latent-diffusion default: scaled-linear, 1000 steps, betas 0.00085 to 0.012.
    pub fn latent_default() -> Self {
        Self::build(
            Self::DEFAULT_STEPS,
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
            ScheduleKind::ScaledLinear,
        )
        .expect("default schedule parameters are valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn weights(&self, t: usize) -> Result<(f64, f64)> {
        let ab = *self.alpha_bars.get(t).ok_or_else(|| {
            Error::config(format!("timestep {t} outside 0..{}", self.steps()))
        })?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Plain-text audit table: `t beta alpha_bar sqrt(alpha_bar) sqrt(1-alpha_bar)`.
    pub fn table(&self) -> String {
        let mut out = String::from("t\tbeta\talpha_bar\tsqrt_alpha_bar\tsqrt_one_minus_alpha_bar\n");
        for (t, (&b, &ab)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            let _ = writeln!(
                out,
                "{t}\t{b:.9e}\t{ab:.12}\t{:.12}\t{:.12}",
                ab.sqrt(),
                (1.0 - ab).sqrt()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        let s = NoiseSchedule::latent_default();
        assert!((s.alpha_bars()[0] - 0.99915).abs() < 1e-15);
        let (ws, wn) = s.weights(0).unwrap();
        assert!((ws - 0.999575).abs() < 1e-6);
        assert!((wn - 0.029155).abs() < 1e-6);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = NoiseSchedule::build(1, 0.02, 0.5, kind).unwrap();
            assert!((s.alpha_bars()[0] - 0.98).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::build(10, 0.1, 0.05, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 0.05, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::latent_default().weights(1000).is_err());
    }

    #[test]
    fn table_has_one_row_per_step() {
        let s = NoiseSchedule::build(5, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.table().lines().count(), 6);
    }
}
