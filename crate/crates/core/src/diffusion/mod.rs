//! Noise schedule, pseudo-depth encoder and latent fusion rules.

pub(crate) mod encoder;
mod fusion;
mod schedule;

pub use encoder::{encoder_param_count, PdEncoder, LATENT_CHANNELS};
pub(crate) use encoder::{stride2_stack_forward, stride2_stack_register};
pub use fusion::{fuse_gaussian, fuse_manual, fuse_structured, MANUAL_WEIGHT_GRID, TIMESTEP_GRID};
pub use schedule::{NoiseSchedule, ScheduleKind};
