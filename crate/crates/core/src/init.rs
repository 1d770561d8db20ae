//! Parameter initialisation helpers.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    FanIn,
    Zeros,
}

pub(crate) fn weight<F: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    group: ParamGroup,
    rng: &mut R,
) -> Result<()> {
    let t = match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn => {
            let k = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -k, k, rng)
        }
    };
    store.register(name, t, group)
}

pub(crate) fn bias<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    len: usize,
    group: ParamGroup,
) -> Result<()> {
    store.register(name, Tensor::zeros(&[len]), group)
}

/// Registers a conv weight `[cout, cin, k, k]` and bias `[cout]` under `prefix`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv<F: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
    group: ParamGroup,
    rng: &mut R,
) -> Result<()> {
    weight(
        store,
        &format!("{prefix}.weight"),
        &[cout, cin, k, k],
        cin * k * k,
        init,
        group,
        rng,
    )?;
    bias(store, &format!("{prefix}.bias"), cout, group)
}
