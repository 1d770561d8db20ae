use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

pub const LATENT_CHANNELS: usize = 4;

/// Three 3x3 stride-2 convolutions taking a `3 x H x W` map to a
/// `4 x H/8 x W/8` latent, with ReLU after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct PdEncoder {
    pub widths: (usize, usize),
    prefix: String,
}

impl PdEncoder {
    /// Desk-scale widths.
    pub const DESK: (usize, usize) = (16, 32);
    /// Widths of a full-size latent branch, used for parameter accounting.
    pub const REPORTED: (usize, usize) = (128, 256);

    pub fn new(widths: (usize, usize), prefix: &str) -> Self {
        Self {
            widths,
            prefix: prefix.to_string(),
        }
    }

    pub fn param_count(&self) -> usize {
        encoder_param_count(3, self.widths, LATENT_CHANNELS)
    }

    pub fn register<F: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<F>,
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        stride2_stack_register(store, &self.prefix, 3, self.widths, LATENT_CHANNELS, init, ParamGroup::Backbone, rng)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, pd: Var) -> Result<Var> {
        stride2_stack_forward(g, store, &self.prefix, pd)
    }
}

/// Closed-form parameter count of a three-layer 3x3 conv stack.
pub fn encoder_param_count(cin: usize, (c1, c2): (usize, usize), cout: usize) -> usize {
    (cin * c1 * 9 + c1) + (c1 * c2 * 9 + c2) + (c2 * cout * 9 + cout)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn stride2_stack_register<F: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cin: usize,
    (c1, c2): (usize, usize),
    cout: usize,
    init: Init,
    group: ParamGroup,
    rng: &mut R,
) -> Result<()> {
    init::conv(store, &format!("{prefix}.conv0"), cin, c1, 3, init, group, rng)?;
    init::conv(store, &format!("{prefix}.conv1"), c1, c2, 3, init, group, rng)?;
    init::conv(store, &format!("{prefix}.conv2"), c2, cout, 3, init, group, rng)
}

pub(crate) fn stride2_stack_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
        return Err(Error::dim(format!(
            "spatial extents must be divisible by 8, got {s:?}"
        )));
    }
    let mut h = x;
    for i in 0..3 {
        let w = g.param(store, &format!("{prefix}.conv{i}.weight"))?;
        let b = g.param(store, &format!("{prefix}.conv{i}.bias"))?;
        h = g.conv2d(h, w, Some(b), 2, 1, 1)?;
        if i < 2 {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}
