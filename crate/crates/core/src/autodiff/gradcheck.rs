//! Central-difference verification of reverse-mode gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates per input (sampled), all when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Analytic and central-difference values at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose difference stencil straddles a non-differentiable
    /// point; excluded from `max_rel_error`.
    pub kinks: usize,
}

impl InputReport {
    fn new(name: String) -> Self {
        Self {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
            kinks: 0,
        }
    }

    /// Compares `ad` with central differences of `at(delta)`, the function
    /// evaluated with coordinate `i` shifted by `delta`.
    ///
    /// A kink is flagged when the estimates at `step` and `step / 2`
    /// disagree beyond the tolerance.
    fn probe(
        &mut self,
        i: usize,
        ad: f64,
        cfg: &GradCheckConfig,
        mut at: impl FnMut(f64) -> Result<f64>,
    ) -> Result<()> {
        let h = cfg.step;
        let (plus, minus) = (at(h)?, at(-h)?);
        let (plus2, minus2) = (at(h / 2.0)?, at(-h / 2.0)?);
        let fd = (plus - minus) / (2.0 * h);
        let fd2 = (plus2 - minus2) / h;
        self.checked += 1;
        let floor2 = resolution_floor(plus2, minus2, h / 2.0, cfg.tolerance);
        if relative_error(fd, fd2, floor2) > cfg.tolerance {
            self.kinks += 1;
            return Ok(());
        }
        let err = relative_error(ad, fd, resolution_floor(plus, minus, h, cfg.tolerance));
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_index = i;
            self.worst_analytic = ad;
            self.worst_numeric = fd;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|r| r.kinks).sum()
    }

    /// Within tolerance, with at most [`MAX_KINK_FRACTION`] of the
    /// coordinates excluded as non-differentiable.
    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
            && self.kinks() as f64 <= MAX_KINK_FRACTION * self.checked() as f64
    }
}

pub const MAX_KINK_FRACTION: f64 = 0.02;

/// Rounding noise of a central difference, in ulps of the function value.
pub const NOISE_ULPS: f64 = 32.0;

/// Denominator floor of the relative error.
pub const MIN_FLOOR: f64 = 1e-8;

/// `|ad - fd| / max(|ad|, |fd|, floor)`.
pub fn relative_error(ad: f64, fd: f64, floor: f64) -> f64 {
    let diff = (ad - fd).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / ad.abs().max(fd.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference with half step `step`
/// resolves to `tolerance`, given the two function values.
///
/// Below it the comparison is effectively absolute at the rounding bound
/// `NOISE_ULPS * ulp(f) / (2 step)`. Never below [`MIN_FLOOR`].
pub fn resolution_floor(plus: f64, minus: f64, step: f64, tolerance: f64) -> f64 {
    let ulp = plus.abs().max(minus.abs()) * f64::EPSILON;
    (NOISE_ULPS * ulp / (2.0 * step) / tolerance).max(MIN_FLOOR)
}

fn coords(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks `f` against central differences with respect to each tensor in `inputs`.
///
/// `f` receives the inputs bound as gradient-tracking leaves and must return a
/// scalar node.
pub fn grad_check<Fn_>(f: Fn_, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    Fn_: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.variable(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let base = scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        return Err(Error::Oracle(
            "function is not deterministic: re-evaluation differs".into(),
        ));
    }

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let ad = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut report = InputReport::new(format!("input{k}"));
        for i in coords(inputs[k].numel(), cfg, k as u64) {
            let orig = work[k].data()[i];
            report.probe(i, ad[i], cfg, |delta| {
                work[k].data_mut()[i] = orig + delta;
                let v = eval(&work);
                work[k].data_mut()[i] = orig;
                v
            })?;
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: cfg.tolerance,
    })
}

/// Like [`grad_check`], but perturbs every entry of a parameter store that `f`
/// binds through [`Graph::param`].
pub fn grad_check_params<Fn_>(
    f: Fn_,
    store: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    Fn_: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    let base = scalar_of(&g, out)?;
    g.backward_into(out, &mut work)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Oracle(
            "function is not deterministic: re-evaluation differs".into(),
        ));
    }
    let mut reports = Vec::with_capacity(store.len());
    for p in 0..work.len() {
        let ad = work.entry(p).tensor.grad().unwrap_or(&[]).to_vec();
        let mut report = InputReport::new(work.entry(p).name.clone());
        for i in coords(ad.len(), cfg, p as u64) {
            let orig = work.entry(p).tensor.data()[i];
            report.probe(i, ad[i], cfg, |delta| {
                work.entry_mut(p).tensor.data_mut()[i] = orig + delta;
                let v = eval(&work);
                work.entry_mut(p).tensor.data_mut()[i] = orig;
                v
            })?;
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: cfg.tolerance,
    })
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::dim(format!(
            "grad_check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
