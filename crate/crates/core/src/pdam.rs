//! Pseudo-depth aggregation: fuses `L` three-channel pseudo-depth maps into a
//! single map using a channel attention stage and a spatial attention stage.
//!
//! For each map `PD_i` the module produces a per-channel weight `W_C_i`
//! (`1x3x1x1`) and a per-pixel weight `W_S_i` (`1x1xHxW`), both in `(0, 1)`, and
//! returns `sum_i (PD_i + lambda_c * W_C_i * PD_i + lambda_s * W_S_i * PD_i)`.

use rand::Rng;

use crate::autodiff::{Graph, PoolMode, Var};
use crate::error::{Error, Result};
use crate::init::{self, Init};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `L` pseudo-depth maps of one image, each `1 x 3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDepthSet<F> {
    maps: Vec<Tensor<F>>,
    source_tags: Vec<String>,
}

impl<F: Scalar> PseudoDepthSet<F> {
    pub fn new(maps: Vec<Tensor<F>>, source_tags: Vec<String>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::config("pseudo-depth set needs at least one map"))?;
        if source_tags.len() != maps.len() {
            return Err(Error::config("one source tag per map required"));
        }
        let s = first.shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::dim(format!(
                "pseudo-depth maps must be 1x3xHxW, got {s:?}"
            )));
        }
        if let Some(bad) = maps.iter().find(|m| m.shape() != s.as_slice()) {
            return Err(Error::dim(format!(
                "pseudo-depth maps differ in shape: {s:?} vs {:?}",
                bad.shape()
            )));
        }
        Ok(Self { maps, source_tags })
    }

    /// Wraps single-plane maps (`1x1xHxW` or `HxW`-shaped data) by replicating them to three channels.
    pub fn from_planes(planes: &[Tensor<F>], source_tags: Vec<String>) -> Result<Self> {
        let maps = planes
            .iter()
            .map(replicate3)
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, source_tags)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Tensor<F>] {
        &self.maps
    }

    pub fn source_tags(&self) -> &[String] {
        &self.source_tags
    }

    pub fn height_width(&self) -> (usize, usize) {
        let s = self.maps[0].shape();
        (s[2], s[3])
    }

    /// True when every map lies in `[0, 1]` with three identical channels.
    pub fn is_normalized(&self) -> bool {
        self.maps.iter().all(|m| {
            let plane = m.numel() / 3;
            let d = m.data();
            d.iter().all(|&v| v >= F::zero() && v <= F::one())
                && (0..plane).all(|i| d[i] == d[plane + i] && d[i] == d[2 * plane + i])
        })
    }

    /// Keeps only the maps at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut maps = Vec::with_capacity(indices.len());
        let mut tags = Vec::with_capacity(indices.len());
        for &i in indices {
            let m = self
                .maps
                .get(i)
                .ok_or_else(|| Error::config(format!("map index {i} out of range")))?;
            maps.push(m.clone());
            tags.push(self.source_tags[i].clone());
        }
        Self::new(maps, tags)
    }
}

/// Replicates a single depth plane into a `1 x 3 x H x W` map.
pub fn replicate3<F: Scalar>(plane: &Tensor<F>) -> Result<Tensor<F>> {
    let d = plane.dims4();
    if d[0] != 1 || d[1] != 1 {
        return Err(Error::dim(format!(
            "expected one depth plane, got {:?}",
            plane.shape()
        )));
    }
    let (h, w) = (d[2], d[3]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(plane.data());
    }
    Tensor::new(&[1, 3, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdamConfig {
    /// Number of pseudo-depth maps `L`.
    pub maps: usize,
    /// Hidden width of the channel MLP.
    pub hidden: usize,
    /// Width between the two 1x1 spatial convolutions.
    pub mid: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl PdamConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.5;

    pub fn new(maps: usize) -> Self {
        Self {
            maps,
            hidden: 6 * maps,
            mid: 3 * maps,
            lambda_c: Self::DEFAULT_LAMBDA,
            lambda_s: Self::DEFAULT_LAMBDA,
        }
    }

    pub fn with_lambdas(mut self, lambda_c: f64, lambda_s: f64) -> Self {
        self.lambda_c = lambda_c;
        self.lambda_s = lambda_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps == 0 || self.hidden == 0 || self.mid == 0 {
            return Err(Error::config("PDAM widths and map count must be positive"));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_s >= 0.0) {
            return Err(Error::config("lambda_c and lambda_s must be non-negative"));
        }
        Ok(())
    }
}

/// Closed-form learnable scalar count of the aggregation module.
pub fn pdam_param_count(maps: usize, hidden: usize, mid: usize) -> usize {
    let depthwise = maps * 3 * 25;
    let mlp = (6 * maps * hidden + hidden) + (hidden * 3 * maps + 3 * maps);
    let spatial = (3 * maps * mid + mid) + (mid * maps + maps);
    depthwise + mlp + spatial
}

/// The aggregation module bound to a parameter prefix.
#[derive(Clone, Debug)]
pub struct Pdam {
    pub config: PdamConfig,
    prefix: String,
}

impl Pdam {
    pub fn new(config: PdamConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_count(&self) -> usize {
        pdam_param_count(self.config.maps, self.config.hidden, self.config.mid)
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn register<F: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<F>,
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        let c = &self.config;
        let group = ParamGroup::Rest;
        for i in 0..c.maps {
            init::weight(
                store,
                &self.name(&format!("dw.{i}.weight")),
                &[3, 1, 5, 5],
                25,
                init,
                group,
                rng,
            )?;
        }
        let (din, dout) = (6 * c.maps, 3 * c.maps);
        init::weight(store, &self.name("mlp.0.weight"), &[c.hidden, din], din, init, group, rng)?;
        init::bias(store, &self.name("mlp.0.bias"), c.hidden, group)?;
        init::weight(store, &self.name("mlp.1.weight"), &[dout, c.hidden], c.hidden, init, group, rng)?;
        init::bias(store, &self.name("mlp.1.bias"), dout, group)?;
        init::conv(store, &self.name("spatial.0"), 3 * c.maps, c.mid, 1, init, group, rng)?;
        init::conv(store, &self.name("spatial.1"), c.mid, c.maps, 1, init, group, rng)?;
        Ok(())
    }

    fn check_maps<F: Scalar>(&self, g: &Graph<F>, maps: &[Var]) -> Result<()> {
        if maps.len() != self.config.maps {
            return Err(Error::config(format!(
                "PDAM configured for {} maps, got {}",
                self.config.maps,
                maps.len()
            )));
        }
        let s = g.shape(maps[0]).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("pseudo-depth maps must be Nx3xHxW, got {s:?}")));
        }
        if let Some(&bad) = maps.iter().find(|&&m| g.shape(m) != s.as_slice()) {
            return Err(Error::dim(format!(
                "pseudo-depth maps differ in shape: {s:?} vs {:?}",
                g.shape(bad)
            )));
        }
        Ok(())
    }

    /// Per-map channel weights, each `N x 3 x 1 x 1`.
    pub fn channel_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Vec<Var>> {
        self.check_maps(g, maps)?;
        self.channel_weights(g, store, maps)
            .map_err(|e| name_stage(e, "channel attention"))
    }

    fn channel_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Vec<Var>> {
        let n = g.shape(maps[0])[0];
        let l = self.config.maps;
        let mut pooled = Vec::with_capacity(2 * l);
        for (i, &m) in maps.iter().enumerate() {
            let w = g.param(store, &self.name(&format!("dw.{i}.weight")))?;
            let compressed = g.conv2d(m, w, None, 1, 2, 3)?;
            for mode in [PoolMode::Max, PoolMode::Avg] {
                let p = g.global_pool(compressed, mode)?;
                pooled.push(g.reshape(p, &[n, 3])?);
            }
        }
        let y = g.concat(&pooled, 1)?;
        let (w0, b0) = (g.param(store, &self.name("mlp.0.weight"))?, g.param(store, &self.name("mlp.0.bias"))?);
        let (w1, b1) = (g.param(store, &self.name("mlp.1.weight"))?, g.param(store, &self.name("mlp.1.bias"))?);
        let h = g.linear(y, w0, b0)?;
        let h = g.relu(h)?;
        let z = g.linear(h, w1, b1)?;
        let z = g.sigmoid(z)?;
        g.split(z, &vec![3; l], 1)?
            .into_iter()
            .map(|v| g.reshape(v, &[n, 3, 1, 1]))
            .collect()
    }

    /// Per-map spatial weights, each `N x 1 x H x W`.
    pub fn spatial_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Vec<Var>> {
        self.check_maps(g, maps)?;
        self.spatial_weights(g, store, maps)
            .map_err(|e| name_stage(e, "spatial attention"))
    }

    fn spatial_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Vec<Var>> {
        let stacked = g.concat(maps, 1)?;
        let (w0, b0) = (g.param(store, &self.name("spatial.0.weight"))?, g.param(store, &self.name("spatial.0.bias"))?);
        let (w1, b1) = (g.param(store, &self.name("spatial.1.weight"))?, g.param(store, &self.name("spatial.1.bias"))?);
        let h = g.conv2d(stacked, w0, Some(b0), 1, 0, 1)?;
        let h = g.relu(h)?;
        let s = g.conv2d(h, w1, Some(b1), 1, 0, 1)?;
        let s = g.sigmoid(s)?;
        g.split(s, &vec![1; self.config.maps], 1)
    }

    /// Aggregated map with the same shape as each input map.
    pub fn aggregate<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Var> {
        let wc = self.channel_attention(g, store, maps)?;
        let ws = self.spatial_attention(g, store, maps)?;
        self.combine(g, maps, &wc, &ws)
            .map_err(|e| name_stage(e, "aggregation"))
    }

    fn combine<F: Scalar>(&self, g: &mut Graph<F>, maps: &[Var], wc: &[Var], ws: &[Var]) -> Result<Var> {
        let lc = F::from_f64_lossy(self.config.lambda_c);
        let ls = F::from_f64_lossy(self.config.lambda_s);
        let mut total: Option<Var> = None;
        for ((&pd, &c), &s) in maps.iter().zip(wc).zip(ws) {
            let fc = g.mul(pd, c)?;
            let fs = g.mul(pd, s)?;
            let fc = g.scale(fc, lc)?;
            let fs = g.scale(fs, ls)?;
            let term = g.add(pd, fc)?;
            let term = g.add(term, fs)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        Ok(total.expect("at least one map"))
    }

    /// Convenience wrapper: aggregates a [`PseudoDepthSet`] without tracking gradients.
    pub fn aggregate_set<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        set: &PseudoDepthSet<F>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let maps = set
            .maps()
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = self.aggregate(&mut g, store, &maps)?;
        Ok(g.value(out).detached())
    }
}

fn name_stage(e: Error, stage: &str) -> Error {
    match e {
        Error::NonFinite { stage: op } => Error::NonFinite {
            stage: format!("{stage} ({op})"),
        },
        other => other,
    }
}

/// Element-wise sum of the maps, the "addition" baseline.
pub fn add_maps<F: Scalar>(g: &mut Graph<F>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::config("addition needs at least one map"))?;
    rest.iter().try_fold(first, |acc, &m| g.add(acc, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(l: usize, h: usize, w: usize, seed: u64) -> PseudoDepthSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes: Vec<_> = (0..l)
            .map(|_| Tensor::<f64>::rand_uniform(&[1, 1, h, w], 0.0, 1.0, &mut rng))
            .collect();
        PseudoDepthSet::from_planes(&planes, (0..l).map(|i| format!("p{i}")).collect()).unwrap()
    }

    fn zero_store(cfg: &PdamConfig) -> (Pdam, ParamStore<f64>) {
        let pdam = Pdam::new(cfg.clone(), "pdam").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pdam.register(&mut store, Init::Zeros, &mut rng).unwrap();
        (pdam, store)
    }

    #[test]
    fn param_count_matches_hand_count_for_one_map() {
        assert_eq!(pdam_param_count(1, 6, 3), 75 + 42 + 21 + 12 + 4);
        let (pdam, store) = zero_store(&PdamConfig::new(1));
        assert_eq!(store.num_scalars(None), pdam.param_count());
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = PdamConfig::new(2);
        let (pdam, store) = zero_store(&cfg);
        let set = random_set(2, 6, 5, 1);
        let mut g = Graph::new();
        let maps: Vec<_> = set.maps().iter().map(|m| g.constant(m.clone()).unwrap()).collect();
        for v in pdam.channel_attention(&mut g, &store, &maps).unwrap() {
            assert_eq!(g.shape(v), &[1, 3, 1, 1]);
            assert!(g.value(v).data().iter().all(|&x| x == 0.5));
        }
        for v in pdam.spatial_attention(&mut g, &store, &maps).unwrap() {
            assert_eq!(g.shape(v), &[1, 1, 6, 5]);
            assert!(g.value(v).data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn wrong_map_count_is_config_error() {
        let (pdam, store) = zero_store(&PdamConfig::new(3));
        let set = random_set(2, 4, 4, 2);
        assert!(matches!(
            pdam.aggregate_set(&store, &set),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_input_names_stage() {
        let (pdam, store) = zero_store(&PdamConfig::new(1));
        let mut g = Graph::new();
        let mut t = Tensor::<f64>::ones(&[1, 3, 4, 4]);
        t.data_mut()[0] = f64::MAX;
        let m = g.constant(t).unwrap();
        match pdam.aggregate(&mut g, &store, &[m]) {
            Err(Error::NonFinite { stage }) => assert!(stage.contains("aggregation"), "{stage}"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }
}
