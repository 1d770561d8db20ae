use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, PdSource, SegNetConfig};
use crate::autodiff::{Graph, Var};
use crate::diffusion::{
    fuse_gaussian, fuse_manual, fuse_structured, stride2_stack_forward, stride2_stack_register,
    NoiseSchedule, PdEncoder, LATENT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::init::{self, Init};
use crate::params::{ParamGroup, ParamStore};
use crate::pdam::{add_maps, Pdam};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STEM: &str = "stem";
const ENCODER: &str = "pd_encoder";
const PDAM: &str = "pdam";

/// Latent stem, toy UNet over the latent grid and a 1x1 pixel head.
#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    encoder: Option<PdEncoder>,
    pdam: Option<Pdam>,
    schedule: NoiseSchedule,
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let encoder = (config.pd_source != PdSource::None)
            .then(|| PdEncoder::new(config.encoder_widths, ENCODER));
        let pdam = match config.pd_source {
            PdSource::Pdam => Some(Pdam::new(config.pdam_config(), PDAM)?),
            _ => None,
        };
        let schedule = NoiseSchedule::latent_default();
        schedule.weights(config.t)?;
        Ok(Self {
            config,
            encoder,
            pdam,
            schedule,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    /// Maps `forward` expects for this configuration.
    pub fn maps_expected(&self) -> usize {
        self.config.pd_source.maps_used(self.config.maps)
    }

    pub fn register<F: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<F>,
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        let c = &self.config;
        let w = c.unet_width;
        stride2_stack_register(store, STEM, 3, c.stem_widths, LATENT_CHANNELS, init, ParamGroup::Rest, rng)?;
        if let Some(enc) = &self.encoder {
            enc.register(store, init, rng)?;
        }
        if let Some(pdam) = &self.pdam {
            pdam.register(store, init, rng)?;
        }
        let bb = ParamGroup::Backbone;
        for (name, cin, cout) in [
            ("unet.enc1.0", LATENT_CHANNELS, w),
            ("unet.enc1.1", w, w),
            ("unet.down1", w, 2 * w),
            ("unet.enc2.0", 2 * w, 2 * w),
            ("unet.enc2.1", 2 * w, 2 * w),
            ("unet.down2", 2 * w, 4 * w),
            ("unet.mid.0", 4 * w, 4 * w),
            ("unet.mid.1", 4 * w, 4 * w),
            ("unet.up2.0", 6 * w, 2 * w),
            ("unet.up2.1", 2 * w, 2 * w),
            ("unet.up1.0", 3 * w, w),
            ("unet.up1.1", w, w),
        ] {
            init::conv(store, name, cin, cout, 3, init, bb, rng)?;
        }
        init::conv(store, "head", 3 * w + LATENT_CHANNELS, c.classes, 1, init, ParamGroup::Rest, rng)
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParamStore<F>> {
        let mut store = ParamStore::new();
        self.register(&mut store, Init::FanIn, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(store)
    }

    /// RGB latent `N x 4 x H/8 x W/8`.
    pub fn stem<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, rgb: Var) -> Result<Var> {
        let s = g.shape(rgb);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("rgb must be Nx3xHxW, got {s:?}")));
        }
        stride2_stack_forward(g, store, STEM, rgb)
    }

    /// The single map fed to the depth encoder.
    pub fn depth_input<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        maps: &[Var],
    ) -> Result<Var> {
        let want = self.maps_expected();
        if maps.len() != want {
            return Err(Error::config(format!(
                "depth source {} expects {want} pseudo-depth maps, got {}",
                self.config.pd_source,
                maps.len()
            )));
        }
        match (&self.config.pd_source, &self.pdam) {
            (PdSource::Single(_), _) => Ok(maps[0]),
            (PdSource::Addition, _) => add_maps(g, maps),
            (PdSource::Pdam, Some(pdam)) => pdam.aggregate(g, store, maps),
            _ => Err(Error::config("configuration takes no pseudo depth")),
        }
    }

    /// Fused latent fed to the UNet.
    pub fn fuse<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        z_rgb: Var,
        maps: &[Var],
        noise_seed: u64,
    ) -> Result<Var> {
        let t = self.config.t;
        match self.config.fusion {
            FusionMode::RgbOnly => {
                let (ws, _) = self.schedule.weights(t)?;
                g.scale(z_rgb, F::from_f64_lossy(ws))
            }
            FusionMode::Gaussian => {
                let shape = g.shape(z_rgb).to_vec();
                let noise = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(noise_seed));
                let noise = g.constant(noise)?;
                fuse_gaussian(g, z_rgb, noise, &self.schedule, t)
            }
            FusionMode::Structured | FusionMode::Manual { .. } => {
                let pd = self.depth_input(g, store, maps)?;
                let enc = self.encoder.as_ref().expect("depth modes register an encoder");
                let z_pd = enc.forward(g, store, pd)?;
                match self.config.fusion {
                    FusionMode::Manual { w_rgb, w_pd } => fuse_manual(g, z_rgb, z_pd, w_rgb, w_pd),
                    _ => fuse_structured(g, z_rgb, z_pd, &self.schedule, t),
                }
            }
        }
    }

    /// Class logits `N x K x H x W`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        rgb: Var,
        maps: &[Var],
        noise_seed: u64,
    ) -> Result<Var> {
        let [_, _, h, w] = dims(g, rgb)?;
        let z_rgb = self.stem(g, store, rgb)?;
        let z = self.fuse(g, store, z_rgb, maps, noise_seed)?;
        let [_, _, zh, zw] = dims(g, z)?;

        let e1 = conv(g, store, "unet.enc1.0", z, 1)?;
        let e1 = conv(g, store, "unet.enc1.1", e1, 1)?;
        let x = conv(g, store, "unet.down1", e1, 2)?;
        let e2 = conv(g, store, "unet.enc2.0", x, 1)?;
        let e2 = conv(g, store, "unet.enc2.1", e2, 1)?;
        let x = conv(g, store, "unet.down2", e2, 2)?;
        let x = conv(g, store, "unet.mid.0", x, 1)?;
        let x = conv(g, store, "unet.mid.1", x, 1)?;

        let [_, _, h2, w2] = dims(g, e2)?;
        let x = g.upsample_nearest(x, h2, w2)?;
        let x = g.concat(&[x, e2], 1)?;
        let x = conv(g, store, "unet.up2.0", x, 1)?;
        let d2 = conv(g, store, "unet.up2.1", x, 1)?;
        let x = g.upsample_nearest(d2, zh, zw)?;
        let x = g.concat(&[x, e1], 1)?;
        let x = conv(g, store, "unet.up1.0", x, 1)?;
        let d1 = conv(g, store, "unet.up1.1", x, 1)?;

        let d2 = g.upsample_nearest(d2, zh, zw)?;
        let feats = g.concat(&[d1, d2, z], 1)?;
        let hw = g.param(store, "head.weight")?;
        let hb = g.param(store, "head.bias")?;
        let logits = g.conv2d(feats, hw, Some(hb), 1, 0, 1)?;
        g.resize_bilinear(logits, h, w)
    }
}

fn dims<F: Scalar>(g: &Graph<F>, v: Var) -> Result<[usize; 4]> {
    let s = g.shape(v);
    <[usize; 4]>::try_from(s).map_err(|_| Error::dim(format!("expected rank 4, got {s:?}")))
}

fn conv<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, Some(b), stride, 1, 1)?;
    g.relu(y)
}
