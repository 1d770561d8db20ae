use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pdam::{PdamConfig, PseudoDepthSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the RGB latent is combined with the second latent before the UNet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionMode {
    /// `sqrt(abar_t) * z_rgb`.
    RgbOnly,
    Structured,
    Manual { w_rgb: f64, w_pd: f64 },
    Gaussian,
}

impl FusionMode {
    pub fn uses_depth(self) -> bool {
        matches!(self, FusionMode::Structured | FusionMode::Manual { .. })
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::RgbOnly => f.write_str("rgb_only"),
            FusionMode::Structured => f.write_str("structured"),
            FusionMode::Manual { w_rgb, w_pd } => write!(f, "manual:{w_rgb}:{w_pd}"),
            FusionMode::Gaussian => f.write_str("gaussian"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_only" => Ok(FusionMode::RgbOnly),
            "structured" => Ok(FusionMode::Structured),
            "gaussian" => Ok(FusionMode::Gaussian),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["manual", a, b] => {
                        let w_rgb = a.parse::<f64>().map_err(|e| Error::config(format!("{s}: {e}")))?;
                        let w_pd = b.parse::<f64>().map_err(|e| Error::config(format!("{s}: {e}")))?;
                        Ok(FusionMode::Manual { w_rgb, w_pd })
                    }
                    _ => Err(Error::config(format!(
                        "unknown fusion mode {s:?} (rgb_only, structured, gaussian, manual:W_RGB:W_PD)"
                    ))),
                }
            }
        }
    }
}

/// Which pseudo-depth input feeds the depth encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PdSource {
    None,
    /// One map, picked by its source tag.
    Single(String),
    /// Element-wise sum of all maps.
    Addition,
    Pdam,
}

impl PdSource {
    /// Number of maps the network consumes given `available` maps in the set.
    pub fn maps_used(&self, available: usize) -> usize {
        match self {
            PdSource::None => 0,
            PdSource::Single(_) => 1,
            PdSource::Addition | PdSource::Pdam => available,
        }
    }

    /// Picks the maps this source consumes, in order.
    pub fn select<F: Scalar>(&self, set: &PseudoDepthSet<F>) -> Result<Vec<Tensor<F>>> {
        match self {
            PdSource::None => Ok(Vec::new()),
            PdSource::Single(tag) => {
                let i = set
                    .source_tags()
                    .iter()
                    .position(|t| t == tag)
                    .ok_or_else(|| {
                        Error::config(format!(
                            "pseudo-depth source {tag:?} not in {:?}",
                            set.source_tags()
                        ))
                    })?;
                Ok(vec![set.maps()[i].clone()])
            }
            PdSource::Addition | PdSource::Pdam => Ok(set.maps().to_vec()),
        }
    }
}

impl fmt::Display for PdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PdSource::None => f.write_str("none"),
            PdSource::Single(tag) => write!(f, "single:{tag}"),
            PdSource::Addition => f.write_str("addition"),
            PdSource::Pdam => f.write_str("pdam"),
        }
    }
}

impl FromStr for PdSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PdSource::None),
            "addition" => Ok(PdSource::Addition),
            "pdam" => Ok(PdSource::Pdam),
            _ => match s.strip_prefix("single:") {
                Some(tag) if !tag.is_empty() => Ok(PdSource::Single(tag.to_string())),
                _ => Err(Error::config(format!(
                    "unknown depth source {s:?} (none, single:TAG, addition, pdam)"
                ))),
            },
        }
    }
}

/// Architecture and fusion settings of the segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub classes: usize,
    pub stem_widths: (usize, usize),
    pub encoder_widths: (usize, usize),
    pub unet_width: usize,
    pub fusion: FusionMode,
    pub pd_source: PdSource,
    /// Maps in the pseudo-depth set; PDAM is sized from this.
    pub maps: usize,
    pub t: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            stem_widths: (16, 32),
            encoder_widths: (16, 32),
            unet_width: 16,
            fusion: FusionMode::RgbOnly,
            pd_source: PdSource::None,
            maps: 3,
            t: 0,
            lambda_c: PdamConfig::DEFAULT_LAMBDA,
            lambda_s: PdamConfig::DEFAULT_LAMBDA,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::config(format!("classes must be in 2..=255, got {}", self.classes)));
        }
        let widths = [
            self.stem_widths.0,
            self.stem_widths.1,
            self.encoder_widths.0,
            self.encoder_widths.1,
            self.unet_width,
        ];
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        match (self.fusion.uses_depth(), &self.pd_source) {
            (true, PdSource::None) => {
                return Err(Error::config(format!(
                    "fusion mode {} needs a pseudo-depth source",
                    self.fusion
                )))
            }
            (false, src) if *src != PdSource::None => {
                return Err(Error::config(format!(
                    "fusion mode {} takes no pseudo depth, got source {src}",
                    self.fusion
                )))
            }
            _ => {}
        }
        if let FusionMode::Manual { w_rgb, w_pd } = self.fusion {
            if !(w_rgb >= 0.0 && w_pd >= 0.0) {
                return Err(Error::config("manual weights must be non-negative"));
            }
        }
        if matches!(self.pd_source, PdSource::Addition | PdSource::Pdam) && self.maps == 0 {
            return Err(Error::config("addition and pdam need at least one map"));
        }
        Ok(())
    }

    pub fn pdam_config(&self) -> PdamConfig {
        PdamConfig::new(self.maps).with_lambdas(self.lambda_c, self.lambda_s)
    }
}

/// Optimisation and schedule settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: SegNetConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: SegNetConfig::default(),
            iterations: 2000,
            batch_size: 4,
            lr_backbone: 5e-6,
            lr_rest: 1e-4,
            weight_decay: 0.05,
            lr_decay_step: 1500,
            lr_decay_factor: 0.1,
            eval_interval: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rates for training every component from scratch on the synthetic scenes.
    pub fn desk() -> Self {
        Self {
            lr_backbone: 2e-3,
            lr_rest: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.iterations == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("iterations, batch size and eval interval must be positive"));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_rest", self.lr_rest),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rates `(backbone, rest)` in effect at `iteration`.
    pub fn rates_at(&self, iteration: usize) -> (f64, f64) {
        let f = if iteration >= self.lr_decay_step { self.lr_decay_factor } else { 1.0 };
        (self.lr_backbone * f, self.lr_rest * f)
    }

    /// `key = value` lines, one per field.
    pub fn to_echo(&self) -> String {
        let m = &self.model;
        let fields: Vec<(&str, String)> = vec![
            ("classes", m.classes.to_string()),
            ("stem_widths", format!("{},{}", m.stem_widths.0, m.stem_widths.1)),
            ("encoder_widths", format!("{},{}", m.encoder_widths.0, m.encoder_widths.1)),
            ("unet_width", m.unet_width.to_string()),
            ("fusion", m.fusion.to_string()),
            ("pd_source", m.pd_source.to_string()),
            ("maps", m.maps.to_string()),
            ("t", m.t.to_string()),
            ("lambda_c", m.lambda_c.to_string()),
            ("lambda_s", m.lambda_s.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_rest", self.lr_rest.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_step", self.lr_decay_step.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("seed", self.seed.to_string()),
        ];
        fields.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
        }
        fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::config(format!("{key} needs two comma-separated widths")))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        }
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let m = &mut cfg.model;
            match k {
                "classes" => m.classes = num(k, v)?,
                "stem_widths" => m.stem_widths = pair(k, v)?,
                "encoder_widths" => m.encoder_widths = pair(k, v)?,
                "unet_width" => m.unet_width = num(k, v)?,
                "fusion" => m.fusion = v.parse()?,
                "pd_source" => m.pd_source = v.parse()?,
                "maps" => m.maps = num(k, v)?,
                "t" => m.t = num(k, v)?,
                "lambda_c" => m.lambda_c = num(k, v)?,
                "lambda_s" => m.lambda_s = num(k, v)?,
                "iterations" => cfg.iterations = num(k, v)?,
                "batch_size" => cfg.batch_size = num(k, v)?,
                "lr_backbone" => cfg.lr_backbone = num(k, v)?,
                "lr_rest" => cfg.lr_rest = num(k, v)?,
                "weight_decay" => cfg.weight_decay = num(k, v)?,
                "lr_decay_step" => cfg.lr_decay_step = num(k, v)?,
                "lr_decay_factor" => cfg.lr_decay_factor = num(k, v)?,
                "eval_interval" => cfg.eval_interval = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                _ => return Err(Error::config(format!("unknown config key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.model.fusion = FusionMode::Manual { w_rgb: 0.95, w_pd: 0.05 };
        cfg.model.pd_source = PdSource::Single("smooth".into());
        cfg.seed = 17;
        assert_eq!(TrainConfig::from_echo(&cfg.to_echo()).unwrap(), cfg);
    }

    #[test]
    fn mode_source_consistency() {
        let mut m = SegNetConfig { fusion: FusionMode::Structured, ..Default::default() };
        assert!(m.validate().is_err());
        m.pd_source = PdSource::Pdam;
        m.validate().unwrap();
        m.fusion = FusionMode::RgbOnly;
        assert!(m.validate().is_err());
        assert!("manual:0.9".parse::<FusionMode>().is_err());
        assert!("single:".parse::<PdSource>().is_err());
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig { lr_decay_step: 10, ..TrainConfig::default() };
        assert_eq!(cfg.rates_at(9), (5e-6, 1e-4));
        let (b, r) = cfg.rates_at(10);
        assert!((b - 5e-7).abs() < 1e-18 && (r - 1e-5).abs() < 1e-18);
    }
}
