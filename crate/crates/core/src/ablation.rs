//! Grid sweeps over fusion weights, timesteps and depth sources, one training
//! run per cell and seed.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Dataset;
use crate::diffusion::{MANUAL_WEIGHT_GRID, TIMESTEP_GRID};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::scalar::Scalar;
use crate::segnet::{evaluate, train, FusionMode, PdSource, PredictOptions, SegNet, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Weights,
    Timestep,
    DepthSource,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Grid::Weights),
            "timestep" => Ok(Grid::Timestep),
            "depth-source" => Ok(Grid::DepthSource),
            _ => Err(Error::config(format!(
                "unknown grid {s:?} (weights, timestep, depth-source)"
            ))),
        }
    }
}

/// Profiles aggregated by the multi-map rows of the depth-source grid.
pub const PSEUDO_TAGS: [&str; 3] = ["sharp", "smooth", "quantized"];

/// One row of a grid: a model configuration and the depth maps it reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: TrainConfig,
    /// Tags kept from each sample's pseudo-depth set, in order; all when empty.
    pub tags: Vec<String>,
}

impl Cell {
    fn new(name: impl Into<String>, base: &TrainConfig, fusion: FusionMode, source: PdSource, tags: &[&str]) -> Self {
        let mut config = base.clone();
        config.model.fusion = fusion;
        config.model.pd_source = source;
        if !tags.is_empty() {
            config.model.maps = tags.len();
        }
        Self {
            name: name.into(),
            config,
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Default cells of `grid`, built on top of `base`.
pub fn cells(grid: Grid, base: &TrainConfig) -> Vec<Cell> {
    let pdam = || PdSource::Pdam;
    match grid {
        Grid::Weights => {
            let mut out: Vec<Cell> = MANUAL_WEIGHT_GRID
                .iter()
                .map(|&(w_rgb, w_pd)| {
                    Cell::new(
                        format!("{w_rgb}:{w_pd}"),
                        base,
                        FusionMode::Manual { w_rgb, w_pd },
                        pdam(),
                        &PSEUDO_TAGS,
                    )
                })
                .collect();
            out.push(Cell::new("structured", base, FusionMode::Structured, pdam(), &PSEUDO_TAGS));
            out
        }
        Grid::Timestep => TIMESTEP_GRID
            .iter()
            .map(|&t| {
                let mut c = Cell::new(format!("t={t}"), base, FusionMode::Structured, pdam(), &PSEUDO_TAGS);
                c.config.model.t = t;
                c
            })
            .collect(),
        Grid::DepthSource => {
            let mut out = vec![Cell::new("rgb_only", base, FusionMode::RgbOnly, PdSource::None, &[])];
            for tag in ["sensor"].iter().chain(&PSEUDO_TAGS) {
                out.push(Cell::new(*tag, base, FusionMode::Structured, PdSource::Single(tag.to_string()), &[tag]));
            }
            out.push(Cell::new("addition", base, FusionMode::Structured, PdSource::Addition, &PSEUDO_TAGS));
            out.push(Cell::new("pdam", base, FusionMode::Structured, PdSource::Pdam, &PSEUDO_TAGS));
            out
        }
    }
}

/// Trains `cell` with `seed` and scores it on the test split.
pub fn run_cell<F: Scalar>(cell: &Cell, data: &Dataset<F>, seed: u64) -> Result<Scores> {
    let selected;
    let data = if cell.tags.is_empty() {
        data
    } else {
        selected = data.select_tags(&cell.tags)?;
        &selected
    };
    let cfg = TrainConfig {
        seed,
        ..cell.config.clone()
    };
    let run = train(&data.train, &[], &cfg)?;
    run.check()?;
    let net = SegNet::new(cfg.model.clone())?;
    evaluate(&net, &run.params, &data.test, &PredictOptions::single_scale())?.scores()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub name: String,
    pub scores: Vec<Scores>,
    /// First error that aborted the cell; the remaining seeds are skipped.
    pub failure: Option<String>,
}

impl CellResult {
    /// `(mean, sample std)` of a score field over the seeds.
    pub fn summary(&self, field: impl Fn(&Scores) -> f64) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.scores.iter().map(field).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }

    pub fn mean_miou(&self) -> Option<f64> {
        self.summary(|s| s.miou).map(|(m, _)| m)
    }
}

/// Runs every cell over `seeds`; a failing cell is recorded and the grid continues.
pub fn run_grid<F: Scalar>(
    cells: &[Cell],
    data: &Dataset<F>,
    seeds: &[u64],
    mut progress: impl FnMut(&Cell, u64, &Result<Scores>),
) -> Vec<CellResult> {
    cells
        .iter()
        .map(|cell| {
            let mut result = CellResult {
                name: cell.name.clone(),
                scores: Vec::with_capacity(seeds.len()),
                failure: None,
            };
            for &seed in seeds {
                let r = run_cell(cell, data, seed);
                progress(cell, seed, &r);
                match r {
                    Ok(s) => result.scores.push(s),
                    Err(e) => {
                        result.failure = Some(e.to_string());
                        break;
                    }
                }
            }
            result
        })
        .collect()
}

/// One row per cell: PA, MA and mIoU in percent as mean and std over seeds.
pub fn grid_csv(results: &[CellResult]) -> String {
    let mut out = String::from("config,seeds,pa_mean,pa_std,ma_mean,ma_std,miou_mean,miou_std,status\n");
    for r in results {
        let _ = write!(out, "{},{}", r.name, r.scores.len());
        for field in [|s: &Scores| s.pixel_acc, |s: &Scores| s.mean_acc, |s: &Scores| s.miou] {
            match r.summary(field) {
                Some((m, s)) => {
                    let _ = write!(out, ",{:.4},{:.4}", 100.0 * m, 100.0 * s);
                }
                None => out.push_str(",,"),
            }
        }
        match &r.failure {
            None => out.push_str(",ok\n"),
            Some(e) => {
                let _ = writeln!(out, ",failed: {}", e.replace([',', '\n'], ";"));
            }
        }
    }
    out
}
