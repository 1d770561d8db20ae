use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::depth_io::{read_label_pgm, read_pfm, write_label_pgm, write_pfm};
use super::perturb::{perturb_depth, PerturbProfile};
use super::scene::{gen_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::pdam::{replicate3, PseudoDepthSet};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// One synthetic training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<F> {
    pub seed: u64,
    /// `1 x 3 x H x W` in `[0, 1]`.
    pub rgb: Tensor<F>,
    /// `1 x 1 x H x W`.
    pub gt_depth: Tensor<F>,
    pub pd_set: PseudoDepthSet<F>,
    pub labels: LabelMap,
}

/// SplitMix64 step, used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_sample<F: Scalar>(
    cfg: &SceneConfig,
    profiles: &[PerturbProfile],
    seed: u64,
) -> Result<SegSample<F>> {
    if profiles.is_empty() {
        return Err(Error::config("at least one perturbation profile is required"));
    }
    let scene = gen_scene::<F>(cfg, seed)?;
    let maps = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| perturb_depth(&scene.depth, p, derive_seed(seed, 1 + i as u64)).map(|o| o.map))
        .collect::<Result<Vec<_>>>()?;
    let tags = profiles.iter().map(|p| p.name.clone()).collect();
    Ok(SegSample {
        seed,
        rgb: scene.rgb,
        gt_depth: scene.depth,
        pd_set: PseudoDepthSet::new(maps, tags)?,
        labels: scene.labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Disjoint per-sample seeds for the train and test splits.
pub fn split_seeds(base: u64, n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    let all: Vec<u64> = (0..(n_train + n_test) as u64)
        .map(|i| derive_seed(base, 1000 + i))
        .collect();
    (all[..n_train].to_vec(), all[n_train..].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub train: Vec<SegSample<F>>,
    pub test: Vec<SegSample<F>>,
}

impl<F: Scalar> Dataset<F> {
    /// Generates both splits in memory, seeded from `cfg.seed`.
    pub fn generate(
        n_train: usize,
        n_test: usize,
        cfg: &SceneConfig,
        profiles: &[PerturbProfile],
    ) -> Result<Self> {
        let (train_seeds, test_seeds) = split_seeds(cfg.seed, n_train, n_test);
        let make = |seeds: Vec<u64>| {
            seeds
                .into_iter()
                .map(|s| make_sample(cfg, profiles, s))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: make(train_seeds)?,
            test: make(test_seeds)?,
        })
    }

    /// Keeps only the pseudo-depth maps tagged `tags`, in that order.
    pub fn select_tags(&self, tags: &[String]) -> Result<Self> {
        let pick = |samples: &[SegSample<F>]| {
            samples
                .iter()
                .map(|s| {
                    let idx = tags
                        .iter()
                        .map(|t| {
                            s.pd_set.source_tags().iter().position(|x| x == t).ok_or_else(|| {
                                Error::config(format!(
                                    "dataset has no {t:?} maps (has {:?})",
                                    s.pd_set.source_tags()
                                ))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(SegSample {
                        pd_set: s.pd_set.select(&idx)?,
                        ..s.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: pick(&self.train)?,
            test: pick(&self.test)?,
        })
    }

    pub fn profile_names(&self) -> Vec<String> {
        self.train
            .first()
            .or(self.test.first())
            .map(|s| s.pd_set.source_tags().to_vec())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub seed: u64,
    pub rgb: PathBuf,
    pub labels: PathBuf,
    pub gt_depth: PathBuf,
    pub pseudo: Vec<PathBuf>,
}

impl ManifestEntry {
    pub fn files(&self) -> Vec<&Path> {
        let mut out = vec![self.rgb.as_path(), self.labels.as_path(), self.gt_depth.as_path()];
        out.extend(self.pseudo.iter().map(PathBuf::as_path));
        out
    }
}

/// Text manifest, one sample per line:
/// `split seed rgb labels gt_depth pd_1 .. pd_L`, paths relative to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = write!(out, "{} {}", e.split.as_str(), e.seed);
            for f in e.files() {
                let _ = write!(out, " {}", f.display());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                offset += line.len() + 1;
                continue;
            }
            if fields.len() < 6 {
                return Err(Error::parse(offset, "manifest line needs split, seed and at least 4 files"));
            }
            let split = match fields[0] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::parse(offset, format!("unknown split {other}"))),
            };
            let seed = fields[1]
                .parse()
                .map_err(|_| Error::parse(offset, format!("bad seed {}", fields[1])))?;
            entries.push(ManifestEntry {
                split,
                seed,
                rgb: fields[2].into(),
                labels: fields[3].into(),
                gt_depth: fields[4].into(),
                pseudo: fields[5..].iter().map(PathBuf::from).collect(),
            });
            offset += line.len() + 1;
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn pd_tag(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    stem.split_once("_pd")
        .and_then(|(_, rest)| rest.split_once('_'))
        .map(|(_, name)| name.to_string())
        .unwrap_or_else(|| stem.to_string())
}

fn write_sample<F: Scalar>(dir: &Path, split: Split, s: &SegSample<F>) -> Result<ManifestEntry> {
    let rel = |name: String| PathBuf::from(split.as_str()).join(name);
    let stem = format!("{:016x}", s.seed);
    let entry = ManifestEntry {
        split,
        seed: s.seed,
        rgb: rel(format!("{stem}_rgb.dftn")),
        labels: rel(format!("{stem}_labels.pgm")),
        gt_depth: rel(format!("{stem}_depth.pfm")),
        pseudo: s
            .pd_set
            .source_tags()
            .iter()
            .enumerate()
            .map(|(i, tag)| rel(format!("{stem}_pd{i}_{tag}.pfm")))
            .collect(),
    };
    write_tensor(dir.join(&entry.rgb), &s.rgb.cast::<f32>())?;
    write_label_pgm(dir.join(&entry.labels), &s.labels)?;
    write_pfm(dir.join(&entry.gt_depth), &s.gt_depth)?;
    for (map, path) in s.pd_set.maps().iter().zip(&entry.pseudo) {
        let [_, _, h, w] = map.dims4();
        write_pfm(dir.join(path), &map.narrow(1, 0, 1)?.reshape(&[1, 1, h, w])?)?;
    }
    Ok(entry)
}

/// Generates and writes a dataset under `dir`, returning its manifest (also
/// written to `dir/manifest.txt`).
pub fn build_dataset(
    dir: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    cfg: &SceneConfig,
    profiles: &[PerturbProfile],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let data = Dataset::<f32>::generate(n_train, n_test, cfg, profiles)?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    for s in &data.train {
        entries.push(write_sample(dir, Split::Train, s)?);
    }
    for s in &data.test {
        entries.push(write_sample(dir, Split::Test, s)?);
    }
    let manifest = Manifest { entries };
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every sample listed in the manifest at `path`.
pub fn load_dataset<F: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = Manifest::load(path)?;
    let mut data = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.entries {
        let planes = e
            .pseudo
            .iter()
            .map(|p| read_pfm::<F>(base.join(p)).and_then(|t| replicate3(&t)))
            .collect::<Result<Vec<_>>>()?;
        let sample = SegSample {
            seed: e.seed,
            rgb: read_tensor(base.join(&e.rgb))?,
            gt_depth: read_pfm(base.join(&e.gt_depth))?,
            pd_set: PseudoDepthSet::new(planes, e.pseudo.iter().map(|p| pd_tag(p)).collect())?,
            labels: read_label_pgm(base.join(&e.labels))?,
        };
        match e.split {
            Split::Train => data.train.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_disjoint() {
        let (a, b) = split_seeds(7, 50, 30);
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    #[test]
    fn pd_tag_from_filename() {
        assert_eq!(pd_tag(Path::new("train/00ab_pd2_quantized.pfm")), "quantized");
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                split: Split::Test,
                seed: 42,
                rgb: "test/a_rgb.dftn".into(),
                labels: "test/a_labels.pgm".into(),
                gt_depth: "test/a_depth.pfm".into(),
                pseudo: vec!["test/a_pd0_sharp.pfm".into()],
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("valid 1 a b c d").is_err());
    }
}
