//! Synthetic dataset generation and labeled-pool assembly.
//!
//! Every sample draws from its own random stream keyed by `(seed, tag, id)`,
//! so datasets do not depend on worker count or generation order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::hoff::{Tensor, TensorData};
use crate::hypercolumn;
use crate::image::{Grid, Image};
use crate::label_generator::{image_uncertainty, EnsembleModel, LabelPlane, UncertaintyMap};
use crate::scene::{
    oracle_labels, render_features, render_image, sample_latent, Latent, OracleLabels, SceneConfig,
};
use crate::{Error, Result};

/// Stream tags separating the uses of one run seed.
pub mod tags {
    pub const SYNTHESIS: u64 = 1;
    pub const POOL_BASE: u64 = 2;
    pub const POOL_ADD_RARE: u64 = 3;
    pub const POOL_ADD_PLAIN: u64 = 4;
    pub const TEST: u64 = 5;
    pub const POOL_SUBSTITUTE: u64 = 6;
    pub const CORRUPTION: u64 = 7;
    pub const ENCODER: u64 = 8;
    pub const ENSEMBLE: u64 = 9;
    pub const DOWNSTREAM: u64 = 10;
    pub const FINETUNE: u64 = 11;
    pub const POOL_CORRUPTION: u64 = 12;
}

/// Independent random stream for one sample.
pub fn sample_rng(seed: u64, tag: u64, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

/// `⌈fraction · n⌉`, treating products within 1e-9 of an integer as that integer.
pub fn rejected_count(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Indices to reject: the `⌈fraction · n⌉` most uncertain, ties going to the lower id.
/// Returns `(retained, rejected)`, each in ascending id order.
pub fn split_by_uncertainty(
    uncertainties: &[f64],
    fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "filter fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = uncertainties.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        uncertainties[b]
            .total_cmp(&uncertainties[a])
            .then(a.cmp(&b))
    });
    let k = rejected_count(n, fraction);
    let mut rejected = order[..k].to_vec();
    let mut retained = order[k..].to_vec();
    rejected.sort_unstable();
    retained.sort_unstable();
    Ok((retained, rejected))
}

/// A generated image with its predicted labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub latent: Latent,
    pub image: Image,
    pub labels: LabelPlane,
    pub uncertainty_map: UncertaintyMap,
    pub uncertainty: f64,
    /// Oracle class presence.
    pub presence: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub retained: Vec<Sample>,
    pub rejected: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams {
    pub n: usize,
    pub filter_fraction: f64,
    pub channel_caps: Option<Vec<usize>>,
}

/// Predict labels for a latent with the label generator.
pub fn label_latent(
    config: &SceneConfig,
    model: &EnsembleModel,
    caps: Option<&[usize]>,
    latent: &Latent,
) -> Result<(LabelPlane, UncertaintyMap)> {
    let features = render_features(latent, config)?;
    let field = hypercolumn::build(&features, config.resolution, caps)?;
    model.predict(&field)
}

/// Generate `n` samples, then split off the most uncertain fraction.
pub fn synthesize(
    seed: u64,
    config: &SceneConfig,
    model: &EnsembleModel,
    params: &SynthesisParams,
) -> Result<Synthesized> {
    if params.n == 0 {
        return Err(Error::Input("cannot synthesize an empty dataset".into()));
    }
    if !(0.0..1.0).contains(&params.filter_fraction) {
        return Err(Error::Config(format!(
            "filter fraction must be in [0, 1), got {}",
            params.filter_fraction
        )));
    }
    let samples: Vec<Sample> = (0..params.n)
        .into_par_iter()
        .map(|id| {
            let mut rng = sample_rng(seed, tags::SYNTHESIS, id as u64);
            let latent = sample_latent(&mut rng, config, None)?;
            let image = render_image(&latent, config)?.quantized();
            let (labels, map) =
                label_latent(config, model, params.channel_caps.as_deref(), &latent)?;
            let presence = oracle_labels(&latent, config)?.presence;
            Ok(Sample {
                id,
                latent,
                image,
                labels,
                uncertainty: image_uncertainty(&map),
                uncertainty_map: map,
                presence,
            })
        })
        .collect::<Result<_>>()?;
    let u: Vec<f64> = samples.iter().map(|s| s.uncertainty).collect();
    let (_, rejected_ids) = split_by_uncertainty(&u, params.filter_fraction)?;
    let mut is_rejected = vec![false; samples.len()];
    for &i in &rejected_ids {
        is_rejected[i] = true;
    }
    let (rejected, retained): (Vec<Sample>, Vec<Sample>) =
        samples.into_iter().partition(|s| is_rejected[s.id]);
    Ok(Synthesized { retained, rejected })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolSpec {
    /// `base_size` items, `round(proportion · base_size)` of them showing the rare class.
    Substitute { base_size: usize, proportion: f64 },
    /// A rare-free base plus added items with and without the rare class.
    Add {
        base_size: usize,
        rare_present: usize,
        rare_absent: usize,
    },
}

impl PoolSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolSpec::Substitute { proportion, .. } if !(0.0..=1.0).contains(&proportion) => {
                Err(Error::Config(format!(
                    "pool proportion must be in [0, 1], got {proportion}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            PoolSpec::Substitute { base_size, .. } => base_size,
            PoolSpec::Add {
                base_size,
                rare_present,
                rare_absent,
            } => base_size + rare_present + rare_absent,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub latent: Latent,
    pub labels: OracleLabels,
}

fn pool_item(
    seed: u64,
    tag: u64,
    id: usize,
    config: &SceneConfig,
    rare: Option<bool>,
) -> Result<PoolItem> {
    let mut rng = sample_rng(seed, tag, id as u64);
    let bias = rare.map(|r| if r { 1.0 } else { 0.0 });
    let latent = sample_latent(&mut rng, config, bias)?;
    let labels = oracle_labels(&latent, config)?;
    Ok(PoolItem { latent, labels })
}

/// Assemble a labeled pool for a long-tail study.
pub fn build_pool(seed: u64, config: &SceneConfig, spec: &PoolSpec) -> Result<Vec<PoolItem>> {
    spec.validate()?;
    let jobs: Vec<(u64, usize, Option<bool>)> = match *spec {
        PoolSpec::Substitute {
            base_size,
            proportion,
        } => {
            let k = (proportion * base_size as f64).round() as usize;
            (0..base_size)
                .map(|i| (tags::POOL_SUBSTITUTE, i, Some(i < k)))
                .collect()
        }
        PoolSpec::Add {
            base_size,
            rare_present,
            rare_absent,
        } => (0..base_size)
            .map(|i| (tags::POOL_BASE, i, Some(false)))
            .chain((0..rare_present).map(|i| (tags::POOL_ADD_RARE, i, Some(true))))
            .chain((0..rare_absent).map(|i| (tags::POOL_ADD_PLAIN, i, Some(false))))
            .collect(),
    };
    jobs.into_par_iter()
        .map(|(tag, id, rare)| pool_item(seed, tag, id, config, rare))
        .collect()
}

/// A natural (unbiased) labeled pool of `n` items.
pub fn natural_pool(
    seed: u64,
    tag: u64,
    config: &SceneConfig,
    n: usize,
    rare_bias: Option<f64>,
) -> Result<Vec<PoolItem>> {
    (0..n)
        .into_par_iter()
        .map(|id| {
            let mut rng = sample_rng(seed, tag, id as u64);
            let latent = sample_latent(&mut rng, config, rare_bias)?;
            let labels = oracle_labels(&latent, config)?;
            Ok(PoolItem { latent, labels })
        })
        .collect()
}

pub fn label_to_tensor(labels: &LabelPlane) -> Tensor {
    match labels {
        LabelPlane::Classes(g) => Tensor::u8(
            vec![g.size(), g.size()],
            g.data().iter().map(|&c| c.min(255) as u8).collect(),
        ),
        LabelPlane::Values {
            size,
            channels,
            data,
        } => Tensor::f32(vec![*size, *size, *channels], data.clone()),
    }
}

pub fn label_from_tensor(t: &Tensor) -> Result<LabelPlane> {
    match (t.dims(), t.data()) {
        ([h, w], TensorData::U8(d)) if h == w => Ok(LabelPlane::Classes(Grid::from_vec(
            *h,
            d.iter().map(|&c| c as u32).collect(),
        )?)),
        ([h, w, c], TensorData::F32(d)) if h == w => Ok(LabelPlane::Values {
            size: *h,
            channels: *c,
            data: d.clone(),
        }),
        (dims, _) => Err(Error::format(
            "label tensor",
            format!("unexpected layout {dims:?}"),
        )),
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: usize,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    fn render(&self) -> String {
        let mut s = format!(
            "# seed = {}\n# config_hash = {}\nid,image_path,label_path,uncertainty\n",
            self.seed, self.config_hash
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.id,
                r.image_path.display(),
                r.label_path.display(),
                r.uncertainty
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |why: String| Error::format("dataset manifest", why);
        let mut seed = None;
        let mut hash = None;
        let mut records = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "seed" => {
                            seed = Some(
                                v.trim()
                                    .parse()
                                    .map_err(|_| bad(format!("bad seed on line {}", i + 1)))?,
                            )
                        }
                        "config_hash" => hash = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line.trim() != "id,image_path,label_path,uncertainty" {
                    return Err(bad(format!("unexpected header `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {} has {} fields", i + 1, f.len())));
            }
            records.push(ManifestRecord {
                id: f[0]
                    .parse()
                    .map_err(|_| bad(format!("bad id on line {}", i + 1)))?,
                image_path: f[1].into(),
                label_path: f[2].into(),
                uncertainty: f[3]
                    .parse()
                    .map_err(|_| bad(format!("bad uncertainty on line {}", i + 1)))?,
            });
        }
        Ok(Manifest {
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            config_hash: hash.ok_or_else(|| bad("missing config hash".into()))?,
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Write retained samples (`manifest.csv`), rejected samples (`rejected.csv`),
/// PNG images and HOFF labels under `dir`. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    config_hash: &str,
    data: &Synthesized,
) -> Result<PathBuf> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let write = |samples: &[Sample]| -> Result<Vec<ManifestRecord>> {
        samples
            .par_iter()
            .map(|s| {
                let image_path = PathBuf::from(format!("images/{:06}.png", s.id));
                let label_path = PathBuf::from(format!("labels/{:06}.hoff", s.id));
                s.image.write_png(&dir.join(&image_path))?;
                label_to_tensor(&s.labels).write(&dir.join(&label_path))?;
                Ok(ManifestRecord {
                    id: s.id,
                    image_path,
                    label_path,
                    uncertainty: s.uncertainty,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        seed,
        config_hash: config_hash.to_string(),
        records: write(&data.retained)?,
    };
    let rejected = Manifest {
        records: write(&data.rejected)?,
        ..manifest.clone()
    };
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    let rpath = dir.join("rejected.csv");
    std::fs::write(&rpath, rejected.render()).map_err(|e| Error::io(&rpath, e))?;
    Ok(path)
}
