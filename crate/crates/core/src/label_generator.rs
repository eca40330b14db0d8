//! Ensemble of per-pixel MLPs mapping hypercolumns to labels.
//!
//! Discrete tasks aggregate by majority vote over member argmaxes and report
//! the generalized Jensen-Shannon divergence of the member softmax
//! distributions. Continuous tasks average member outputs and report the
//! population variance across members, averaged over output dimensions.
//!
//! Per-pixel sums over members run on sorted values, so aggregation does not
//! depend on member order.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::hoff::Archive;
use crate::hypercolumn::HypercolumnField;
use crate::image::Grid;
use crate::net::{fit, softmax, DenseNet, FitParams, OptimState, TargetSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    Discrete {
        classes: usize,
    },
    /// `scale` divides targets before training and multiplies predictions after.
    Continuous {
        outputs: usize,
        scale: f32,
    },
}

impl TaskKind {
    /// Single-line form used in checkpoint manifests.
    pub fn to_text(&self) -> String {
        match *self {
            TaskKind::Discrete { classes } => format!("discrete {classes}"),
            TaskKind::Continuous { outputs, scale } => format!("continuous {outputs} {scale}"),
        }
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::format("task kind", why.to_string());
        let parts: Vec<&str> = text.split_whitespace().collect();
        match parts.as_slice() {
            ["discrete", c] => Ok(TaskKind::Discrete {
                classes: c.parse().map_err(|_| bad("class count"))?,
            }),
            ["continuous", o, s] => Ok(TaskKind::Continuous {
                outputs: o.parse().map_err(|_| bad("output count"))?,
                scale: s.parse().map_err(|_| bad("scale"))?,
            }),
            _ => Err(bad("unknown task")),
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            TaskKind::Discrete { classes } => classes,
            TaskKind::Continuous { outputs, .. } => outputs,
        }
    }
}

/// A generated or ground-truth label for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelPlane {
    Classes(Grid<u32>),
    /// `channels` values per pixel, row-major pixels.
    Values {
        size: usize,
        channels: usize,
        data: Vec<f32>,
    },
}

impl LabelPlane {
    pub fn size(&self) -> usize {
        match self {
            LabelPlane::Classes(g) => g.size(),
            LabelPlane::Values { size, .. } => *size,
        }
    }

    pub fn classes(&self) -> Option<&Grid<u32>> {
        match self {
            LabelPlane::Classes(g) => Some(g),
            LabelPlane::Values { .. } => None,
        }
    }

    /// Values of one channel as a grid.
    pub fn channel(&self, c: usize) -> Option<Grid<f32>> {
        match self {
            LabelPlane::Values {
                size,
                channels,
                data,
            } if c < *channels => Grid::from_vec(
                *size,
                data.iter().skip(c).step_by(*channels).copied().collect(),
            )
            .ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyKind {
    JsDivergence,
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub kind: UncertaintyKind,
    pub values: Grid<f64>,
}

/// Sum over pixels in row-major order.
pub fn image_uncertainty(map: &UncertaintyMap) -> f64 {
    let mut total = 0.0;
    for &v in map.values.data() {
        total += v;
    }
    total
}

/// One labeled training image.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub field: HypercolumnField,
    pub labels: LabelPlane,
    /// Per-value loss weights for continuous labels (same layout as the values).
    /// Pixels whose weights are all zero are never sampled.
    pub weights: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSampling {
    Uniform,
    /// Equal share per class present in the image.
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleParams {
    pub members: usize,
    pub hidden: (usize, usize),
    pub pixels_per_image: usize,
    pub sampling: PixelSampling,
    pub fit: FitParams,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            members: 10,
            hidden: (32, 16),
            pixels_per_image: 2000,
            sampling: PixelSampling::Uniform,
            fit: FitParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub task: TaskKind,
    pub members: Vec<DenseNet>,
    pub seeds: Vec<u64>,
    /// Last-epoch training loss of each member.
    pub final_losses: Vec<f64>,
}

fn check_image(img: &TrainingImage, task: TaskKind) -> Result<()> {
    let px = img.field.res() * img.field.res();
    if img.labels.size() != img.field.res() {
        return Err(Error::shape(
            "label plane",
            img.field.res(),
            img.labels.size(),
        ));
    }
    match (&img.labels, task) {
        (LabelPlane::Classes(g), TaskKind::Discrete { classes }) => {
            if let Some(&c) = g.data().iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Input(format!(
                    "class index {c} >= class count {classes}"
                )));
            }
        }
        (LabelPlane::Values { channels, data, .. }, TaskKind::Continuous { outputs, .. }) => {
            if *channels != outputs || data.len() != px * outputs {
                return Err(Error::shape("continuous labels", px * outputs, data.len()));
            }
            if let Some(w) = &img.weights {
                if w.len() != data.len() {
                    return Err(Error::shape("label weights", data.len(), w.len()));
                }
            }
        }
        _ => {
            return Err(Error::Input(
                "label plane does not match the task kind".into(),
            ))
        }
    }
    Ok(())
}

fn eligible_pixels(img: &TrainingImage, outputs: usize) -> Vec<usize> {
    let px = img.field.res() * img.field.res();
    match &img.weights {
        Some(w) => (0..px)
            .filter(|&p| w[p * outputs..(p + 1) * outputs].iter().any(|&v| v > 0.0))
            .collect(),
        None => (0..px).collect(),
    }
}

fn choose<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = sample_indices(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn subsample<R: Rng + ?Sized>(
    rng: &mut R,
    img: &TrainingImage,
    task: TaskKind,
    params: &EnsembleParams,
) -> Vec<usize> {
    let eligible = eligible_pixels(img, task.output_width());
    match (&img.labels, params.sampling) {
        (LabelPlane::Classes(g), PixelSampling::ClassBalanced) => {
            let classes = task.output_width();
            let mut by_class = vec![Vec::new(); classes];
            for &p in &eligible {
                by_class[g.data()[p] as usize].push(p);
            }
            let present = by_class.iter().filter(|v| !v.is_empty()).count().max(1);
            let quota = params.pixels_per_image.div_ceil(present);
            let mut out: Vec<usize> = by_class
                .iter()
                .flat_map(|pool| choose(rng, pool, quota))
                .collect();
            out.sort_unstable();
            out
        }
        _ => choose(rng, &eligible, params.pixels_per_image),
    }
}

/// Train one member from an explicit seed.
pub fn train_member(
    seed: u64,
    images: &[TrainingImage],
    task: TaskKind,
    params: &EnsembleParams,
) -> Result<(DenseNet, f64)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("label generator needs at least one training image".into()))?;
    let c = first.field.channels();
    let out = task.output_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::new(&[c, params.hidden.0, params.hidden.1, out], &mut rng)?;
    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    let mut any_weights = false;
    for img in images {
        check_image(img, task)?;
        if img.field.channels() != c {
            return Err(Error::shape(
                "hypercolumn channels",
                c,
                img.field.channels(),
            ));
        }
        for p in subsample(&mut rng, img, task, params) {
            inputs.extend_from_slice(&img.field.data()[p * c..(p + 1) * c]);
            match (&img.labels, task) {
                (LabelPlane::Classes(g), _) => classes.push(g.data()[p]),
                (LabelPlane::Values { data, .. }, TaskKind::Continuous { scale, .. }) => {
                    values.extend(data[p * out..(p + 1) * out].iter().map(|v| v / scale));
                    match &img.weights {
                        Some(w) => {
                            any_weights = true;
                            weights.extend_from_slice(&w[p * out..(p + 1) * out]);
                        }
                        None => weights.extend(std::iter::repeat_n(1.0, out)),
                    }
                }
                _ => unreachable!("checked above"),
            }
        }
    }
    let targets = match task {
        TaskKind::Discrete { .. } => TargetSet::Classes(classes),
        TaskKind::Continuous { outputs, .. } => TargetSet::Values {
            width: outputs,
            values,
            weights: any_weights.then_some(weights),
        },
    };
    if targets.is_empty() {
        return Err(Error::Input("no valid training pixels".into()));
    }
    let mut state = OptimState::new(params.fit.optimizer, params.fit.lr, &net);
    let history = fit(
        &mut net,
        &mut state,
        &inputs,
        &targets,
        &params.fit,
        &mut rng,
    )?;
    Ok((net, history.last().copied().unwrap_or(f64::NAN)))
}

/// Train members with the given seeds, in parallel.
pub fn train_ensemble_with_seeds(
    seeds: &[u64],
    images: &[TrainingImage],
    task: TaskKind,
    params: &EnsembleParams,
) -> Result<EnsembleModel> {
    if seeds.is_empty() {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let trained: Vec<(DenseNet, f64)> = seeds
        .par_iter()
        .map(|&s| train_member(s, images, task, params))
        .collect::<Result<_>>()?;
    let (members, final_losses) = trained.into_iter().unzip();
    Ok(EnsembleModel {
        task,
        members,
        seeds: seeds.to_vec(),
        final_losses,
    })
}

/// Train `params.members` members, each seeded from `rng`.
pub fn train_ensemble<R: Rng + ?Sized>(
    rng: &mut R,
    images: &[TrainingImage],
    task: TaskKind,
    params: &EnsembleParams,
) -> Result<EnsembleModel> {
    let seeds: Vec<u64> = (0..params.members).map(|_| rng.random()).collect();
    train_ensemble_with_seeds(&seeds, images, task, params)
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Generalized Jensen-Shannon divergence with uniform weights, natural log,
/// clamped to `[0, ln M]`.
pub fn js_divergence(dists: &[Vec<f64>]) -> f64 {
    let m = dists.len();
    if m == 0 {
        return 0.0;
    }
    let k = dists[0].len();
    let mut column = vec![0.0; m];
    let mean: Vec<f64> = (0..k)
        .map(|c| {
            for (slot, d) in column.iter_mut().zip(dists) {
                *slot = d[c];
            }
            sorted_sum(&mut column) / m as f64
        })
        .collect();
    let mut ents: Vec<f64> = dists.iter().map(|d| entropy(d)).collect();
    let mean_ent = sorted_sum(&mut ents) / m as f64;
    (entropy(&mean) - mean_ent).clamp(0.0, (m as f64).ln())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Majority vote over member argmaxes (ties to the lower class) and JS divergence.
pub fn aggregate_discrete(member_logits: &[&[f32]]) -> (u32, f64) {
    let classes = member_logits.first().map_or(0, |l| l.len());
    let mut votes = vec![0usize; classes];
    for l in member_logits {
        votes[argmax(l)] += 1;
    }
    let mut label = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[label] {
            label = c;
        }
    }
    let dists: Vec<Vec<f64>> = member_logits.iter().map(|l| softmax(l)).collect();
    (label as u32, js_divergence(&dists))
}

/// Mean output and population variance averaged over output dimensions.
pub fn aggregate_continuous(member_outputs: &[&[f32]]) -> (Vec<f32>, f64) {
    let m = member_outputs.len();
    let d = member_outputs.first().map_or(0, |o| o.len());
    let mut column = vec![0.0; m];
    let mut mean = Vec::with_capacity(d);
    let mut var_total = 0.0;
    for k in 0..d {
        for (slot, o) in column.iter_mut().zip(member_outputs) {
            *slot = o[k] as f64;
        }
        let mu = sorted_sum(&mut column) / m as f64;
        for v in column.iter_mut() {
            *v = (*v - mu).powi(2);
        }
        var_total += sorted_sum(&mut column) / m as f64;
        mean.push(mu as f32);
    }
    (mean, if d == 0 { 0.0 } else { var_total / d as f64 })
}

impl EnsembleModel {
    pub fn input_width(&self) -> usize {
        self.members[0].input_width()
    }

    /// Raw outputs of every member for every pixel, `(member, pixel, output)`.
    fn member_outputs(&self, field: &HypercolumnField) -> Result<Vec<Vec<f32>>> {
        if field.channels() != self.input_width() {
            return Err(Error::shape(
                "hypercolumn channels",
                self.input_width(),
                field.channels(),
            ));
        }
        let px = field.res() * field.res();
        self.members
            .iter()
            .map(|net| net.forward(field.data(), px))
            .collect()
    }

    pub fn predict(&self, field: &HypercolumnField) -> Result<(LabelPlane, UncertaintyMap)> {
        let outs = self.member_outputs(field)?;
        let px = field.res() * field.res();
        let w = self.task.output_width();
        let row = |m: usize, p: usize| &outs[m][p * w..(p + 1) * w];
        match self.task {
            TaskKind::Discrete { .. } => {
                let per_pixel: Vec<(u32, f64)> = (0..px)
                    .into_par_iter()
                    .map(|p| {
                        let rows: Vec<&[f32]> = (0..outs.len()).map(|m| row(m, p)).collect();
                        aggregate_discrete(&rows)
                    })
                    .collect();
                let (labels, unc): (Vec<u32>, Vec<f64>) = per_pixel.into_iter().unzip();
                Ok((
                    LabelPlane::Classes(Grid::from_vec(field.res(), labels)?),
                    UncertaintyMap {
                        kind: UncertaintyKind::JsDivergence,
                        values: Grid::from_vec(field.res(), unc)?,
                    },
                ))
            }
            TaskKind::Continuous { outputs, scale } => {
                let per_pixel: Vec<(Vec<f32>, f64)> = (0..px)
                    .into_par_iter()
                    .map(|p| {
                        let rows: Vec<Vec<f32>> = (0..outs.len())
                            .map(|m| row(m, p).iter().map(|v| v * scale).collect())
                            .collect();
                        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                        aggregate_continuous(&refs)
                    })
                    .collect();
                let mut data = Vec::with_capacity(px * outputs);
                let mut unc = Vec::with_capacity(px);
                for (v, u) in per_pixel {
                    data.extend(v);
                    unc.push(u);
                }
                Ok((
                    LabelPlane::Values {
                        size: field.res(),
                        channels: outputs,
                        data,
                    },
                    UncertaintyMap {
                        kind: UncertaintyKind::Variance,
                        values: Grid::from_vec(field.res(), unc)?,
                    },
                ))
            }
        }
    }

    /// A single-member model made of member `index`.
    pub fn member(&self, index: usize) -> Result<EnsembleModel> {
        let net = self
            .members
            .get(index)
            .ok_or_else(|| Error::Input(format!("no ensemble member {index}")))?;
        Ok(EnsembleModel {
            task: self.task,
            members: vec![net.clone()],
            seeds: vec![self.seeds[index]],
            final_losses: vec![self.final_losses[index]],
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        let task = self.task.to_text();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let widths: Vec<String> = self.members[0]
            .widths()
            .iter()
            .map(|w| w.to_string())
            .collect();
        a.insert_text(
            "manifest",
            &format!(
                "task = {task}\nmembers = {}\nwidths = {}\nseeds = {}\n",
                self.members.len(),
                widths.join(","),
                seeds.join(",")
            ),
        );
        for (m, net) in self.members.iter().enumerate() {
            net.write_to(&mut a, &format!("member{m}/"));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let text = a.text("manifest")?;
        let bad = |why: &str| Error::format("ensemble manifest", why.to_string());
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| {
                    l.strip_prefix(key)
                        .and_then(|r| r.trim_start().strip_prefix('='))
                })
                .map(str::trim)
                .ok_or_else(|| bad(&format!("missing `{key}`")))
        };
        let task = TaskKind::parse_text(field("task")?)?;
        let count: usize = field("members")?.parse().map_err(|_| bad("member count"))?;
        let seeds: Vec<u64> = field("seeds")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("seed")))
            .collect::<Result<_>>()?;
        if seeds.len() != count || count == 0 {
            return Err(bad("seed count does not match member count"));
        }
        let members = (0..count)
            .map(|m| DenseNet::read_from(a, &format!("member{m}/")))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel {
            task,
            members,
            seeds,
            final_losses: vec![f64::NAN; count],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pair_is_ln2() {
        let js = js_divergence(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((js - std::f64::consts::LN_2).abs() <= 1e-12);
        assert_eq!(js_divergence(&[vec![0.3, 0.7], vec![0.3, 0.7]]), 0.0);
    }

    #[test]
    fn continuous_two_point() {
        let (mean, var) = aggregate_continuous(&[&[1.0], &[3.0]]);
        assert_eq!(mean, vec![2.0]);
        assert_eq!(var, 1.0);
    }

    #[test]
    fn vote_ties_go_low() {
        let (label, _) = aggregate_discrete(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(label, 1);
        let (label, _) =
            aggregate_discrete(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(label, 2);
    }

    #[test]
    fn uncertainty_sum() {
        let map = UncertaintyMap {
            kind: UncertaintyKind::Variance,
            values: Grid::filled(2, 0.25),
        };
        assert_eq!(image_uncertainty(&map), 1.0);
    }
}
