//! Per-pixel patch model trained on synthesized datasets and evaluated
//! against oracle labels.
//!
//! The model sees the `(2r+1) × (2r+1)` RGB patch around a pixel (borders
//! clamp to the nearest edge pixel) and predicts that pixel's label.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::hoff::{Archive, Tensor};
use crate::image::{Grid, Image};
use crate::label_codec::{
    corrupt_depth, decode_grid, validity_mask, Task, TaskSpec, CORRUPT_DEPTH,
};
use crate::label_generator::{LabelPlane, TaskKind};
use crate::metrics::{pck_counts, MetricTable, NmseSums, RmseSums, SegCounts, PCK_ALPHAS};
use crate::net::{fit, DenseNet, FitParams, OptimState, TargetSet, Targets};
use crate::scene::{oracle_labels, render_image, Latent, SceneConfig};
use crate::synthesis::{label_from_tensor, sample_rng, tags, Manifest};
use crate::{Error, Result};

/// An image with per-pixel labels and optional per-value loss weights.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub labels: LabelPlane,
    pub weights: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownstreamParams {
    pub radius: usize,
    pub hidden: (usize, usize),
    pub epochs: usize,
    /// Pixels drawn per image in each epoch.
    pub pixels_per_image: usize,
    pub fit: FitParams,
    pub schedule: LrSchedule,
}

/// Learning rate across downstream epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − epoch / epochs)^0.9`.
    Poly,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f32 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Poly => (1.0 - epoch as f32 / epochs.max(1) as f32).powf(0.9),
        }
    }
}

impl Default for DownstreamParams {
    fn default() -> Self {
        DownstreamParams {
            radius: 3,
            hidden: (32, 16),
            epochs: 20,
            pixels_per_image: 256,
            fit: FitParams::default(),
            schedule: LrSchedule::Poly,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchModel {
    pub radius: usize,
    pub task: TaskKind,
    pub net: DenseNet,
    /// Mean training loss per epoch, finetuning included.
    pub history: Vec<f64>,
}

/// Anything that labels an image; lets evaluation run against stand-ins.
pub trait Labeler {
    fn label(&self, image: &Image) -> Result<LabelPlane>;
}

pub fn patch_width(radius: usize) -> usize {
    3 * (2 * radius + 1) * (2 * radius + 1) + 2
}

/// Append the centered patch around `(x, y)` to `out`, followed by the
/// pixel's coordinates scaled to `[-0.5, 0.5]`.
pub fn patch_input(image: &Image, x: usize, y: usize, radius: usize, out: &mut Vec<f32>) {
    let n = image.size() as isize;
    let r = radius as isize;
    let data = image.data();
    for dy in -r..=r {
        let yy = (y as isize + dy).clamp(0, n - 1) as usize;
        for dx in -r..=r {
            let xx = (x as isize + dx).clamp(0, n - 1) as usize;
            let i = (yy * image.size() + xx) * 3;
            out.extend(data[i..i + 3].iter().map(|v| v - 0.5));
        }
    }
    let span = (n - 1).max(1) as f32;
    out.push(x as f32 / span - 0.5);
    out.push(y as f32 / span - 0.5);
}

fn label_kind_matches(labels: &LabelPlane, task: TaskKind) -> bool {
    matches!(
        (labels, task),
        (LabelPlane::Classes(_), TaskKind::Discrete { .. })
            | (LabelPlane::Values { .. }, TaskKind::Continuous { .. })
    )
}

fn eligible(item: &LabeledImage, outputs: usize) -> Vec<usize> {
    let px = item.image.size() * item.image.size();
    match &item.weights {
        Some(w) => (0..px)
            .filter(|&p| w[p * outputs..(p + 1) * outputs].iter().any(|&v| v > 0.0))
            .collect(),
        None => (0..px).collect(),
    }
}

/// Gather inputs and targets for the given pixels of each image.
fn gather(
    data: &[LabeledImage],
    picks: &[Vec<usize>],
    radius: usize,
    task: TaskKind,
) -> Result<(Vec<f32>, TargetSet)> {
    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    let mut weighted = false;
    let out = task.output_width();
    for (item, pix) in data.iter().zip(picks) {
        if !label_kind_matches(&item.labels, task) {
            return Err(Error::Input(
                "label plane does not match the model task".into(),
            ));
        }
        if item.labels.size() != item.image.size() {
            return Err(Error::shape(
                "label plane",
                item.image.size(),
                item.labels.size(),
            ));
        }
        let size = item.image.size();
        for &p in pix {
            patch_input(&item.image, p % size, p / size, radius, &mut inputs);
            match (&item.labels, task) {
                (LabelPlane::Classes(g), _) => classes.push(g.data()[p]),
                (LabelPlane::Values { data, channels, .. }, TaskKind::Continuous { scale, .. }) => {
                    if *channels != out {
                        return Err(Error::shape("label channels", out, *channels));
                    }
                    values.extend(data[p * out..(p + 1) * out].iter().map(|v| v / scale));
                    match &item.weights {
                        Some(w) => {
                            weighted = true;
                            weights.extend_from_slice(&w[p * out..(p + 1) * out]);
                        }
                        None => weights.extend(std::iter::repeat_n(1.0, out)),
                    }
                }
                _ => unreachable!("kind checked above"),
            }
        }
    }
    let targets = match task {
        TaskKind::Discrete { .. } => TargetSet::Classes(classes),
        TaskKind::Continuous { outputs, .. } => TargetSet::Values {
            width: outputs,
            values,
            weights: weighted.then_some(weights),
        },
    };
    Ok((inputs, targets))
}

fn draw_pixels<R: Rng + ?Sized>(
    rng: &mut R,
    data: &[LabeledImage],
    outputs: usize,
    per_image: usize,
) -> Vec<Vec<usize>> {
    data.iter()
        .map(|item| {
            let pool = eligible(item, outputs);
            if per_image >= pool.len() {
                pool
            } else {
                sample_indices(rng, pool.len(), per_image)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            }
        })
        .collect()
}

/// Train a fresh patch model; each epoch draws new pixels from every image.
pub fn train_downstream<R: Rng + ?Sized>(
    rng: &mut R,
    data: &[LabeledImage],
    task: TaskKind,
    params: &DownstreamParams,
) -> Result<PatchModel> {
    if data.is_empty() {
        return Err(Error::Input(
            "downstream training needs at least one image".into(),
        ));
    }
    let widths = [
        patch_width(params.radius),
        params.hidden.0,
        params.hidden.1,
        task.output_width(),
    ];
    let net = DenseNet::new(&widths, rng)?;
    let mut model = PatchModel {
        radius: params.radius,
        task,
        net,
        history: Vec::new(),
    };
    let mut state = OptimState::new(params.fit.optimizer, params.fit.lr, &model.net);
    let one = FitParams {
        epochs: 1,
        ..params.fit
    };
    for epoch in 0..params.epochs {
        state.lr = params.fit.lr * params.schedule.factor(epoch, params.epochs);
        let picks = draw_pixels(rng, data, task.output_width(), params.pixels_per_image);
        let (inputs, targets) = gather(data, &picks, params.radius, task)?;
        if targets.is_empty() {
            return Err(Error::Input("no valid training pixels".into()));
        }
        let loss = fit(&mut model.net, &mut state, &inputs, &targets, &one, rng)?;
        model.history.extend(loss);
    }
    Ok(model)
}

/// Load the retained images and labels listed in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledImage>> {
    let manifest = Manifest::read(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(LabeledImage {
                image: Image::read_png(&root.join(&r.image_path))?,
                labels: label_from_tensor(&Tensor::read(&root.join(&r.label_path))?)?,
                weights: None,
            })
        })
        .collect()
}

pub fn train_downstream_from_manifest<R: Rng + ?Sized>(
    rng: &mut R,
    manifest: &Path,
    task: TaskKind,
    params: &DownstreamParams,
) -> Result<PatchModel> {
    let data = load_manifest(manifest)?;
    train_downstream(rng, &data, task, params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneParams {
    /// Full-batch steps over the fixed pixel set.
    pub steps: usize,
    pub lr: f32,
    pub pixels_per_image: usize,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            steps: 20,
            lr: 0.01,
            pixels_per_image: 512,
        }
    }
}

/// Continue training on the original labeled pool with full-batch gradient
/// steps over a fixed pixel sample. A step that would raise the loss is
/// retried at half the learning rate (up to eight times) or skipped, so the
/// recorded pool loss never increases.
pub fn finetune<R: Rng + ?Sized>(
    rng: &mut R,
    model: &mut PatchModel,
    pool: &[LabeledImage],
    params: &FinetuneParams,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Input("finetuning needs at least one image".into()));
    }
    if let Some(bad) = pool
        .iter()
        .find(|p| !label_kind_matches(&p.labels, model.task))
    {
        let _ = bad;
        return Err(Error::Input(
            "finetune pool labels do not match the model task".into(),
        ));
    }
    let picks = draw_pixels(
        rng,
        pool,
        model.task.output_width(),
        params.pixels_per_image,
    );
    let (inputs, targets) = gather(pool, &picks, model.radius, model.task)?;
    let n = targets.len();
    let t = targets.as_targets();
    let mut current = model.net.loss(&inputs, n, t)?;
    let mut trajectory = vec![current];
    for _ in 0..params.steps {
        let (_, grads) = model.net.backward(&inputs, n, t)?;
        let mut lr = params.lr;
        for _ in 0..9 {
            let mut trial = model.net.clone();
            let mut state = OptimState::new(crate::net::Optimizer::Sgd, lr, &trial);
            crate::net::step(&mut trial, &grads, &mut state)?;
            let loss = trial.loss(&inputs, n, t)?;
            if loss <= current {
                model.net = trial;
                current = loss;
                break;
            }
            lr *= 0.5;
        }
        trajectory.push(current);
    }
    model.history.extend(&trajectory[1..]);
    Ok(trajectory)
}

impl PatchModel {
    /// Raw network outputs for every pixel, row-major.
    pub fn outputs(&self, image: &Image) -> Result<Vec<f32>> {
        let size = image.size();
        let mut inputs = Vec::with_capacity(size * size * patch_width(self.radius));
        for y in 0..size {
            for x in 0..size {
                patch_input(image, x, y, self.radius, &mut inputs);
            }
        }
        self.net.forward(&inputs, size * size)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.insert_text(
            "manifest",
            &format!("radius = {}\ntask = {}\n", self.radius, self.task.to_text()),
        );
        self.net.write_to(&mut a, "");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let text = a.text("manifest")?;
        let bad = |why: String| Error::format("patch model manifest", why);
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| {
                    l.strip_prefix(key)
                        .and_then(|r| r.trim_start().strip_prefix('='))
                })
                .map(str::trim)
                .ok_or_else(|| bad(format!("missing `{key}`")))
        };
        let radius: usize = field("radius")?
            .parse()
            .map_err(|_| bad("bad radius".into()))?;
        let task = TaskKind::parse_text(field("task")?)?;
        let net = DenseNet::read_from(a, "")?;
        if net.input_width() != patch_width(radius) {
            return Err(Error::shape(
                "patch model input",
                patch_width(radius),
                net.input_width(),
            ));
        }
        if net.output_width() != task.output_width() {
            return Err(Error::shape(
                "patch model output",
                task.output_width(),
                net.output_width(),
            ));
        }
        Ok(PatchModel {
            radius,
            task,
            net,
            history: Vec::new(),
        })
    }
}

impl Labeler for PatchModel {
    fn label(&self, image: &Image) -> Result<LabelPlane> {
        let out = self.outputs(image)?;
        let size = image.size();
        match self.task {
            TaskKind::Discrete { classes } => {
                let labels = out
                    .chunks(classes)
                    .map(|row| {
                        let mut best = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = i;
                            }
                        }
                        best as u32
                    })
                    .collect();
                Ok(LabelPlane::Classes(Grid::from_vec(size, labels)?))
            }
            TaskKind::Continuous { outputs, scale } => Ok(LabelPlane::Values {
                size,
                channels: outputs,
                data: out.into_iter().map(|v| v * scale).collect(),
            }),
        }
    }
}

/// Test-set conditions for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    pub task: TaskSpec,
    /// Seed for the corruption pattern of the depth ground truth.
    pub seed: u64,
    pub corrupt_fraction: f64,
}

/// Render each test latent, label it, and score against the oracle. Rows are
/// named by test index; the final `all` row pools counts over the test set.
pub fn evaluate_downstream<L: Labeler + Sync>(
    labeler: &L,
    test: &[Latent],
    config: &SceneConfig,
    spec: &EvalSpec,
) -> Result<MetricTable> {
    let classes = spec.task.classes;
    enum Row {
        Seg(SegCounts),
        Kp(Option<Vec<(usize, usize)>>),
        Depth(NmseSums, RmseSums),
    }
    let rows: Vec<Row> = test
        .par_iter()
        .enumerate()
        .map(|(i, latent)| {
            let image = render_image(latent, config)?.quantized();
            let oracle = oracle_labels(latent, config)?;
            let pred = labeler.label(&image)?;
            match spec.task.task {
                Task::Segmentation => {
                    let g = pred.classes().ok_or_else(|| {
                        Error::Input("segmentation labeler returned values".into())
                    })?;
                    let mut c = SegCounts::new(classes);
                    c.add(g, &oracle.segmentation)?;
                    Ok(Row::Seg(c))
                }
                Task::Keypoints => {
                    let k = oracle.keypoints.len();
                    let truth: Vec<(f64, f64)> =
                        oracle.keypoints.iter().map(|p| (p.x, p.y)).collect();
                    let vis: Vec<bool> = oracle.keypoints.iter().map(|p| p.visible).collect();
                    if !vis.iter().any(|&v| v) {
                        return Ok(Row::Kp(None));
                    }
                    let predicted: Vec<(f64, f64)> = (0..k)
                        .map(|c| {
                            let grid = pred.channel(c).ok_or_else(|| {
                                Error::Input(format!("keypoint labeler lacks channel {c}"))
                            })?;
                            let peak = decode_grid(grid.data(), grid.size());
                            Ok((peak.x as f64, peak.y as f64))
                        })
                        .collect::<Result<_>>()?;
                    let counts = PCK_ALPHAS
                        .iter()
                        .map(|&a| pck_counts(&predicted, &truth, &vis, a))
                        .collect::<Result<_>>()?;
                    Ok(Row::Kp(Some(counts)))
                }
                Task::Depth => {
                    let d = pred
                        .channel(0)
                        .ok_or_else(|| Error::Input("depth labeler returned no values".into()))?;
                    let mut rng = sample_rng(spec.seed, tags::CORRUPTION, i as u64);
                    let corrupted = corrupt_depth(&mut rng, &oracle.depth, spec.corrupt_fraction);
                    let valid = validity_mask(&corrupted, CORRUPT_DEPTH);
                    let mut n = NmseSums::default();
                    n.add(&d, &corrupted, &valid)?;
                    let mut r = RmseSums::default();
                    r.add(&d, &oracle.depth)?;
                    Ok(Row::Depth(n, r))
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut table = match spec.task.task {
        Task::Segmentation => MetricTable::segmentation(classes),
        Task::Keypoints => MetricTable::keypoints(),
        Task::Depth => MetricTable::depth(),
    };
    match spec.task.task {
        Task::Segmentation => {
            let mut total = SegCounts::new(classes);
            for (i, row) in rows.iter().enumerate() {
                let Row::Seg(c) = row else { unreachable!() };
                let s = c.finish()?;
                let mut vals = vec![Some(s.miou)];
                vals.extend(s.per_class);
                table.push(i.to_string(), vals)?;
                for k in 0..classes {
                    total.intersection[k] += c.intersection[k];
                    total.union[k] += c.union[k];
                }
            }
            let s = total.finish()?;
            let mut vals = vec![Some(s.miou)];
            vals.extend(s.per_class);
            table.push("all", vals)?;
        }
        Task::Keypoints => {
            let mut total = vec![(0usize, 0usize); PCK_ALPHAS.len()];
            for (i, row) in rows.iter().enumerate() {
                let Row::Kp(c) = row else { unreachable!() };
                let vals = match c {
                    Some(c) => {
                        for (t, &(a, b)) in total.iter_mut().zip(c) {
                            t.0 += a;
                            t.1 += b;
                        }
                        c.iter().map(|&(a, b)| Some(a as f64 / b as f64)).collect()
                    }
                    None => vec![None; PCK_ALPHAS.len()],
                };
                table.push(i.to_string(), vals)?;
            }
            if total[0].1 == 0 {
                return Err(Error::Input("no visible keypoints in the test set".into()));
            }
            table.push(
                "all",
                total
                    .iter()
                    .map(|&(a, b)| Some(a as f64 / b as f64))
                    .collect(),
            )?;
        }
        Task::Depth => {
            let mut n_total = NmseSums::default();
            let mut r_total = RmseSums::default();
            for (i, row) in rows.iter().enumerate() {
                let Row::Depth(n, r) = row else {
                    unreachable!()
                };
                let (rmse, rmse_log) = r.finish()?;
                table.push(
                    i.to_string(),
                    vec![n.finish().ok(), Some(rmse), Some(rmse_log)],
                )?;
                n_total.error += n.error;
                n_total.norm += n.norm;
                n_total.count += n.count;
                r_total.squared += r.squared;
                r_total.squared_log += r.squared_log;
                r_total.count += r.count;
            }
            let (rmse, rmse_log) = r_total.finish()?;
            table.push(
                "all",
                vec![Some(n_total.finish()?), Some(rmse), Some(rmse_log)],
            )?;
        }
    }
    Ok(table)
}

/// Training loss of a model on a labeled set, over every eligible pixel.
pub fn pool_loss(model: &PatchModel, data: &[LabeledImage]) -> Result<f64> {
    let picks: Vec<Vec<usize>> = data
        .iter()
        .map(|d| eligible(d, model.task.output_width()))
        .collect();
    let (inputs, targets) = gather(data, &picks, model.radius, model.task)?;
    let t: Targets<'_> = targets.as_targets();
    model.net.loss(&inputs, targets.len(), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_clamps_at_borders() {
        let img = Image::from_vec(
            2,
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.25],
        )
        .unwrap();
        let mut out = Vec::new();
        patch_input(&img, 0, 0, 1, &mut out);
        assert_eq!(out.len(), patch_width(1));
        // Top-left neighbor clamps to pixel (0, 0).
        assert_eq!(&out[..3], &[-0.5, -0.4, -0.3]);
        // Center is pixel (0, 0) as well.
        assert_eq!(&out[12..15], &[-0.5, -0.4, -0.3]);
        // Bottom-right neighbor is pixel (1, 1).
        assert_eq!(&out[24..27], &[0.9 - 0.5, 1.0 - 0.5, 0.25 - 0.5]);
        assert_eq!(&out[27..], &[-0.5, -0.5]);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = vec![LabeledImage {
            image: Image::filled(4, [0.5; 3]),
            labels: LabelPlane::Classes(Grid::filled(4, 1)),
            weights: None,
        }];
        let params = DownstreamParams {
            epochs: 0,
            ..DownstreamParams::default()
        };
        let task = TaskKind::Discrete { classes: 2 };
        let m = train_downstream(&mut ChaCha8Rng::seed_from_u64(2), &data, task, &params).unwrap();
        let init = DenseNet::new(
            &[patch_width(3), 32, 16, 2],
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(m.net, init);
    }

    #[test]
    fn finetune_rejects_task_mismatch() {
        let pool = vec![LabeledImage {
            image: Image::filled(4, [0.5; 3]),
            labels: LabelPlane::Values {
                size: 4,
                channels: 1,
                data: vec![1.0; 16],
            },
            weights: None,
        }];
        let mut m = PatchModel {
            radius: 1,
            task: TaskKind::Discrete { classes: 2 },
            net: DenseNet::zeros(&[27, 4, 4, 2]).unwrap(),
            history: vec![],
        };
        let r = finetune(
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut m,
            &pool,
            &FinetuneParams::default(),
        );
        assert!(r.is_err());
    }
}
