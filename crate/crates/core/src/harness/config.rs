//! Experiment configuration.
//!
//! Files are plain text: `key = value` lines grouped under `[section]`
//! headers, `#` starting a comment. Keys outside any section live in the
//! top-level namespace (`seed`, `task`). Every key has a default, so an empty
//! file is a valid configuration. Lists are comma-separated; sweep values are
//! separated by `;` when they themselves contain commas.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::downstream::{DownstreamParams, FinetuneParams, LrSchedule};
use crate::inversion::{EncoderParams, InversionParams, PerceptualKind};
use crate::label_codec::{Task, TaskSpec};
use crate::label_generator::{EnsembleParams, PixelSampling};
use crate::net::{FitParams, Optimizer};
use crate::scene::{Layout, SceneConfig};
use crate::synthesis::PoolSpec;
use crate::{Error, Result};

/// Ablation axes and the key each one sweeps.
pub const AXES: [(&str, &str); 7] = [
    ("channel_caps", "label_generator.channel_caps"),
    ("ensemble_size", "label_generator.members"),
    ("mlp_widths", "label_generator.hidden"),
    ("pool_size", "pool.size"),
    ("refine_iters", "inversion.iterations"),
    ("dataset_size", "synthesis.n"),
    ("filter_fraction", "synthesis.filter_fraction"),
];

pub fn axis_key(axis: &str) -> Result<&'static str> {
    AXES.iter()
        .find(|(a, _)| *a == axis)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let names: Vec<&str> = AXES.iter().map(|(a, _)| *a).collect();
            Error::Config(format!(
                "unknown sweep axis `{axis}` (expected one of {})",
                names.join(", ")
            ))
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LongtailMode {
    Substitute,
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongtailConfig {
    pub mode: LongtailMode,
    /// Substitution: fractions of the pool showing the rare class.
    pub proportions: Vec<f64>,
    /// Addition: numbers of images added to the rare-free base.
    pub counts: Vec<usize>,
}

impl Default for LongtailConfig {
    fn default() -> Self {
        LongtailConfig {
            mode: LongtailMode::Substitute,
            proportions: vec![1.0 / 16.0, 0.25, 0.5],
            counts: vec![4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    pub heatmap_sigma: f64,
    pub scene: SceneConfig,
    pub pool_size: usize,
    /// Explicit pool composition, set by long-tail sweeps.
    pub pool: Option<PoolSpec>,
    pub encoder_pairs: usize,
    pub encoder: EncoderParams,
    pub inversion: InversionParams,
    pub ensemble: EnsembleParams,
    pub channel_caps: Option<Vec<usize>>,
    pub n: usize,
    pub filter_fraction: f64,
    pub downstream: DownstreamParams,
    pub finetune: Option<FinetuneParams>,
    pub test_size: usize,
    pub test_rare_bias: Option<f64>,
    pub corrupt_fraction: f64,
    /// Also train a downstream model on unfiltered single-member labels.
    pub baseline: bool,
    pub sweep: Option<Sweep>,
    pub longtail: LongtailConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            task: Task::Segmentation,
            heatmap_sigma: 1.5,
            scene: SceneConfig::default(),
            pool_size: 50,
            pool: None,
            encoder_pairs: 20000,
            encoder: EncoderParams::default(),
            inversion: InversionParams::default(),
            ensemble: EnsembleParams::default(),
            channel_caps: None,
            n: 1000,
            filter_fraction: 0.1,
            downstream: DownstreamParams::default(),
            finetune: None,
            test_size: 100,
            test_rare_bias: None,
            corrupt_fraction: 0.25,
            baseline: false,
            sweep: None,
            longtail: LongtailConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "expected true or false for `{key}`, got `{value}`"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, value)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!(
            "`{key}` needs two widths, got `{value}`"
        ))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::Adam { .. } => "adam",
    }
}

fn parse_optimizer(key: &str, value: &str) -> Result<Optimizer> {
    match value {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::adam()),
        _ => Err(Error::Config(format!(
            "unknown optimizer `{value}` for `{key}`"
        ))),
    }
}

fn fit_entries(prefix: &str, fit: &FitParams, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.epochs"), fit.epochs.to_string()));
    out.push((format!("{prefix}.batch_size"), fit.batch_size.to_string()));
    out.push((format!("{prefix}.lr"), fit.lr.to_string()));
    out.push((
        format!("{prefix}.optimizer"),
        optimizer_name(fit.optimizer).into(),
    ));
}

fn set_fit(fit: &mut FitParams, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => fit.epochs = parse(key, value)?,
        "batch_size" => fit.batch_size = parse(key, value)?,
        "lr" => fit.lr = parse(key, value)?,
        "optimizer" => fit.optimizer = parse_optimizer(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", i + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let handled = match key.split_once('.') {
            None => match key {
                "seed" => {
                    self.seed = parse(key, value)?;
                    true
                }
                "task" => {
                    self.task = value.parse()?;
                    true
                }
                _ => false,
            },
            Some((section, field)) => self.set_in(section, field, key, value)?,
        };
        if handled {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    fn set_in(&mut self, section: &str, field: &str, key: &str, value: &str) -> Result<bool> {
        match (section, field) {
            ("task", "heatmap_sigma") => self.heatmap_sigma = parse(key, value)?,
            ("scene", "resolution") => {
                let r: usize = parse(key, value)?;
                let fresh = SceneConfig::new(r, self.scene.slots, self.scene.classes);
                self.scene.resolution = r;
                self.scene.block_channels = fresh.block_channels;
            }
            ("scene", "slots") => {
                self.scene.slots = parse(key, value)?;
                self.scene.block_channels = vec![self.scene.bank_channels(); self.scene.blocks()];
            }
            ("scene", "classes") => {
                self.scene.classes = parse(key, value)?;
                self.scene.rare_class = self.scene.classes.saturating_sub(1);
                self.scene.block_channels = vec![self.scene.bank_channels(); self.scene.blocks()];
            }
            ("scene", "block_channels") => self.scene.block_channels = parse_list(key, value)?,
            ("scene", "tau") => self.scene.tau = parse(key, value)?,
            ("scene", "rare_class") => self.scene.rare_class = parse(key, value)?,
            ("scene", "rare_frequency") => self.scene.rare_frequency = parse(key, value)?,
            ("scene", "layout") => {
                self.scene.layout = match value {
                    "free" => Layout::Free,
                    "anchored" => Layout::Anchored,
                    _ => return Err(Error::Config(format!("unknown layout `{value}`"))),
                }
            }
            ("pool", "size") => self.pool_size = parse(key, value)?,
            ("encoder", "pairs") => self.encoder_pairs = parse(key, value)?,
            ("encoder", "hidden") => self.encoder.hidden = parse_pair(key, value)?,
            ("encoder", "validation_pairs") => self.encoder.validation_pairs = parse(key, value)?,
            ("encoder", "rare_frequency") => {
                self.encoder.rare_frequency = parse_optional(key, value)?
            }
            ("encoder", f) => return set_fit(&mut self.encoder.fit, f, key, value),
            ("inversion", "c_reg") => self.inversion.c_reg = parse(key, value)?,
            ("inversion", "lambda_l2") => self.inversion.lambda_l2 = parse(key, value)?,
            ("inversion", "iterations") => self.inversion.iterations = parse(key, value)?,
            ("inversion", "step_size") => self.inversion.step_size = parse(key, value)?,
            ("inversion", "backtracking") => self.inversion.backtracking = parse_bool(key, value)?,
            ("inversion", "perceptual") => {
                self.inversion.perceptual = match value {
                    "multiscale" => PerceptualKind::MultiscaleL2,
                    "none" => PerceptualKind::None,
                    _ => return Err(Error::Config(format!("unknown perceptual loss `{value}`"))),
                }
            }
            ("label_generator", "members") => self.ensemble.members = parse(key, value)?,
            ("label_generator", "hidden") => self.ensemble.hidden = parse_pair(key, value)?,
            ("label_generator", "pixels_per_image") => {
                self.ensemble.pixels_per_image = parse(key, value)?
            }
            ("label_generator", "sampling") => {
                self.ensemble.sampling = match value {
                    "uniform" => PixelSampling::Uniform,
                    "balanced" => PixelSampling::ClassBalanced,
                    _ => return Err(Error::Config(format!("unknown pixel sampling `{value}`"))),
                }
            }
            ("label_generator", "channel_caps") => {
                self.channel_caps = if value == "none" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            ("label_generator", f) => return set_fit(&mut self.ensemble.fit, f, key, value),
            ("synthesis", "n") => self.n = parse(key, value)?,
            ("synthesis", "filter_fraction") => self.filter_fraction = parse(key, value)?,
            ("downstream", "radius") => self.downstream.radius = parse(key, value)?,
            ("downstream", "hidden") => self.downstream.hidden = parse_pair(key, value)?,
            ("downstream", "epochs") => self.downstream.epochs = parse(key, value)?,
            ("downstream", "pixels_per_image") => {
                self.downstream.pixels_per_image = parse(key, value)?
            }
            ("downstream", "batch_size") => self.downstream.fit.batch_size = parse(key, value)?,
            ("downstream", "lr") => self.downstream.fit.lr = parse(key, value)?,
            ("downstream", "optimizer") => {
                self.downstream.fit.optimizer = parse_optimizer(key, value)?
            }
            ("downstream", "lr_schedule") => {
                self.downstream.schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "poly" => LrSchedule::Poly,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown learning-rate schedule `{value}`"
                        )))
                    }
                }
            }
            ("downstream", "finetune") => {
                self.finetune = if parse_bool(key, value)? {
                    Some(self.finetune.unwrap_or_default())
                } else {
                    None
                }
            }
            ("downstream", "finetune_steps") => self.finetune_mut().steps = parse(key, value)?,
            ("downstream", "finetune_lr") => self.finetune_mut().lr = parse(key, value)?,
            ("downstream", "finetune_pixels") => {
                self.finetune_mut().pixels_per_image = parse(key, value)?
            }
            ("evaluation", "test_size") => self.test_size = parse(key, value)?,
            ("evaluation", "rare_bias") => self.test_rare_bias = parse_optional(key, value)?,
            ("evaluation", "corrupt_fraction") => self.corrupt_fraction = parse(key, value)?,
            ("evaluation", "baseline") => self.baseline = parse_bool(key, value)?,
            ("sweep", "axis") => {
                axis_key(value)?;
                let values = self.sweep.take().map(|s| s.values).unwrap_or_default();
                self.sweep = Some(Sweep {
                    axis: value.to_string(),
                    values,
                });
            }
            ("sweep", "values") => {
                let sep = if value.contains(';') { ';' } else { ',' };
                let values: Vec<String> = value
                    .split(sep)
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                match &mut self.sweep {
                    Some(s) => s.values = values,
                    None => {
                        self.sweep = Some(Sweep {
                            axis: String::new(),
                            values,
                        })
                    }
                }
            }
            ("longtail", "mode") => {
                self.longtail.mode = match value {
                    "substitute" => LongtailMode::Substitute,
                    "add" => LongtailMode::Add,
                    _ => return Err(Error::Config(format!("unknown long-tail mode `{value}`"))),
                }
            }
            ("longtail", "proportions") => self.longtail.proportions = parse_list(key, value)?,
            ("longtail", "counts") => self.longtail.counts = parse_list(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn finetune_mut(&mut self) -> &mut FinetuneParams {
        self.finetune.get_or_insert_with(FinetuneParams::default)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_scene().validate()?;
        self.inversion.validate()?;
        let positive = [
            ("pool.size", self.pool_size),
            ("encoder.pairs", self.encoder_pairs),
            ("label_generator.members", self.ensemble.members),
            (
                "label_generator.pixels_per_image",
                self.ensemble.pixels_per_image,
            ),
            ("label_generator.batch_size", self.ensemble.fit.batch_size),
            ("encoder.batch_size", self.encoder.fit.batch_size),
            ("synthesis.n", self.n),
            (
                "downstream.pixels_per_image",
                self.downstream.pixels_per_image,
            ),
            ("downstream.batch_size", self.downstream.fit.batch_size),
            ("evaluation.test_size", self.test_size),
            (
                "encoder.hidden",
                self.encoder.hidden.0.min(self.encoder.hidden.1),
            ),
            (
                "label_generator.hidden",
                self.ensemble.hidden.0.min(self.ensemble.hidden.1),
            ),
            (
                "downstream.hidden",
                self.downstream.hidden.0.min(self.downstream.hidden.1),
            ),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        for (k, lr) in [
            ("encoder.lr", self.encoder.fit.lr),
            ("label_generator.lr", self.ensemble.fit.lr),
            ("downstream.lr", self.downstream.fit.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.filter_fraction) {
            return Err(Error::Config(format!(
                "filter fraction must be in [0, 1), got {}",
                self.filter_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt fraction must be in [0, 1), got {}",
                self.corrupt_fraction
            )));
        }
        if let Some(b) = self.test_rare_bias {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "rare bias must be in [0, 1], got {b}"
                )));
            }
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "heatmap sigma must be positive, got {}",
                self.heatmap_sigma
            )));
        }
        if let Some(caps) = &self.channel_caps {
            if caps.len() != self.scene.blocks() {
                return Err(Error::Config(format!(
                    "{} channel caps given for {} blocks",
                    caps.len(),
                    self.scene.blocks()
                )));
            }
        }
        if let Some(ft) = &self.finetune {
            if !(ft.lr > 0.0 && ft.lr.is_finite()) || ft.pixels_per_image == 0 {
                return Err(Error::Config(
                    "finetune needs a positive learning rate and pixel count".into(),
                ));
            }
        }
        if let Some(s) = &self.sweep {
            axis_key(&s.axis)?;
            if s.values.is_empty() {
                return Err(Error::Config("sweep values must be non-empty".into()));
            }
        }
        if let Some(p) = &self.pool {
            p.validate()?;
        }
        if self
            .longtail
            .proportions
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config(
                "long-tail proportions must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_scene(&self) -> SceneConfig {
        self.scene.clone()
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            task: self.task,
            classes: self.scene.classes,
            keypoints: self.scene.slots,
            heatmap_sigma: self.heatmap_sigma,
        }
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| e.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("task", self.task.to_string());
        push("task.heatmap_sigma", self.heatmap_sigma.to_string());
        push("scene.resolution", self.scene.resolution.to_string());
        push("scene.slots", self.scene.slots.to_string());
        push("scene.classes", self.scene.classes.to_string());
        push("scene.block_channels", join(&self.scene.block_channels));
        push("scene.tau", self.scene.tau.to_string());
        push("scene.rare_class", self.scene.rare_class.to_string());
        push(
            "scene.rare_frequency",
            self.scene.rare_frequency.to_string(),
        );
        push(
            "scene.layout",
            match self.scene.layout {
                Layout::Free => "free",
                Layout::Anchored => "anchored",
            }
            .into(),
        );
        push("pool.size", self.pool_size.to_string());
        push(
            "pool.spec",
            match self.pool {
                None => "natural".into(),
                Some(PoolSpec::Substitute {
                    base_size,
                    proportion,
                }) => format!("substitute {base_size} {proportion}"),
                Some(PoolSpec::Add {
                    base_size,
                    rare_present,
                    rare_absent,
                }) => format!("add {base_size} {rare_present} {rare_absent}"),
            },
        );
        push("encoder.pairs", self.encoder_pairs.to_string());
        push(
            "encoder.hidden",
            join(&[self.encoder.hidden.0, self.encoder.hidden.1]),
        );
        push(
            "encoder.validation_pairs",
            self.encoder.validation_pairs.to_string(),
        );
        push(
            "encoder.rare_frequency",
            self.encoder
                .rare_frequency
                .map_or("none".into(), |f| f.to_string()),
        );
        let mut fits = Vec::new();
        fit_entries("encoder", &self.encoder.fit, &mut fits);
        push("inversion.c_reg", self.inversion.c_reg.to_string());
        push("inversion.lambda_l2", self.inversion.lambda_l2.to_string());
        push(
            "inversion.iterations",
            self.inversion.iterations.to_string(),
        );
        push("inversion.step_size", self.inversion.step_size.to_string());
        push(
            "inversion.backtracking",
            self.inversion.backtracking.to_string(),
        );
        push(
            "inversion.perceptual",
            match self.inversion.perceptual {
                PerceptualKind::MultiscaleL2 => "multiscale",
                PerceptualKind::None => "none",
            }
            .into(),
        );
        push("label_generator.members", self.ensemble.members.to_string());
        push(
            "label_generator.hidden",
            join(&[self.ensemble.hidden.0, self.ensemble.hidden.1]),
        );
        push(
            "label_generator.pixels_per_image",
            self.ensemble.pixels_per_image.to_string(),
        );
        push(
            "label_generator.sampling",
            match self.ensemble.sampling {
                PixelSampling::Uniform => "uniform",
                PixelSampling::ClassBalanced => "balanced",
            }
            .into(),
        );
        push(
            "label_generator.channel_caps",
            self.channel_caps.as_deref().map_or("none".into(), join),
        );
        fit_entries("label_generator", &self.ensemble.fit, &mut fits);
        push("synthesis.n", self.n.to_string());
        push(
            "synthesis.filter_fraction",
            self.filter_fraction.to_string(),
        );
        push("downstream.radius", self.downstream.radius.to_string());
        push(
            "downstream.hidden",
            join(&[self.downstream.hidden.0, self.downstream.hidden.1]),
        );
        push("downstream.epochs", self.downstream.epochs.to_string());
        push(
            "downstream.pixels_per_image",
            self.downstream.pixels_per_image.to_string(),
        );
        push(
            "downstream.batch_size",
            self.downstream.fit.batch_size.to_string(),
        );
        push("downstream.lr", self.downstream.fit.lr.to_string());
        push(
            "downstream.optimizer",
            optimizer_name(self.downstream.fit.optimizer).into(),
        );
        push(
            "downstream.lr_schedule",
            match self.downstream.schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::Poly => "poly",
            }
            .into(),
        );
        push("downstream.finetune", self.finetune.is_some().to_string());
        if let Some(ft) = &self.finetune {
            push("downstream.finetune_steps", ft.steps.to_string());
            push("downstream.finetune_lr", ft.lr.to_string());
            push(
                "downstream.finetune_pixels",
                ft.pixels_per_image.to_string(),
            );
        }
        push("evaluation.test_size", self.test_size.to_string());
        push(
            "evaluation.rare_bias",
            self.test_rare_bias.map_or("none".into(), |b| b.to_string()),
        );
        push(
            "evaluation.corrupt_fraction",
            self.corrupt_fraction.to_string(),
        );
        push("evaluation.baseline", self.baseline.to_string());
        e.extend(fits);
        e.sort();
        e
    }

    /// Canonical text form of the experiment settings (sweeps excluded).
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: &str, value: &str) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        c.set(axis_key(axis)?, value)?;
        c.validate()?;
        Ok(c)
    }
}

/// Keys whose values differ between two configurations.
pub fn differing_keys(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let ea = a.entries();
    let eb = b.entries();
    let mut keys: Vec<String> = ea
        .iter()
        .filter(|(k, v)| {
            eb.iter()
                .find(|(k2, _)| k2 == k)
                .is_none_or(|(_, v2)| v2 != v)
        })
        .map(|(k, _)| k.clone())
        .collect();
    keys.extend(
        eb.iter()
            .filter(|(k, _)| !ea.iter().any(|(k2, _)| k2 == k))
            .map(|(k, _)| k.clone()),
    );
    keys
}
