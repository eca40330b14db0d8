//! End-to-end experiment pipeline.
//!
//! Stages run in order: labeled pool, encoder, inversion, hypercolumns,
//! label-generator ensemble, synthesis with filtering, downstream training
//! (plus optional finetuning) and evaluation. Every stage draws from its own
//! tagged random stream of the run seed.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::downstream::{
    evaluate_downstream, finetune, train_downstream, EvalSpec, LabeledImage, PatchModel,
};
use crate::hypercolumn;
use crate::inversion::{refine, train_encoder, Encoder, InversionResult};
use crate::label_codec::corrupt_depth;
use crate::label_generator::{train_ensemble, EnsembleModel, TrainingImage};
use crate::metrics::MetricTable;
use crate::scene::{render_features, render_image, sample_latent, Latent};
use crate::synthesis::{
    build_pool, natural_pool, sample_rng, synthesize, tags, write_dataset, PoolItem, Sample,
    SynthesisParams, Synthesized,
};
use crate::{Error, Result};

fn latent_key(l: &Latent) -> Vec<u64> {
    l.0.iter().map(|v| v.to_bits()).collect()
}

/// Encoders and inversions shared between runs that agree on the settings
/// they depend on.
#[derive(Default)]
pub struct Session {
    encoders: Mutex<HashMap<String, Encoder>>,
    inversions: Mutex<HashMap<(String, Vec<u64>), InversionResult>>,
}

fn prefixed(cfg: &ExperimentConfig, prefixes: &[&str]) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| {
            k == "seed"
                || k == "scene.layout"
                || k == "task"
                || prefixes.iter().any(|p| k.starts_with(p))
        })
        .map(|(k, v)| format!("{k}={v};"))
        .collect()
}

impl Session {
    pub fn encoder(&self, cfg: &ExperimentConfig) -> Result<Encoder> {
        let key = prefixed(cfg, &["scene.", "encoder."]);
        if let Some(e) = self.encoders.lock().expect("encoder cache lock").get(&key) {
            return Ok(e.clone());
        }
        let mut rng = sample_rng(cfg.seed, tags::ENCODER, 0);
        let enc = train_encoder(
            &mut rng,
            &cfg.resolved_scene(),
            cfg.encoder_pairs,
            &cfg.encoder,
        )?;
        self.encoders
            .lock()
            .expect("encoder cache lock")
            .insert(key, enc.clone());
        Ok(enc)
    }

    /// Refine every pool item's image from the encoder's estimate.
    pub fn invert(
        &self,
        cfg: &ExperimentConfig,
        encoder: &Encoder,
        items: &[PoolItem],
    ) -> Result<Vec<InversionResult>> {
        let key = prefixed(cfg, &["scene.", "encoder.", "inversion."]);
        let scene = cfg.resolved_scene();
        items
            .par_iter()
            .map(|item| {
                let k = (key.clone(), latent_key(&item.latent));
                if let Some(r) = self
                    .inversions
                    .lock()
                    .expect("inversion cache lock")
                    .get(&k)
                {
                    return Ok(r.clone());
                }
                let image = render_image(&item.latent, &scene)?.quantized();
                let w_e = encoder.predict(&image)?;
                let r = refine(&image, &w_e, &cfg.inversion, &scene)?;
                self.inversions
                    .lock()
                    .expect("inversion cache lock")
                    .insert(k, r.clone());
                Ok(r)
            })
            .collect()
    }
}

/// The labeled pool: an explicit composition when given, else natural draws.
pub fn labeled_pool(cfg: &ExperimentConfig) -> Result<Vec<PoolItem>> {
    let scene = cfg.resolved_scene();
    match &cfg.pool {
        Some(spec) => build_pool(cfg.seed, &scene, spec),
        None => natural_pool(cfg.seed, tags::POOL_BASE, &scene, cfg.pool_size, None),
    }
}

pub fn test_latents(cfg: &ExperimentConfig) -> Result<Vec<Latent>> {
    let scene = cfg.resolved_scene();
    (0..cfg.test_size)
        .into_par_iter()
        .map(|i| {
            sample_latent(
                &mut sample_rng(cfg.seed, tags::TEST, i as u64),
                &scene,
                cfg.test_rare_bias,
            )
        })
        .collect()
}

/// Depth grid with the pool's corruption pattern, for depth tasks.
fn pool_depth_override(
    cfg: &ExperimentConfig,
    index: usize,
    item: &PoolItem,
) -> Option<crate::image::Grid<f32>> {
    (cfg.task == crate::label_codec::Task::Depth).then(|| {
        let mut rng = sample_rng(cfg.seed, tags::POOL_CORRUPTION, index as u64);
        corrupt_depth(&mut rng, &item.labels.depth, cfg.corrupt_fraction)
    })
}

/// Hypercolumns of the inverted latents paired with the pool's labels.
pub fn training_images(
    cfg: &ExperimentConfig,
    items: &[PoolItem],
    inversions: &[InversionResult],
) -> Result<Vec<TrainingImage>> {
    let scene = cfg.resolved_scene();
    let spec = cfg.task_spec();
    items
        .par_iter()
        .zip(inversions)
        .enumerate()
        .map(|(i, (item, inv))| {
            let features = render_features(&inv.latent, &scene)?;
            let field =
                hypercolumn::build(&features, scene.resolution, cfg.channel_caps.as_deref())?;
            let depth = pool_depth_override(cfg, i, item);
            let (labels, weights) = spec.training_labels(&item.labels, depth.as_ref())?;
            Ok(TrainingImage {
                field,
                labels,
                weights,
            })
        })
        .collect()
}

/// Original pool images with their (possibly corrupted) labels.
pub fn pool_images(cfg: &ExperimentConfig, items: &[PoolItem]) -> Result<Vec<LabeledImage>> {
    let scene = cfg.resolved_scene();
    let spec = cfg.task_spec();
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let depth = pool_depth_override(cfg, i, item);
            let (labels, weights) = spec.training_labels(&item.labels, depth.as_ref())?;
            Ok(LabeledImage {
                image: render_image(&item.latent, &scene)?.quantized(),
                labels,
                weights,
            })
        })
        .collect()
}

pub fn train_label_generator(
    cfg: &ExperimentConfig,
    images: &[TrainingImage],
) -> Result<EnsembleModel> {
    let mut rng = sample_rng(cfg.seed, tags::ENSEMBLE, 0);
    train_ensemble(&mut rng, images, cfg.task_spec().kind(), &cfg.ensemble)
}

pub fn synthesize_dataset(
    cfg: &ExperimentConfig,
    model: &EnsembleModel,
    filter_fraction: f64,
) -> Result<Synthesized> {
    let params = SynthesisParams {
        n: cfg.n,
        filter_fraction,
        channel_caps: cfg.channel_caps.clone(),
    };
    synthesize(cfg.seed, &cfg.resolved_scene(), model, &params)
}

pub fn labeled_samples(samples: &[Sample]) -> Vec<LabeledImage> {
    samples
        .iter()
        .map(|s| LabeledImage {
            image: s.image.clone(),
            labels: s.labels.clone(),
            weights: None,
        })
        .collect()
}

/// Train the downstream model, finetune it when configured, and evaluate.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    data: &[LabeledImage],
    pool: &[LabeledImage],
    test: &[Latent],
) -> Result<(PatchModel, Option<Vec<f64>>, MetricTable)> {
    let mut rng = sample_rng(cfg.seed, tags::DOWNSTREAM, 0);
    let mut model = train_downstream(&mut rng, data, cfg.task_spec().kind(), &cfg.downstream)
        .map_err(|e| e.in_stage("downstream"))?;
    let ft = match &cfg.finetune {
        Some(params) => {
            let mut rng = sample_rng(cfg.seed, tags::FINETUNE, 0);
            Some(finetune(&mut rng, &mut model, pool, params).map_err(|e| e.in_stage("finetune"))?)
        }
        None => None,
    };
    let spec = EvalSpec {
        task: cfg.task_spec(),
        seed: cfg.seed,
        corrupt_fraction: cfg.corrupt_fraction,
    };
    let table = evaluate_downstream(&model, test, &cfg.resolved_scene(), &spec)
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok((model, ft, table))
}

/// Summary of one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub metrics: MetricTable,
    pub baseline: Option<MetricTable>,
    /// Mean final inversion objective over the pool.
    pub inversion_loss: f64,
    pub retained: usize,
    pub rejected: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn series_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

fn inversion_csv(results: &[InversionResult]) -> String {
    let mut s =
        String::from("item,initial_error,reconstruction_error,initial_objective,final_objective\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            r.initial_error,
            r.reconstruction_error,
            r.trajectory[0],
            r.trajectory[r.trajectory.len() - 1]
        );
    }
    s
}

fn check_disjoint(test: &[Latent], pool: &[PoolItem], synth: &Synthesized) -> Result<()> {
    let used: HashSet<Vec<u64>> = pool
        .iter()
        .map(|p| latent_key(&p.latent))
        .chain(
            synth
                .retained
                .iter()
                .chain(&synth.rejected)
                .map(|s| latent_key(&s.latent)),
        )
        .collect();
    if test.iter().any(|t| used.contains(&latent_key(t))) {
        return Err(Error::Input(
            "a test latent also appears in training data".into(),
        ));
    }
    Ok(())
}

/// Run every stage and write artifacts under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    run_experiment_in(cfg, out, &Session::default())
}

pub fn run_experiment_in(cfg: &ExperimentConfig, out: &Path, session: &Session) -> Result<Outcome> {
    cfg.validate()?;
    create_dir(out)?;
    let hash = cfg.hash();
    write_text(
        &out.join("config.txt"),
        &format!("# config_hash = {hash}\n{}", cfg.canonical()),
    )?;

    let items = labeled_pool(cfg).map_err(|e| e.in_stage("pool"))?;
    let encoder = session.encoder(cfg).map_err(|e| e.in_stage("encoder"))?;
    write_text(
        &out.join("encoder_loss.csv"),
        &series_csv("epoch,loss", &encoder.history),
    )?;
    let inversions = session
        .invert(cfg, &encoder, &items)
        .map_err(|e| e.in_stage("inversion"))?;
    write_text(&out.join("inversion.csv"), &inversion_csv(&inversions))?;
    let inversion_loss = inversions
        .iter()
        .map(|r| r.trajectory[r.trajectory.len() - 1])
        .sum::<f64>()
        / inversions.len() as f64;

    let images =
        training_images(cfg, &items, &inversions).map_err(|e| e.in_stage("hypercolumn"))?;
    let model = train_label_generator(cfg, &images).map_err(|e| e.in_stage("label_generator"))?;
    drop(images);
    model
        .to_archive()
        .write(&out.join("label_generator.hoffa"))?;
    let mut lg = String::from("member,seed,final_loss\n");
    for (m, (s, l)) in model.seeds.iter().zip(&model.final_losses).enumerate() {
        let _ = writeln!(lg, "{m},{s},{l}");
    }
    write_text(&out.join("label_generator.csv"), &lg)?;

    let synth = synthesize_dataset(cfg, &model, cfg.filter_fraction)
        .map_err(|e| e.in_stage("synthesis"))?;
    write_dataset(&out.join("dataset"), cfg.seed, &hash, &synth)?;
    let test = test_latents(cfg).map_err(|e| e.in_stage("evaluate"))?;
    check_disjoint(&test, &items, &synth)?;
    let pool = if cfg.finetune.is_some() {
        pool_images(cfg, &items).map_err(|e| e.in_stage("finetune"))?
    } else {
        Vec::new()
    };

    let data = labeled_samples(&synth.retained);
    let (downstream, ft, metrics) = train_and_evaluate(cfg, &data, &pool, &test)?;
    drop(data);
    downstream
        .to_archive()
        .write(&out.join("downstream.hoffa"))?;
    write_text(
        &out.join("downstream_loss.csv"),
        &series_csv("epoch,loss", &downstream.history),
    )?;
    if let Some(ft) = ft {
        write_text(
            &out.join("finetune_loss.csv"),
            &series_csv("step,loss", &ft),
        )?;
    }
    write_text(&out.join("metrics.csv"), &metrics.to_csv())?;

    let baseline = if cfg.baseline {
        let dir = out.join("baseline");
        create_dir(&dir)?;
        let single = model.member(0)?;
        let plain = synthesize_dataset(cfg, &single, 0.0).map_err(|e| e.in_stage("baseline"))?;
        let data = labeled_samples(&plain.retained);
        let (m, _, table) =
            train_and_evaluate(cfg, &data, &pool, &test).map_err(|e| e.in_stage("baseline"))?;
        write_text(
            &dir.join("downstream_loss.csv"),
            &series_csv("epoch,loss", &m.history),
        )?;
        write_text(&dir.join("metrics.csv"), &table.to_csv())?;
        Some(table)
    } else {
        None
    };

    Ok(Outcome {
        dir: out.to_path_buf(),
        config_hash: hash,
        metrics,
        baseline,
        inversion_loss,
        retained: synth.retained.len(),
        rejected: synth.rejected.len(),
    })
}
