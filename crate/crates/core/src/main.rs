use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use labelsynth::downstream::{
    evaluate_downstream, finetune, load_manifest, train_downstream, EvalSpec, PatchModel,
};
use labelsynth::harness::experiment::{
    labeled_pool, pool_images, synthesize_dataset, test_latents, train_label_generator,
    training_images,
};
use labelsynth::harness::views::export_uncertainty_view;
use labelsynth::harness::{run_ablation, run_experiment, run_longtail, ExperimentConfig, Session};
use labelsynth::hoff::{Archive, Tensor};
use labelsynth::inversion::InversionResult;
use labelsynth::label_generator::EnsembleModel;
use labelsynth::synthesis::{sample_rng, tags, write_dataset, PoolItem};

#[derive(Parser)]
#[command(
    name = "labelsynth",
    version,
    about = "Synthetic image-label generation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder and invert the labeled pool.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Refinement iterations per image.
        #[arg(long)]
        iterations: Option<usize>,
        /// Squared radius of the ball around the encoder's latent.
        #[arg(long)]
        c_reg: Option<f64>,
        /// Weight of the pixel reconstruction term.
        #[arg(long)]
        lambda_l2: Option<f64>,
    },
    /// Invert the pool and train the label-generator ensemble.
    TrainLabelgen(Common),
    /// Generate and filter a dataset with a trained label generator.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train the downstream model on a dataset manifest.
    TrainDownstream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a downstream model on held-out oracle-labeled images.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Long-tail substitution or addition sweep.
    Longtail(Common),
    /// Ablation sweep over the configured axis.
    Ablate(Common),
    /// Write label and uncertainty PNGs for held-out latents.
    ExportViews {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Run the whole pipeline.
    Run(Common),
}

/// Failure kinds that map to distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e.chain().any(|c| {
            c.downcast_ref::<labelsynth::Error>()
                .is_some_and(|e| e.is_config())
        });
        if config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<labelsynth::Error> for Failure {
    fn from(e: labelsynth::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::read(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn invert_pool(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<(Vec<PoolItem>, Vec<InversionResult>), Failure> {
    ensure_dir(out)?;
    let session = Session::default();
    let items = labeled_pool(cfg)?;
    let encoder = session.encoder(cfg)?;
    let results = session.invert(cfg, &encoder, &items)?;
    let dim = cfg.scene.latent_dim();
    let latents: Vec<f32> = results
        .iter()
        .flat_map(|r| r.latent.0.iter().map(|&v| v as f32))
        .collect();
    Tensor::f32(vec![results.len(), dim], latents).write(&out.join("latents.hoff"))?;
    let mut enc = Archive::default();
    encoder.net.write_to(&mut enc, "");
    enc.write(&out.join("encoder.hoffa"))?;
    let mut csv = String::from("item,initial_error,reconstruction_error\n");
    for (i, r) in results.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{}\n",
            r.initial_error, r.reconstruction_error
        ));
    }
    write(&out.join("inversion.csv"), &csv)?;
    let steps = results.first().map_or(0, |r| r.trajectory.len());
    let trajectories: Vec<f32> = results
        .iter()
        .flat_map(|r| r.trajectory.iter().map(|&v| v as f32))
        .collect();
    Tensor::f32(vec![results.len(), steps], trajectories).write(&out.join("trajectories.hoff"))?;
    Ok((items, results))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Invert {
            common,
            iterations,
            c_reg,
            lambda_l2,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = iterations {
                cfg.inversion.iterations = v;
            }
            if let Some(v) = c_reg {
                cfg.inversion.c_reg = v;
            }
            if let Some(v) = lambda_l2 {
                cfg.inversion.lambda_l2 = v;
            }
            cfg.validate()?;
            invert_pool(&cfg, &common.out)?;
        }
        Command::TrainLabelgen(c) => {
            let cfg = load_config(&c)?;
            let (items, results) = invert_pool(&cfg, &c.out)?;
            let model = train_label_generator(&cfg, &training_images(&cfg, &items, &results)?)?;
            model
                .to_archive()
                .write(&c.out.join("label_generator.hoffa"))?;
        }
        Command::Synthesize { common, model } => {
            let cfg = load_config(&common)?;
            let model = EnsembleModel::from_archive(&Archive::read(&model)?)?;
            let data = synthesize_dataset(&cfg, &model, cfg.filter_fraction)?;
            let path = write_dataset(&common.out, cfg.seed, &cfg.hash(), &data)?;
            println!("{}", path.display());
        }
        Command::TrainDownstream { common, manifest } => {
            let cfg = load_config(&common)?;
            ensure_dir(&common.out)?;
            let data = load_manifest(&manifest)?;
            let mut rng = sample_rng(cfg.seed, tags::DOWNSTREAM, 0);
            let mut model =
                train_downstream(&mut rng, &data, cfg.task_spec().kind(), &cfg.downstream)?;
            if let Some(params) = &cfg.finetune {
                let pool = pool_images(&cfg, &labeled_pool(&cfg)?)?;
                finetune(
                    &mut sample_rng(cfg.seed, tags::FINETUNE, 0),
                    &mut model,
                    &pool,
                    params,
                )?;
            }
            model
                .to_archive()
                .write(&common.out.join("downstream.hoffa"))?;
        }
        Command::Evaluate { common, model } => {
            let cfg = load_config(&common)?;
            ensure_dir(&common.out)?;
            let model = PatchModel::from_archive(&Archive::read(&model)?)?;
            let spec = EvalSpec {
                task: cfg.task_spec(),
                seed: cfg.seed,
                corrupt_fraction: cfg.corrupt_fraction,
            };
            let table =
                evaluate_downstream(&model, &test_latents(&cfg)?, &cfg.resolved_scene(), &spec)?;
            write(&common.out.join("metrics.csv"), &table.to_csv())?;
        }
        Command::Longtail(c) => {
            let cfg = load_config(&c)?;
            let table = run_longtail(&cfg, &c.out, &Session::default())?;
            print!("{}", table.to_csv());
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let table = run_ablation(&cfg, &c.out, &Session::default())?;
            print!("{}", table.to_csv());
        }
        Command::ExportViews {
            common,
            model,
            count,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.test_size = count.max(1);
            let model = EnsembleModel::from_archive(&Archive::read(&model)?)?;
            let latents = test_latents(&cfg)?;
            export_uncertainty_view(
                &model,
                &cfg.resolved_scene(),
                cfg.channel_caps.as_deref(),
                &latents,
                &common.out,
            )?;
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let outcome = run_experiment(&cfg, &c.out)?;
            print!(
                "{}",
                outcome
                    .metrics
                    .to_csv()
                    .lines()
                    .last()
                    .map(|l| format!("{l}\n"))
                    .unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
