//! PNG views of generated labels and their uncertainty.
//!
//! Discrete labels use [`CLASS_COLORS`] (class index modulo the table size).
//! Continuous labels are shown in grayscale: the largest channel value divided
//! by the task scale, clamped to `[0, 1]`. Uncertainty uses the `hot`
//! colormap over `u / u_max`, where `u_max` is `ln M` for Jensen-Shannon
//! maps of an `M`-member ensemble and `(scale / 2)²` for variance maps.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::image::write_rgb_png;
use crate::label_generator::{EnsembleModel, LabelPlane, TaskKind, UncertaintyMap};
use crate::scene::{Latent, SceneConfig};
use crate::synthesis::label_latent;
use crate::{Error, Result};

pub const CLASS_COLORS: [[u8; 3]; 10] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [250, 190, 190],
];

/// Black through red and yellow to white as `t` goes from 0 to 1.
pub fn hot(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

pub fn label_rgb(labels: &LabelPlane, task: TaskKind) -> Vec<u8> {
    match labels {
        LabelPlane::Classes(g) => g
            .data()
            .iter()
            .flat_map(|&c| CLASS_COLORS[c as usize % CLASS_COLORS.len()])
            .collect(),
        LabelPlane::Values { channels, data, .. } => {
            let scale = match task {
                TaskKind::Continuous { scale, .. } => scale,
                TaskKind::Discrete { .. } => 1.0,
            };
            data.chunks(*channels)
                .flat_map(|px| {
                    let m = px.iter().copied().fold(f32::MIN, f32::max);
                    let v = ((m / scale).clamp(0.0, 1.0) * 255.0).round() as u8;
                    [v, v, v]
                })
                .collect()
        }
    }
}

/// Largest possible uncertainty value for a model.
pub fn uncertainty_ceiling(model: &EnsembleModel) -> f64 {
    match model.task {
        TaskKind::Discrete { .. } => (model.members.len() as f64).ln(),
        TaskKind::Continuous { scale, .. } => (scale as f64 / 2.0).powi(2),
    }
}

pub fn uncertainty_rgb(map: &UncertaintyMap, ceiling: f64) -> Vec<u8> {
    map.values
        .data()
        .iter()
        .flat_map(|&u| {
            let t = if ceiling > 0.0 { u / ceiling } else { 0.0 };
            hot(t)
        })
        .collect()
}

/// Write `label_{i}.png` and `uncertainty_{i}.png` for each latent.
pub fn export_uncertainty_view(
    model: &EnsembleModel,
    config: &SceneConfig,
    caps: Option<&[usize]>,
    latents: &[Latent],
    out: &Path,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ceiling = uncertainty_ceiling(model);
    latents
        .par_iter()
        .enumerate()
        .map(|(i, latent)| {
            let (labels, map) = label_latent(config, model, caps, latent)?;
            let n = labels.size();
            let lp = out.join(format!("label_{i:04}.png"));
            let up = out.join(format!("uncertainty_{i:04}.png"));
            write_rgb_png(&lp, n, n, &label_rgb(&labels, model.task))?;
            write_rgb_png(&up, n, n, &uncertainty_rgb(&map, ceiling))?;
            Ok((lp, up))
        })
        .collect()
}
