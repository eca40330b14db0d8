//! Latent inversion: an encoder for initialization followed by constrained
//! gradient refinement against a frozen generator.
//!
//! Refinement minimizes `perceptual(X, G(w)) + λ · mse(X, G(w))` subject to
//! `‖w − w_e‖² ≤ c_reg`. Each iteration takes a step along the RMS-normalized
//! negative gradient, projects back onto the ball around `w_e`, and halves the
//! step (up to eight times) until the objective does not increase. Each
//! iteration starts from twice the previously accepted step length, capped at
//! the configured step size.

use rand::Rng;

use crate::image::Image;
use crate::net::{fit, DenseNet, FitParams, OptimState, TargetSet};
use crate::scene::{
    render_gradient, render_image, render_pixels, sample_latent, Latent, SceneConfig,
};
use crate::{Error, Result};

/// Side length the encoder sees after average pooling.
pub const ENCODER_GRID: usize = 16;
const INPUT_CENTER: f32 = 0.4;
const INPUT_GAIN: f32 = 10.0;
const MAX_HALVINGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptualKind {
    /// Sum over pooling factors 1, 2 and 4 of the mean squared difference.
    MultiscaleL2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionParams {
    /// Squared radius of the ball around the encoder's latent.
    pub c_reg: f64,
    pub lambda_l2: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub perceptual: PerceptualKind,
    pub backtracking: bool,
}

impl Default for InversionParams {
    fn default() -> Self {
        InversionParams {
            c_reg: 0.5,
            lambda_l2: 0.1,
            iterations: 300,
            step_size: 0.05,
            perceptual: PerceptualKind::MultiscaleL2,
            backtracking: true,
        }
    }
}

impl InversionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return Err(Error::Config(format!(
                "c_reg must be positive, got {}",
                self.c_reg
            )));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_l2 must be non-negative, got {}",
                self.lambda_l2
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub latent: Latent,
    pub initial: Latent,
    /// Objective before the first iteration and after each one.
    pub trajectory: Vec<f64>,
    /// Squared distance of each iterate from `initial`, starting at 0.
    pub offsets: Vec<f64>,
    /// Mean squared pixel error at `initial`.
    pub initial_error: f64,
    /// Mean squared pixel error at `latent`.
    pub reconstruction_error: f64,
}

/// Image-to-latent regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: DenseNet,
    /// Per-epoch training loss.
    pub history: Vec<f64>,
    /// Mean squared latent error on held-out pairs, when any were requested.
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderParams {
    pub hidden: (usize, usize),
    pub fit: FitParams,
    pub validation_pairs: usize,
    /// Rare-class frequency of the scenes sampled for training pairs, when it
    /// should differ from the generator's own.
    pub rare_frequency: Option<f64>,
}

impl Default for EncoderParams {
    fn default() -> Self {
        EncoderParams {
            hidden: (128, 64),
            fit: FitParams {
                epochs: 60,
                batch_size: 32,
                lr: 1e-3,
                optimizer: crate::net::Optimizer::adam(),
            },
            validation_pairs: 0,
            rare_frequency: Some(0.5),
        }
    }
}

/// Flattened encoder input: the image pooled to [`ENCODER_GRID`] per side
/// (or left as is when already smaller), centered on the background level
/// and scaled so palette contrast is of unit size.
pub fn encoder_input(image: &Image) -> Result<Vec<f32>> {
    let factor = (image.size() / ENCODER_GRID).max(1);
    let pooled = image.avg_pool(factor)?;
    Ok(pooled
        .data()
        .iter()
        .map(|v| (v - INPUT_CENTER) * INPUT_GAIN)
        .collect())
}

fn encoder_width(config: &SceneConfig) -> usize {
    let side = config.resolution / (config.resolution / ENCODER_GRID).max(1);
    side * side * 3
}

fn latent_targets(latents: &[Latent]) -> Vec<f32> {
    latents
        .iter()
        .flat_map(|l| l.0.iter().map(|&v| v as f32))
        .collect()
}

impl Encoder {
    pub fn predict(&self, image: &Image) -> Result<Latent> {
        let x = encoder_input(image)?;
        let y = self.net.forward(&x, 1)?;
        Ok(Latent(y.into_iter().map(|v| v as f64).collect()))
    }

    /// Mean squared latent error over a set of pairs.
    pub fn mse(&self, images: &[Image], latents: &[Latent]) -> Result<f64> {
        if images.len() != latents.len() || images.is_empty() {
            return Err(Error::shape("encoder pairs", images.len(), latents.len()));
        }
        let mut x = Vec::new();
        for img in images {
            x.extend(encoder_input(img)?);
        }
        let y = self.net.forward(&x, images.len())?;
        let t = latent_targets(latents);
        let sum: f64 = y
            .iter()
            .zip(&t)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        Ok(sum / t.len() as f64)
    }
}

/// Sample `n` latents with their rendered images.
pub fn sample_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    n: usize,
) -> Result<(Vec<Image>, Vec<Latent>)> {
    let mut images = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let l = sample_latent(rng, config, None)?;
        images.push(render_image(&l, config)?);
        latents.push(l);
    }
    Ok((images, latents))
}

/// Train an encoder by regression on freshly sampled `(render(w), w)` pairs.
pub fn train_encoder<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    n_pairs: usize,
    params: &EncoderParams,
) -> Result<Encoder> {
    if n_pairs == 0 {
        return Err(Error::Input(
            "encoder training needs at least one pair".into(),
        ));
    }
    config.validate()?;
    let mut pair_config = config.clone();
    if let Some(f) = params.rare_frequency {
        pair_config.rare_frequency = f;
    }
    pair_config.validate()?;
    let config = &pair_config;
    let widths = [
        encoder_width(config),
        params.hidden.0,
        params.hidden.1,
        config.latent_dim(),
    ];
    let mut net = DenseNet::new(&widths, rng)?;
    let (images, latents) = sample_pairs(rng, config, n_pairs)?;
    let mut x = Vec::with_capacity(n_pairs * widths[0]);
    for img in &images {
        x.extend(encoder_input(img)?);
    }
    let targets = TargetSet::Values {
        width: config.latent_dim(),
        values: latent_targets(&latents),
        weights: None,
    };
    let mut state = OptimState::new(params.fit.optimizer, params.fit.lr, &net);
    let history = fit(&mut net, &mut state, &x, &targets, &params.fit, rng)?;
    let mut encoder = Encoder {
        net,
        history,
        validation_mse: None,
    };
    if params.validation_pairs > 0 {
        let (vi, vl) = sample_pairs(rng, config, params.validation_pairs)?;
        encoder.validation_mse = Some(encoder.mse(&vi, &vl)?);
    }
    Ok(encoder)
}

fn pooled_f64(data: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let mut pooled = vec![0.0; out * out * 3];
    let inv = 1.0 / (factor * factor) as f64;
    for y in 0..size {
        for x in 0..size {
            let o = ((y / factor) * out + x / factor) * 3;
            let i = (y * size + x) * 3;
            for c in 0..3 {
                pooled[o + c] += data[i + c] * inv;
            }
        }
    }
    pooled
}

const PERCEPTUAL_FACTORS: [usize; 3] = [1, 2, 4];

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape("image pair", a.size(), b.size()));
    }
    Ok(())
}

/// Multiscale squared-error loss between two images.
pub fn perceptual_loss(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let da: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let db: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    Ok(multiscale(&da, &db, a.size()))
}

fn usable_factors(size: usize) -> impl Iterator<Item = usize> {
    PERCEPTUAL_FACTORS
        .into_iter()
        .filter(move |&f| size.is_multiple_of(f) && size >= f)
}

fn pyramid(a: &[f64], size: usize) -> Vec<(usize, Vec<f64>)> {
    usable_factors(size)
        .map(|f| (f, pooled_f64(a, size, f)))
        .collect()
}

fn multiscale(a: &[f64], b: &[f64], size: usize) -> f64 {
    multiscale_pyramid(&pyramid(a, size), b, size)
}

fn multiscale_pyramid(pa: &[(usize, Vec<f64>)], b: &[f64], size: usize) -> f64 {
    pa.iter()
        .map(|(f, pa)| {
            let pb = pooled_f64(b, size, *f);
            let sum: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum();
            sum / pa.len() as f64
        })
        .sum()
}

/// Gradient of [`multiscale`] with respect to `b`.
#[cfg(test)]
fn multiscale_grad(a: &[f64], b: &[f64], size: usize, out: &mut [f64]) {
    multiscale_grad_pyramid(&pyramid(a, size), b, size, out)
}

fn multiscale_grad_pyramid(pa: &[(usize, Vec<f64>)], b: &[f64], size: usize, out: &mut [f64]) {
    for (f, pa) in pa {
        let f = *f;
        let pb = pooled_f64(b, size, f);
        let side = size / f;
        let scale = 2.0 / pa.len() as f64 / (f * f) as f64;
        for y in 0..size {
            for x in 0..size {
                let o = ((y / f) * side + x / f) * 3;
                let i = (y * size + x) * 3;
                for c in 0..3 {
                    out[i + c] += scale * (pb[o + c] - pa[o + c]);
                }
            }
        }
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Rescale `w` about `center` onto the ball of squared radius `c_reg` when it lies outside.
pub fn project_to_ball(w: &mut [f64], center: &[f64], c_reg: f64) {
    let d2: f64 = w.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
    if d2 > c_reg {
        let s = (c_reg / d2).sqrt();
        for (a, b) in w.iter_mut().zip(center) {
            *a = b + (*a - b) * s;
        }
    }
}

struct Objective<'a> {
    target: Vec<f64>,
    target_pyramid: Vec<(usize, Vec<f64>)>,
    params: &'a InversionParams,
    config: &'a SceneConfig,
}

impl Objective<'_> {
    fn value(&self, w: &Latent) -> Result<(f64, Vec<f64>)> {
        let g = render_pixels(w, self.config)?;
        let mut v = self.params.lambda_l2 * mse(&self.target, &g);
        if self.params.perceptual == PerceptualKind::MultiscaleL2 {
            v += multiscale_pyramid(&self.target_pyramid, &g, self.config.resolution);
        }
        Ok((v, g))
    }

    fn gradient(&self, w: &Latent, rendered: &[f64]) -> Result<Vec<f64>> {
        let n = rendered.len() as f64;
        let mut cot: Vec<f64> = rendered
            .iter()
            .zip(&self.target)
            .map(|(g, x)| self.params.lambda_l2 * 2.0 * (g - x) / n)
            .collect();
        if self.params.perceptual == PerceptualKind::MultiscaleL2 {
            multiscale_grad_pyramid(
                &self.target_pyramid,
                rendered,
                self.config.resolution,
                &mut cot,
            );
        }
        let cot: Vec<f32> = cot.into_iter().map(|v| v as f32).collect();
        render_gradient(w, self.config, &cot)
    }
}

/// Projected gradient refinement of `w_e` toward a latent reproducing `image`.
pub fn refine(
    image: &Image,
    w_e: &Latent,
    params: &InversionParams,
    config: &SceneConfig,
) -> Result<InversionResult> {
    params.validate()?;
    if image.size() != config.resolution {
        return Err(Error::shape(
            "inversion image",
            config.resolution,
            image.size(),
        ));
    }
    if w_e.0.len() != config.latent_dim() {
        return Err(Error::shape(
            "initial latent",
            config.latent_dim(),
            w_e.0.len(),
        ));
    }
    let target: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let objective = Objective {
        target_pyramid: pyramid(&target, config.resolution),
        target,
        params,
        config,
    };
    let mut w = w_e.clone();
    let (mut current, mut rendered) = objective.value(&w)?;
    if !current.is_finite() {
        return Err(Error::NonFinite {
            what: "inversion loss at iteration 0".into(),
            index: 0,
        });
    }
    let initial_error = mse(&objective.target, &rendered);
    let mut trajectory = Vec::with_capacity(params.iterations + 1);
    trajectory.push(current);
    let mut offsets = Vec::with_capacity(params.iterations + 1);
    offsets.push(0.0);
    let mut scale = params.step_size;
    for it in 1..=params.iterations {
        let grad = objective.gradient(&w, &rendered)?;
        let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len() as f64).sqrt();
        if rms > 0.0 && rms.is_finite() {
            let mut eta = scale / rms;
            let attempts = if params.backtracking {
                MAX_HALVINGS + 1
            } else {
                1
            };
            for _ in 0..attempts {
                let mut trial = Latent(w.0.iter().zip(&grad).map(|(a, g)| a - eta * g).collect());
                project_to_ball(&mut trial.0, &w_e.0, params.c_reg);
                let (value, image) = objective.value(&trial)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("inversion loss at iteration {it}"),
                        index: it,
                    });
                }
                if !params.backtracking || value <= current {
                    scale = (eta * rms * 2.0).min(params.step_size);
                    w = trial;
                    current = value;
                    rendered = image;
                    break;
                }
                eta *= 0.5;
                if params.backtracking {
                    scale = eta * rms;
                }
            }
        }
        trajectory.push(current);
        offsets.push(w.0.iter().zip(&w_e.0).map(|(a, b)| (a - b).powi(2)).sum());
    }
    let reconstruction_error = mse(&objective.target, &rendered);
    Ok(InversionResult {
        latent: w,
        initial: w_e.clone(),
        trajectory,
        offsets,
        initial_error,
        reconstruction_error,
    })
}

/// Encode then refine.
pub fn invert(
    encoder: &Encoder,
    image: &Image,
    params: &InversionParams,
    config: &SceneConfig,
) -> Result<InversionResult> {
    let w_e = encoder.predict(image)?;
    refine(image, &w_e, params, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perceptual_of_constant_offset() {
        let a = Image::filled(16, [0.25; 3]);
        let b = Image::filled(16, [0.75; 3]);
        let v = perceptual_loss(&a, &b).unwrap();
        assert_eq!(v, 0.75);
        assert_eq!(v, perceptual_loss(&b, &a).unwrap());
        assert_eq!(perceptual_loss(&a, &a).unwrap(), 0.0);
        assert!(perceptual_loss(&a, &Image::filled(8, [0.25; 3])).is_err());
    }

    #[test]
    fn projection_scales_onto_sphere() {
        let mut w = vec![1.0, 1.0];
        project_to_ball(&mut w, &[0.0, 0.0], 0.5);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let mut inside = vec![0.1, 0.2];
        project_to_ball(&mut inside, &[0.0, 0.0], 0.5);
        assert_eq!(inside, vec![0.1, 0.2]);
    }

    #[test]
    fn exact_image_keeps_initial_latent() {
        let config = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = sample_latent(&mut rng, &config, None).unwrap();
        let image = render_image(&w, &config).unwrap();
        let params = InversionParams {
            iterations: 20,
            ..InversionParams::default()
        };
        let r = refine(&image, &w, &params, &config).unwrap();
        let dist = r
            .latent
            .0
            .iter()
            .zip(&w.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dist <= 1e-4, "moved {dist}");
        assert_eq!(r.trajectory.len(), 21);
    }

    #[test]
    fn perceptual_gradient_matches_differences() {
        let size = 8;
        let a: Vec<f64> = (0..size * size * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        let b: Vec<f64> = (0..size * size * 3).map(|i| (i % 5) as f64 / 5.0).collect();
        let mut g = vec![0.0; b.len()];
        multiscale_grad(&a, &b, size, &mut g);
        for i in [0, 17, 100, 191] {
            let mut p = b.clone();
            p[i] += 1e-6;
            let mut m = b.clone();
            m[i] -= 1e-6;
            let fd = (multiscale(&a, &p, size) - multiscale(&a, &m, size)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_epoch_encoder_is_initialization() {
        let config = SceneConfig::default();
        let params = EncoderParams {
            fit: FitParams {
                epochs: 0,
                ..EncoderParams::default().fit
            },
            ..EncoderParams::default()
        };
        let enc = train_encoder(&mut ChaCha8Rng::seed_from_u64(1), &config, 2, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = DenseNet::new(&[768, params.hidden.0, params.hidden.1, 24], &mut rng).unwrap();
        assert_eq!(enc.net, init);
    }
}
