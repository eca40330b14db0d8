//! Procedural scene generator with an analytic label oracle.
//!
//! A latent holds six parameters per object slot:
//! `(presence logit, class offset, center x, center y, log-radius, depth)`.
//! Rendering composites soft-edged discs over a gray background in soft depth
//! order, so every pixel is continuously differentiable in every latent
//! coordinate. The oracle uses the same geometry with hard edges and hard depth
//! order to produce segmentation, keypoints, depth and class presence.
//!
//! Alongside the image, [`render`] emits one feature grid per block resolution
//! (4, 8, ..., R). Each block samples a bank of channels at corner-aligned
//! positions: per-class soft occupancy, normalized composited depth, and one
//! signed-distance channel per slot.

use rand::Rng;

use crate::image::{Grid, Image};
use crate::{Error, Result};

/// Parameters per object slot in a latent.
pub const SLOT_PARAMS: usize = 6;
const PRESENCE: usize = 0;
const CLASS: usize = 1;
const CENTER_X: usize = 2;
const CENTER_Y: usize = 3;
const RADIUS: usize = 4;
const DEPTH: usize = 5;

/// Depth assigned to background pixels.
pub const FAR_DEPTH: f32 = 80.0;
const NEAR_DEPTH: f64 = 5.0;
const DEPTH_SPAN: f64 = 35.0;
/// Temperature of the soft depth order, in depth units.
const DEPTH_TEMPERATURE: f64 = 0.05;
/// Width of class-bin transitions, in bin units.
const CLASS_SOFTNESS: f64 = 0.05;
const RADIUS_GAIN: f64 = 0.3;
const BACKGROUND_BASE: f64 = 0.4;
const BACKGROUND_SWING: f64 = 0.03;
const PALETTE_LO: f32 = 0.3;
const PALETTE_HI: f32 = 0.5;
/// Draws allowed when resampling for a rare-class target.
pub const REJECTION_BUDGET: usize = 10_000;

/// Foreground colors; class `c >= 1` uses entry `c - 1`.
pub const PALETTE: [[f32; 3]; 8] = [
    [PALETTE_HI, PALETTE_LO, PALETTE_LO],
    [PALETTE_LO, PALETTE_HI, PALETTE_LO],
    [PALETTE_LO, PALETTE_LO, PALETTE_HI],
    [PALETTE_HI, PALETTE_HI, PALETTE_LO],
    [PALETTE_HI, PALETTE_LO, PALETTE_HI],
    [PALETTE_LO, PALETTE_HI, PALETTE_HI],
    [PALETTE_HI, PALETTE_HI, PALETTE_HI],
    [PALETTE_LO, PALETTE_LO, PALETTE_LO],
];

/// How [`sample_latent`] places objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Random presence, class, size and depth; slot `k` lies in grid cell `k`.
    Free,
    /// Every slot present with a fixed class and a smaller radius, centered
    /// well inside its own grid cell. Used for keypoint studies where slot
    /// identity must be visible.
    Anchored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub resolution: usize,
    pub slots: usize,
    pub classes: usize,
    /// Channels per block, lowest resolution first.
    pub block_channels: Vec<usize>,
    /// Edge softness in pixels.
    pub tau: f64,
    pub rare_class: usize,
    /// Probability that a natural draw asks for the rare class.
    pub rare_frequency: f64,
    pub layout: Layout,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::new(64, 4, 5)
    }
}

impl SceneConfig {
    /// Defaults for a canvas size, slot count and class count (class 0 is
    /// background). Every block gets the full channel bank.
    pub fn new(resolution: usize, slots: usize, classes: usize) -> Self {
        let blocks = (resolution.max(2).ilog2() as usize).saturating_sub(1);
        SceneConfig {
            resolution,
            slots,
            classes,
            block_channels: vec![classes + 1 + slots; blocks],
            tau: 1.5,
            rare_class: classes.saturating_sub(1),
            rare_frequency: 0.05,
            layout: Layout::Free,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 8, got {r}"
            )));
        }
        if self.classes < 2 || self.classes > PALETTE.len() + 1 {
            return Err(Error::Config(format!(
                "class count must be in 2..={}, got {}",
                PALETTE.len() + 1,
                self.classes
            )));
        }
        if self.slots == 0 {
            return Err(Error::Config("need at least one object slot".into()));
        }
        if self.block_channels.len() != self.blocks() {
            return Err(Error::Config(format!(
                "{} block channel counts given, resolution {r} has {} blocks",
                self.block_channels.len(),
                self.blocks()
            )));
        }
        if let Some(&c) = self
            .block_channels
            .iter()
            .find(|&&c| c == 0 || c > self.bank_channels())
        {
            return Err(Error::Config(format!(
                "block channel count {c} outside 1..={}",
                self.bank_channels()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.rare_class == 0 || self.rare_class >= self.classes {
            return Err(Error::Config(format!(
                "rare class must be a foreground class, got {}",
                self.rare_class
            )));
        }
        if !(self.rare_frequency > 0.0 && self.rare_frequency < 1.0) {
            return Err(Error::Config(format!(
                "rare frequency must be in (0, 1), got {}",
                self.rare_frequency
            )));
        }
        Ok(())
    }

    /// Number of feature blocks, `log2(R) - 1`.
    pub fn blocks(&self) -> usize {
        (self.resolution.ilog2() as usize).saturating_sub(1)
    }

    pub fn block_resolutions(&self) -> Vec<usize> {
        (0..self.blocks()).map(|l| 4usize << l).collect()
    }

    /// Size of the channel bank each block draws its first channels from.
    pub fn bank_channels(&self) -> usize {
        self.classes + 1 + self.slots
    }

    pub fn latent_dim(&self) -> usize {
        self.slots * SLOT_PARAMS
    }

    /// Total channels over all blocks.
    pub fn feature_dim(&self) -> usize {
        self.block_channels.iter().sum()
    }

    fn foreground(&self) -> usize {
        self.classes - 1
    }

    fn radius_base(&self) -> f64 {
        self.resolution as f64 / 12.0
    }
}

/// Latent scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn zeros(config: &SceneConfig) -> Self {
        Latent(vec![0.0; config.latent_dim()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        &self.0[k * SLOT_PARAMS..(k + 1) * SLOT_PARAMS]
    }

    fn check(&self, config: &SceneConfig) -> Result<()> {
        if self.0.len() != config.latent_dim() {
            return Err(Error::shape("latent", config.latent_dim(), self.0.len()));
        }
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "latent".into(),
                index: i,
            });
        }
        Ok(())
    }
}

/// One feature grid: `res × res` pixels of `channels` interleaved values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureBlock {
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.res + x) * self.channels + c]
    }
}

/// Feature grids for every block, lowest resolution first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureStack {
    pub fn total_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.channels).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Ground truth produced from a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLabels {
    pub segmentation: Grid<u32>,
    pub keypoints: Vec<Keypoint>,
    pub depth: Grid<f32>,
    /// `presence[c]` is true iff some pixel has class `c`.
    pub presence: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothstep gate: exactly 0 at or below -1, exactly 1 at or above 1.
fn gate(logit: f64) -> (f64, f64) {
    let t = ((logit + 1.0) * 0.5).clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t), 3.0 * t * (1.0 - t))
}

fn class_position(offset: f64, foreground: usize) -> f64 {
    (offset + 3.0) / 6.0 * foreground as f64 - 0.5
}

/// Latent class offset at the center of foreground bin `f` (class `f + 1`).
pub fn class_offset_for(class: usize, classes: usize) -> f64 {
    let fg = (classes - 1) as f64;
    (class as f64 - 0.5) / fg * 6.0 - 3.0
}

/// Latent center coordinate for a canvas position in `(0, R - 1)`.
pub fn center_param_for(pos: f64, resolution: usize) -> f64 {
    let half = (resolution as f64 - 1.0) / 2.0;
    let t = (pos / half - 1.0).clamp(-0.999_999, 0.999_999);
    2.0 * t.atanh()
}

#[derive(Debug, Clone)]
struct Object {
    gate: f64,
    dgate: f64,
    cx: f64,
    cy: f64,
    dcx: f64,
    dcy: f64,
    radius: f64,
    dradius: f64,
    depth: f64,
    ddepth: f64,
    /// Soft class weights over foreground classes and their derivatives in the class offset.
    class_weights: Vec<f64>,
    class_dweights: Vec<f64>,
    color: [f64; 3],
    hard_present: bool,
    hard_class: usize,
}

fn objects(latent: &Latent, config: &SceneConfig) -> Vec<Object> {
    let half = (config.resolution as f64 - 1.0) / 2.0;
    let fg = config.foreground();
    (0..config.slots)
        .map(|k| {
            let p = latent.slot(k);
            let (g, dg) = gate(p[PRESENCE]);
            let tx = (p[CENTER_X] * 0.5).tanh();
            let ty = (p[CENTER_Y] * 0.5).tanh();
            let radius = config.radius_base() * (RADIUS_GAIN * p[RADIUS]).exp();
            let sz = sigmoid(p[DEPTH]);
            let t = class_position(p[CLASS], fg);
            let dt = fg as f64 / 6.0;
            let mut w = vec![0.0; fg];
            let mut dw = vec![0.0; fg];
            for f in 0..fg {
                let (lo, dlo) = if f == 0 {
                    (1.0, 0.0)
                } else {
                    let s = sigmoid((t - (f as f64 - 0.5)) / CLASS_SOFTNESS);
                    (s, s * (1.0 - s) / CLASS_SOFTNESS)
                };
                let (hi, dhi) = if f + 1 == fg {
                    (0.0, 0.0)
                } else {
                    let s = sigmoid((t - (f as f64 + 0.5)) / CLASS_SOFTNESS);
                    (s, s * (1.0 - s) / CLASS_SOFTNESS)
                };
                w[f] = lo - hi;
                dw[f] = (dlo - dhi) * dt;
            }
            let mut color = [0.0; 3];
            for (f, wf) in w.iter().enumerate() {
                for c in 0..3 {
                    color[c] += wf * PALETTE[f][c] as f64;
                }
            }
            let hard_fg = (t.round().max(0.0) as usize).min(fg - 1);
            Object {
                gate: g,
                dgate: dg,
                cx: half * (1.0 + tx),
                cy: half * (1.0 + ty),
                dcx: half * 0.5 * (1.0 - tx * tx),
                dcy: half * 0.5 * (1.0 - ty * ty),
                radius,
                dradius: RADIUS_GAIN * radius,
                depth: NEAR_DEPTH + DEPTH_SPAN * sz,
                ddepth: DEPTH_SPAN * sz * (1.0 - sz),
                class_weights: w,
                class_dweights: dw,
                color,
                hard_present: p[PRESENCE] > 0.0,
                hard_class: hard_fg + 1,
            }
        })
        .collect()
}

/// Gray background level keyed on the mean depth coordinate; returns value and
/// derivative with respect to each slot's depth coordinate.
fn background(latent: &Latent, config: &SceneConfig) -> (f64, f64) {
    let k = config.slots as f64;
    let mean: f64 = (0..config.slots)
        .map(|s| latent.slot(s)[DEPTH])
        .sum::<f64>()
        / k;
    let th = mean.tanh();
    (
        BACKGROUND_BASE + BACKGROUND_SWING * th,
        BACKGROUND_SWING * (1.0 - th * th) / k,
    )
}

/// Per-pixel soft composition state for the active (gate > 0) objects.
struct Composite {
    /// Soft occupancy `o_k`.
    occ: Vec<f64>,
    /// Logistic edge `e_k` (occupancy before gating).
    edge: Vec<f64>,
    dist: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
    /// Transmittance `T_k` through the other objects.
    trans: Vec<f64>,
    /// Background weight `prod (1 - o_k)`.
    bg: f64,
}

/// Soft "j is in front of m" weights for each ordered pair of active objects.
fn front_weights(objs: &[&Object]) -> Vec<f64> {
    let n = objs.len();
    let mut s = vec![0.0; n * n];
    for j in 0..n {
        for m in 0..n {
            if j != m {
                s[j * n + m] = sigmoid((objs[m].depth - objs[j].depth) / DEPTH_TEMPERATURE);
            }
        }
    }
    s
}

impl Composite {
    fn new(n: usize) -> Self {
        Composite {
            occ: vec![0.0; n],
            edge: vec![0.0; n],
            dist: vec![0.0; n],
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            trans: vec![1.0; n],
            bg: 1.0,
        }
    }

    /// Evaluate the composition at canvas position `(x, y)`.
    fn eval(&mut self, objs: &[&Object], front: &[f64], x: f64, y: f64, tau: f64) {
        let n = objs.len();
        self.bg = 1.0;
        for (k, o) in objs.iter().enumerate() {
            let dx = x - o.cx;
            let dy = y - o.cy;
            let d = (dx * dx + dy * dy).sqrt();
            let e = sigmoid((o.radius - d) / tau);
            self.dx[k] = dx;
            self.dy[k] = dy;
            self.dist[k] = d;
            self.edge[k] = e;
            self.occ[k] = o.gate * e;
            self.bg *= 1.0 - self.occ[k];
        }
        for m in 0..n {
            let mut t = 1.0;
            for j in 0..n {
                if j != m {
                    t *= 1.0 - self.occ[j] * front[j * n + m];
                }
            }
            self.trans[m] = t;
        }
    }
}

/// Canvas coordinate of sample `j` on a corner-aligned grid of `res` samples.
fn sample_coord(j: usize, res: usize, resolution: usize) -> f64 {
    if res == 1 {
        return (resolution as f64 - 1.0) / 2.0;
    }
    j as f64 * (resolution as f64 - 1.0) / (res as f64 - 1.0)
}

/// Edge softness used at a block whose samples are `spacing` pixels apart;
/// widens the logistic to roughly match an area average over one cell.
fn block_tau(tau: f64, spacing: f64) -> f64 {
    let extra =
        ((spacing * spacing - 1.0).max(0.0)) / (4.0 * std::f64::consts::PI * std::f64::consts::PI);
    (tau * tau + extra).sqrt()
}

/// Render only the image.
pub fn render_image(latent: &Latent, config: &SceneConfig) -> Result<Image> {
    let pixels = render_pixels(latent, config)?;
    Image::from_vec(
        config.resolution,
        pixels.into_iter().map(|v| v as f32).collect(),
    )
}

/// Render the image at full precision as interleaved RGB.
pub fn render_pixels(latent: &Latent, config: &SceneConfig) -> Result<Vec<f64>> {
    latent.check(config)?;
    let all = objects(latent, config);
    let active: Vec<&Object> = all.iter().filter(|o| o.gate > 0.0).collect();
    let front = front_weights(&active);
    let (bg, _) = background(latent, config);
    let r = config.resolution;
    let mut data = Vec::with_capacity(r * r * 3);
    let mut c = Composite::new(active.len());
    for y in 0..r {
        for x in 0..r {
            c.eval(&active, &front, x as f64, y as f64, config.tau);
            let mut rgb = [c.bg * bg; 3];
            for (k, o) in active.iter().enumerate() {
                let w = c.occ[k] * c.trans[k];
                for (v, oc) in rgb.iter_mut().zip(&o.color) {
                    *v += w * oc;
                }
            }
            data.extend_from_slice(&rgb);
        }
    }
    Ok(data)
}

/// Render the image and every feature block.
pub fn render(latent: &Latent, config: &SceneConfig) -> Result<(Image, FeatureStack)> {
    let image = render_image(latent, config)?;
    let features = render_features(latent, config)?;
    Ok((image, features))
}

pub fn render_features(latent: &Latent, config: &SceneConfig) -> Result<FeatureStack> {
    latent.check(config)?;
    let all = objects(latent, config);
    let active_idx: Vec<usize> = (0..all.len()).filter(|&k| all[k].gate > 0.0).collect();
    let active: Vec<&Object> = active_idx.iter().map(|&k| &all[k]).collect();
    let front = front_weights(&active);
    let p = config.classes;
    let bank = config.bank_channels();
    let sdf_scale = config.resolution as f64 / 8.0;
    let mut blocks = Vec::with_capacity(config.blocks());
    let mut channel_buf = vec![0.0f64; bank];
    for (l, res) in config.block_resolutions().into_iter().enumerate() {
        let ch = config.block_channels[l];
        let spacing = if res > 1 {
            (config.resolution as f64 - 1.0) / (res as f64 - 1.0)
        } else {
            config.resolution as f64
        };
        let tau = block_tau(config.tau, spacing);
        let mut data = Vec::with_capacity(res * res * ch);
        let mut c = Composite::new(active.len());
        for j in 0..res {
            let y = sample_coord(j, res, config.resolution);
            for i in 0..res {
                let x = sample_coord(i, res, config.resolution);
                c.eval(&active, &front, x, y, tau);
                channel_buf.iter_mut().for_each(|v| *v = 0.0);
                channel_buf[0] = c.bg;
                let mut depth = c.bg * FAR_DEPTH as f64;
                for (k, o) in active.iter().enumerate() {
                    let w = c.occ[k] * c.trans[k];
                    for (f, cw) in o.class_weights.iter().enumerate() {
                        channel_buf[f + 1] += w * cw;
                    }
                    depth += w * o.depth;
                    channel_buf[p + 1 + active_idx[k]] =
                        o.gate * ((o.radius - c.dist[k]) / sdf_scale).tanh();
                }
                channel_buf[p] = depth / FAR_DEPTH as f64;
                data.extend(channel_buf[..ch].iter().map(|&v| v as f32));
            }
        }
        blocks.push(FeatureBlock {
            res,
            channels: ch,
            data,
        });
    }
    Ok(FeatureStack { blocks })
}

/// Vector-Jacobian product of [`render_image`] with a per-pixel RGB cotangent.
pub fn render_gradient(
    latent: &Latent,
    config: &SceneConfig,
    cotangent: &[f32],
) -> Result<Vec<f64>> {
    latent.check(config)?;
    let r = config.resolution;
    if cotangent.len() != r * r * 3 {
        return Err(Error::shape("pixel cotangent", r * r * 3, cotangent.len()));
    }
    if let Some(i) = cotangent.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "pixel cotangent".into(),
            index: i,
        });
    }
    let all = objects(latent, config);
    let active_idx: Vec<usize> = (0..all.len()).filter(|&k| all[k].gate > 0.0).collect();
    let active: Vec<&Object> = active_idx.iter().map(|&k| &all[k]).collect();
    let n = active.len();
    let front = front_weights(&active);
    let (bg, dbg) = background(latent, config);
    let tau = config.tau;
    let fg = config.foreground();

    // Object-level accumulators.
    let mut g_gate = vec![0.0; n];
    let mut g_cx = vec![0.0; n];
    let mut g_cy = vec![0.0; n];
    let mut g_radius = vec![0.0; n];
    let mut g_depth = vec![0.0; n];
    let mut g_class = vec![0.0; n];
    let mut g_bg = 0.0;

    let mut g_occ = vec![0.0; n];
    let mut g_trans = vec![0.0; n];
    let mut c = Composite::new(n);
    for y in 0..r {
        for x in 0..r {
            let base = (y * r + x) * 3;
            let lam = [
                cotangent[base] as f64,
                cotangent[base + 1] as f64,
                cotangent[base + 2] as f64,
            ];
            if lam == [0.0; 3] {
                continue;
            }
            let lam_sum = lam[0] + lam[1] + lam[2];
            c.eval(&active, &front, x as f64, y as f64, tau);
            g_bg += lam_sum * c.bg;
            let g_bgw = lam_sum * bg;
            for k in 0..n {
                let o = active[k];
                let w = c.occ[k] * c.trans[k];
                let q = lam[0] * o.color[0] + lam[1] * o.color[1] + lam[2] * o.color[2];
                let mut dcls = 0.0;
                for (pal, dw) in PALETTE.iter().take(fg).zip(&o.class_dweights) {
                    let pf =
                        lam[0] * pal[0] as f64 + lam[1] * pal[1] as f64 + lam[2] * pal[2] as f64;
                    dcls += pf * dw;
                }
                g_class[k] += w * dcls;
                g_occ[k] = q * c.trans[k];
                g_trans[k] = q * c.occ[k];
                // Background weight: prod over j of (1 - o_j).
                let mut others = 1.0;
                for j in 0..n {
                    if j != k {
                        others *= 1.0 - c.occ[j];
                    }
                }
                g_occ[k] -= g_bgw * others;
            }
            // Transmittance T_m = prod_{j != m} (1 - o_j s_jm).
            for m in 0..n {
                if g_trans[m] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    if j == m {
                        continue;
                    }
                    let mut rest = 1.0;
                    for i in 0..n {
                        if i != m && i != j {
                            rest *= 1.0 - c.occ[i] * front[i * n + m];
                        }
                    }
                    let s = front[j * n + m];
                    g_occ[j] -= g_trans[m] * s * rest;
                    let g_s = -g_trans[m] * c.occ[j] * rest;
                    let ds = s * (1.0 - s) / DEPTH_TEMPERATURE;
                    g_depth[m] += g_s * ds;
                    g_depth[j] -= g_s * ds;
                }
            }
            for k in 0..n {
                let o = active[k];
                g_gate[k] += g_occ[k] * c.edge[k];
                let g_edge = g_occ[k] * o.gate;
                let de = c.edge[k] * (1.0 - c.edge[k]) / tau * g_edge;
                g_radius[k] += de;
                let d = c.dist[k];
                if d > 0.0 {
                    // d(dist)/d(cx) = -dx / dist
                    g_cx[k] += de * c.dx[k] / d;
                    g_cy[k] += de * c.dy[k] / d;
                }
            }
        }
    }

    let mut grad = vec![0.0; config.latent_dim()];
    for s in 0..config.slots {
        grad[s * SLOT_PARAMS + DEPTH] += g_bg * dbg;
    }
    for (k, &slot) in active_idx.iter().enumerate() {
        let o = active[k];
        let g = &mut grad[slot * SLOT_PARAMS..(slot + 1) * SLOT_PARAMS];
        g[PRESENCE] += g_gate[k] * o.dgate;
        g[CLASS] += g_class[k];
        g[CENTER_X] += g_cx[k] * o.dcx;
        g[CENTER_Y] += g_cy[k] * o.dcy;
        g[RADIUS] += g_radius[k] * o.dradius;
        g[DEPTH] += g_depth[k] * o.ddepth;
    }
    Ok(grad)
}

/// Hard-edged ground truth for a latent.
pub fn oracle_labels(latent: &Latent, config: &SceneConfig) -> Result<OracleLabels> {
    latent.check(config)?;
    let objs = objects(latent, config);
    let r = config.resolution;
    let mut seg = vec![0u32; r * r];
    let mut depth = vec![FAR_DEPTH; r * r];
    let mut covered = vec![0usize; config.slots];
    let mut unoccluded = vec![0usize; config.slots];
    for y in 0..r {
        for x in 0..r {
            let mut best: Option<usize> = None;
            for (k, o) in objs.iter().enumerate() {
                if !o.hard_present {
                    continue;
                }
                let dx = x as f64 - o.cx;
                let dy = y as f64 - o.cy;
                if (dx * dx + dy * dy).sqrt() <= o.radius {
                    covered[k] += 1;
                    if best.is_none_or(|b| o.depth < objs[b].depth) {
                        best = Some(k);
                    }
                }
            }
            if let Some(k) = best {
                unoccluded[k] += 1;
                seg[y * r + x] = objs[k].hard_class as u32;
                depth[y * r + x] = objs[k].depth as f32;
            }
        }
    }
    let mut presence = vec![false; config.classes];
    for &c in &seg {
        presence[c as usize] = true;
    }
    let keypoints = objs
        .iter()
        .enumerate()
        .map(|(k, o)| Keypoint {
            x: o.cx,
            y: o.cy,
            visible: o.hard_present && covered[k] > 0 && 4 * unoccluded[k] >= covered[k],
        })
        .collect();
    Ok(OracleLabels {
        segmentation: Grid::from_vec(r, seg)?,
        keypoints,
        depth: Grid::from_vec(r, depth)?,
        presence,
    })
}

/// Pixels whose distance to every present object's boundary exceeds `margin`.
pub fn clear_of_edges(latent: &Latent, config: &SceneConfig, margin: f64) -> Result<Grid<bool>> {
    latent.check(config)?;
    let objs = objects(latent, config);
    let r = config.resolution;
    let mut out = Grid::filled(r, true);
    for y in 0..r {
        for x in 0..r {
            let clear = objs.iter().filter(|o| o.hard_present).all(|o| {
                let d = ((x as f64 - o.cx).powi(2) + (y as f64 - o.cy).powi(2)).sqrt();
                (d - o.radius).abs() > margin
            });
            out.set(x, y, clear);
        }
    }
    Ok(out)
}

/// Background color of a latent's scene.
pub fn background_shade(latent: &Latent, config: &SceneConfig) -> f32 {
    background(latent, config).0 as f32
}

fn draw_natural<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Latent {
    let k = config.slots;
    let fg = config.foreground();
    let mut slots: Vec<[f64; SLOT_PARAMS]> = Vec::with_capacity(k);
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let span = config.resolution as f64 - 1.0;
    let (cw, ch) = (span / cols as f64, span / rows as f64);
    let center = |rng: &mut R, s: usize, lo: f64, hi: f64| {
        let px = cw * ((s % cols) as f64 + rng.random_range(lo..hi));
        let py = ch * ((s / cols) as f64 + rng.random_range(lo..hi));
        (
            center_param_for(px, config.resolution),
            center_param_for(py, config.resolution),
        )
    };
    match config.layout {
        Layout::Free => {
            let want_rare = rng.random_bool(config.rare_frequency);
            let rare_slot = rng.random_range(0..k);
            let common: Vec<usize> = (1..config.classes)
                .filter(|&c| c != config.rare_class)
                .collect();
            for s in 0..k {
                let present = (want_rare && s == rare_slot) || rng.random_bool(0.7);
                let class = if (want_rare && s == rare_slot) || common.is_empty() {
                    config.rare_class
                } else {
                    common[rng.random_range(0..common.len())]
                };
                let presence = if present {
                    rng.random_range(1.5..3.0)
                } else {
                    -rng.random_range(1.5..3.0)
                };
                let (cx, cy) = center(rng, s, 0.15, 0.85);
                slots.push([
                    presence,
                    class_offset_for(class, config.classes),
                    cx,
                    cy,
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-2.5..2.5),
                ]);
            }
        }
        Layout::Anchored => {
            for s in 0..k {
                let (cx, cy) = center(rng, s, 0.3, 0.7);
                slots.push([
                    rng.random_range(1.5..3.0),
                    class_offset_for(1 + s % fg, config.classes),
                    cx,
                    cy,
                    rng.random_range(-1.5..-0.5),
                    rng.random_range(-2.5..2.5),
                ]);
            }
        }
    }
    // Keep depth coordinates of distinct slots apart so the soft order is unambiguous.
    for s in 1..k {
        for _ in 0..64 {
            let z = slots[s][DEPTH];
            if slots[..s].iter().all(|o| (o[DEPTH] - z).abs() >= 0.1) {
                break;
            }
            slots[s][DEPTH] = rng.random_range(-2.5..2.5);
        }
    }
    Latent(slots.into_iter().flatten().collect())
}

/// Draw a latent. With `rare_bias`, a Bernoulli target for rare-class presence
/// is drawn first and natural latents are resampled until the oracle agrees.
pub fn sample_latent<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    rare_bias: Option<f64>,
) -> Result<Latent> {
    config.validate()?;
    let Some(bias) = rare_bias else {
        return Ok(draw_natural(rng, config));
    };
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::Input(format!(
            "rare bias must be in [0, 1], got {bias}"
        )));
    }
    let target = rng.random_bool(bias);
    let mut hits = 0usize;
    for _ in 0..REJECTION_BUDGET {
        let latent = draw_natural(rng, config);
        let present = oracle_labels(&latent, config)?.presence[config.rare_class];
        if present {
            hits += 1;
        }
        if present == target {
            return Ok(latent);
        }
    }
    Err(Error::RejectionBudget {
        budget: REJECTION_BUDGET,
        target: if target { 1.0 } else { 0.0 },
        achieved: hits as f64 / REJECTION_BUDGET as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty(config: &SceneConfig) -> Latent {
        let mut l = Latent::zeros(config);
        for k in 0..config.slots {
            l.0[k * SLOT_PARAMS + PRESENCE] = -3.0;
        }
        l
    }

    #[test]
    fn config_arithmetic() {
        let c = SceneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.blocks(), 5);
        assert_eq!(c.block_resolutions(), vec![4, 8, 16, 32, 64]);
        assert_eq!(c.latent_dim(), 24);
        assert_eq!(c.feature_dim(), 5 * 10);
        let mut bad = c.clone();
        bad.resolution = 48;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.block_channels.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_scene_is_background() {
        let c = SceneConfig::default();
        let l = empty(&c);
        let img = render_image(&l, &c).unwrap();
        let bg = background_shade(&l, &c);
        assert!(img.data().iter().all(|&v| v == bg));
        let o = oracle_labels(&l, &c).unwrap();
        assert!(o.segmentation.data().iter().all(|&v| v == 0));
        assert!(o.depth.data().iter().all(|&v| v == FAR_DEPTH));
        assert!(o.keypoints.iter().all(|k| !k.visible));
        assert_eq!(o.presence, vec![true, false, false, false, false]);
    }

    #[test]
    fn centered_object_is_point_symmetric() {
        let c = SceneConfig::default();
        let mut l = empty(&c);
        l.0[PRESENCE] = 2.0;
        l.0[CLASS] = class_offset_for(2, c.classes);
        l.0[RADIUS] = 0.7;
        let (img, feats) = render(&l, &c).unwrap();
        let r = c.resolution;
        for y in 0..r {
            for x in 0..r {
                let a = img.pixel(x, y);
                let b = img.pixel(r - 1 - x, r - 1 - y);
                for ch in 0..3 {
                    assert!((a[ch] - b[ch]).abs() <= 1e-6);
                }
            }
        }
        for block in &feats.blocks {
            let n = block.res;
            for y in 0..n {
                for x in 0..n {
                    for ch in 0..block.channels {
                        let d = block.at(x, y, ch) - block.at(n - 1 - x, n - 1 - y, ch);
                        assert!(d.abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn nearer_object_wins_overlap() {
        let c = SceneConfig::default();
        let mut l = empty(&c);
        let half = (c.resolution as f64 - 1.0) / 2.0;
        for (k, (class, z)) in [(1usize, -1.0), (3usize, 1.0)].into_iter().enumerate() {
            let s = &mut l.0[k * SLOT_PARAMS..(k + 1) * SLOT_PARAMS];
            s[PRESENCE] = 2.0;
            s[CLASS] = class_offset_for(class, c.classes);
            s[CENTER_X] = center_param_for(half + k as f64 * 3.0, c.resolution);
            s[CENTER_Y] = 0.0;
            s[DEPTH] = z;
        }
        let o = oracle_labels(&l, &c).unwrap();
        let y = half.round() as usize;
        let x = (half + 1.5).round() as usize;
        assert_eq!(*o.segmentation.get(x, y), 1);
        assert!(o.presence[1] && o.presence[3]);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let c = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = sample_latent(&mut rng, &c, None).unwrap();
        let g = render_gradient(&l, &c, &vec![0.0; 64 * 64 * 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_object_center_has_no_gradient() {
        let c = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = sample_latent(&mut rng, &c, None).unwrap();
        l.0[PRESENCE] = -3.0;
        let cot: Vec<f32> = (0..64 * 64 * 3)
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let g = render_gradient(&l, &c, &cot).unwrap();
        assert!(g[CENTER_X].abs() <= 1e-4 && g[CENTER_Y].abs() <= 1e-4);
        // Forward perturbation agrees: moving the absent center changes nothing.
        let before = render_image(&l, &c).unwrap();
        l.0[CENTER_X] += 0.5;
        assert_eq!(render_image(&l, &c).unwrap(), before);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = SceneConfig::default();
        let a = sample_latent(&mut ChaCha8Rng::seed_from_u64(9), &c, Some(0.3)).unwrap();
        let b = sample_latent(&mut ChaCha8Rng::seed_from_u64(9), &c, Some(0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_rare_presence() {
        let c = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let l = sample_latent(&mut rng, &c, Some(1.0)).unwrap();
            assert!(oracle_labels(&l, &c).unwrap().presence[c.rare_class]);
        }
    }

    #[test]
    fn anchored_layout_keeps_slot_classes() {
        let c = SceneConfig {
            layout: Layout::Anchored,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l = sample_latent(&mut rng, &c, None).unwrap();
        let objs = objects(&l, &c);
        for (k, o) in objs.iter().enumerate() {
            assert!(o.hard_present);
            assert_eq!(o.hard_class, 1 + k % 4);
        }
    }

    #[test]
    fn rejection_budget_reports_frequency() {
        // An anchored layout with no slot of the rare class can never show it.
        let mut c = SceneConfig::new(16, 2, 5);
        c.layout = Layout::Anchored;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_latent(&mut rng, &c, Some(1.0)).unwrap_err();
        assert!(matches!(err, Error::RejectionBudget { achieved, .. } if achieved == 0.0));
    }
}
