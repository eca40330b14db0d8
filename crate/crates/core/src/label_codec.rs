//! Label transformations: class collapse, keypoint heatmaps and depth
//! validity masks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::image::Grid;
use crate::label_generator::{LabelPlane, TaskKind};
use crate::scene::{Keypoint, OracleLabels, FAR_DEPTH};
use crate::{Error, Result};

/// Peak value of an encoded keypoint heatmap.
pub const HEATMAP_PEAK: f32 = 10.0;

/// Total many-to-one class remapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollapseMap {
    map: Vec<u32>,
    targets: usize,
}

impl CollapseMap {
    /// `map[src]` is the target of source class `src`. Targets must cover `0..=max`.
    pub fn new(map: Vec<u32>) -> Result<Self> {
        let targets = map.iter().map(|&t| t as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; targets];
        for &t in &map {
            seen[t as usize] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "collapse map never produces target class {gap}"
            )));
        }
        Ok(CollapseMap { map, targets })
    }

    pub fn identity(classes: usize) -> Self {
        CollapseMap {
            map: (0..classes as u32).collect(),
            targets: classes,
        }
    }

    pub fn source_classes(&self) -> usize {
        self.map.len()
    }

    pub fn target_classes(&self) -> usize {
        self.targets
    }

    pub fn target(&self, src: u32) -> Option<u32> {
        self.map.get(src as usize).copied()
    }

    /// Whether collapsing twice equals collapsing once.
    pub fn is_idempotent(&self) -> bool {
        self.map
            .iter()
            .all(|&t| self.map.get(t as usize).is_some_and(|&tt| tt == t))
    }

    /// Parse `src=tgt` lines. Blank lines and `#` comments are ignored; every
    /// source class from 0 to the largest one listed must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || {
                Error::Config(format!(
                    "collapse map line {}: expected `src=tgt`, got `{raw}`",
                    i + 1
                ))
            };
            let (s, t) = line.split_once('=').ok_or_else(bad)?;
            let s: u32 = s.trim().parse().map_err(|_| bad())?;
            let t: u32 = t.trim().parse().map_err(|_| bad())?;
            if pairs.insert(s, t).is_some() {
                return Err(Error::Config(format!(
                    "collapse map lists source class {s} twice"
                )));
            }
        }
        let n = pairs.keys().next_back().map_or(0, |&k| k as usize + 1);
        if pairs.len() != n {
            let missing = (0..n as u32).find(|k| !pairs.contains_key(k)).unwrap_or(0);
            return Err(Error::Config(format!(
                "collapse map has no entry for source class {missing}"
            )));
        }
        CollapseMap::new(pairs.into_values().collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.map
            .iter()
            .enumerate()
            .map(|(s, t)| format!("{s}={t}\n"))
            .collect()
    }
}

/// Remap every pixel of a class mask.
pub fn collapse(mask: &Grid<u32>, map: &CollapseMap) -> Result<Grid<u32>> {
    let mut out = Vec::with_capacity(mask.len());
    for &c in mask.data() {
        out.push(
            map.target(c)
                .ok_or_else(|| Error::Input(format!("class {c} has no collapse target")))?,
        );
    }
    Grid::from_vec(mask.size(), out)
}

/// One Gaussian heatmap per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub sigma: f64,
    pub grids: Vec<Grid<f32>>,
}

/// `10 · exp(−d² / 2σ²)` around each visible keypoint; zeros for invisible ones.
pub fn encode_keypoints(kps: &[Keypoint], size: usize, sigma: f64) -> Result<HeatmapSet> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let grids = kps
        .iter()
        .map(|kp| {
            let mut g = Grid::filled(size, 0.0f32);
            if kp.visible {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
                        g.set(x, y, (HEATMAP_PEAK as f64 * (-d2 * inv).exp()) as f32);
                    }
                }
            }
            g
        })
        .collect();
    Ok(HeatmapSet { sigma, grids })
}

/// Location of a heatmap maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    /// Every value in the grid was equal, so the location carries no information.
    pub degenerate: bool,
}

/// Argmax of a row-major `size × size` grid; ties go to the lowest index.
pub fn decode_grid(values: &[f32], size: usize) -> Peak {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let degenerate = values.iter().all(|&v| v == values[0]);
    Peak {
        x: best % size.max(1),
        y: best / size.max(1),
        degenerate,
    }
}

pub fn decode_heatmaps(set: &HeatmapSet) -> Vec<Peak> {
    set.grids
        .iter()
        .map(|g| decode_grid(g.data(), g.size()))
        .collect()
}

/// True where the depth differs from the corruption marker.
pub fn validity_mask(depth: &Grid<f32>, corrupt_value: f32) -> Grid<bool> {
    depth.map(|&d| d != corrupt_value)
}

/// Depth value marking a corrupted pixel.
pub const CORRUPT_DEPTH: f32 = 0.0;

/// Copy of `depth` with a random `fraction` of pixels set to [`CORRUPT_DEPTH`].
pub fn corrupt_depth<R: Rng + ?Sized>(rng: &mut R, depth: &Grid<f32>, fraction: f64) -> Grid<f32> {
    let mut out = depth.clone();
    for v in out.data_mut() {
        if rng.random_bool(fraction.clamp(0.0, 1.0)) {
            *v = CORRUPT_DEPTH;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Keypoints,
    Depth,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Task::Segmentation),
            "keypoints" => Ok(Task::Keypoints),
            "depth" => Ok(Task::Depth),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected segmentation, keypoints or depth)"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Keypoints => "keypoints",
            Task::Depth => "depth",
        })
    }
}

/// How oracle labels become training labels for a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub classes: usize,
    pub keypoints: usize,
    pub heatmap_sigma: f64,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self.task {
            Task::Segmentation => TaskKind::Discrete {
                classes: self.classes,
            },
            Task::Keypoints => TaskKind::Continuous {
                outputs: self.keypoints,
                scale: HEATMAP_PEAK,
            },
            Task::Depth => TaskKind::Continuous {
                outputs: 1,
                scale: FAR_DEPTH,
            },
        }
    }

    /// Label plane and optional per-value loss weights for an oracle labeling.
    /// Invisible keypoints get zero weight; `depth_override` replaces the depth
    /// grid (for corrupted copies) and zero-weights corrupted pixels.
    pub fn training_labels(
        &self,
        oracle: &OracleLabels,
        depth_override: Option<&Grid<f32>>,
    ) -> Result<(LabelPlane, Option<Vec<f32>>)> {
        let size = oracle.segmentation.size();
        match self.task {
            Task::Segmentation => Ok((LabelPlane::Classes(oracle.segmentation.clone()), None)),
            Task::Keypoints => {
                let set = encode_keypoints(&oracle.keypoints, size, self.heatmap_sigma)?;
                let k = set.grids.len();
                let mut data = vec![0.0; size * size * k];
                let mut weights = vec![0.0; size * size * k];
                for (c, (g, kp)) in set.grids.iter().zip(&oracle.keypoints).enumerate() {
                    for (p, &v) in g.data().iter().enumerate() {
                        data[p * k + c] = v;
                        weights[p * k + c] = if kp.visible { 1.0 } else { 0.0 };
                    }
                }
                Ok((
                    LabelPlane::Values {
                        size,
                        channels: k,
                        data,
                    },
                    Some(weights),
                ))
            }
            Task::Depth => {
                let depth = depth_override.unwrap_or(&oracle.depth);
                let weights = depth_override.map(|d| {
                    validity_mask(d, CORRUPT_DEPTH)
                        .data()
                        .iter()
                        .map(|&v| if v { 1.0 } else { 0.0 })
                        .collect()
                });
                Ok((
                    LabelPlane::Values {
                        size,
                        channels: 1,
                        data: depth.data().to_vec(),
                    },
                    weights,
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, visible: bool) -> Keypoint {
        Keypoint { x, y, visible }
    }

    #[test]
    fn pointwise_collapse() {
        let map = CollapseMap::parse("0=0\n1=1\n2=1\n").unwrap();
        let mask = Grid::from_vec(2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(collapse(&mask, &map).unwrap().data(), &[0, 1, 1, 0]);
        assert!(map.is_idempotent());
        let id = CollapseMap::identity(3);
        assert_eq!(collapse(&mask, &id).unwrap(), mask);
        let bad = Grid::from_vec(1, vec![5]).unwrap();
        assert!(collapse(&bad, &map).is_err());
    }

    #[test]
    fn parse_rejects_gaps_and_duplicates() {
        assert!(CollapseMap::parse("0=0\n2=1\n").is_err());
        assert!(CollapseMap::parse("0=0\n0=1\n").is_err());
        assert!(CollapseMap::parse("0=0\n1=2\n").is_err());
        assert!(CollapseMap::parse("0=x\n").is_err());
        let m = CollapseMap::parse("# comment\n\n1 = 0\n0=1 # swap\n").unwrap();
        assert_eq!(CollapseMap::parse(&m.to_text()).unwrap(), m);
        assert!(!m.is_idempotent());
    }

    #[test]
    fn heatmap_values() {
        let set = encode_keypoints(&[kp(3.0, 4.0, true), kp(1.0, 1.0, false)], 8, 2.0).unwrap();
        assert_eq!(*set.grids[0].get(3, 4), 10.0);
        let one_sigma = *set.grids[0].get(5, 4);
        assert!((one_sigma - 6.065_306_6).abs() < 1e-5);
        assert!(set.grids[1].data().iter().all(|&v| v == 0.0));
        let peaks = decode_heatmaps(&set);
        assert_eq!((peaks[0].x, peaks[0].y, peaks[0].degenerate), (3, 4, false));
        assert_eq!((peaks[1].x, peaks[1].y, peaks[1].degenerate), (0, 0, true));
        assert!(encode_keypoints(&[], 4, 0.0).is_err());
    }

    #[test]
    fn decode_ties_go_to_lowest_index() {
        let mut g = vec![0.0f32; 16];
        g[4 + 1] = 3.0;
        g[2 * 4 + 2] = 3.0;
        let p = decode_grid(&g, 4);
        assert_eq!((p.x, p.y), (1, 1));
    }

    #[test]
    fn validity_marks_corrupt_pixels() {
        let d = Grid::from_vec(2, vec![0.0, 3.0, 0.0, 80.0]).unwrap();
        assert_eq!(validity_mask(&d, 0.0).data(), &[false, true, false, true]);
    }
}
