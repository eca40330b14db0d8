//! Segmentation, keypoint and depth metrics.
//!
//! Every metric has a per-image function and an accumulator whose `finish`
//! computes the dataset-level value from pooled counts or sums.

use std::fmt::Write as _;

use crate::image::Grid;
use crate::{Error, Result};

pub const DEPTH_MIN: f64 = 0.001;
pub const DEPTH_MAX: f64 = 80.0;
/// PCK thresholds reported in evaluation tables.
pub const PCK_ALPHAS: [f64; 3] = [0.10, 0.05, 0.02];

fn same_size<A, B>(what: &'static str, a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(what, a.size(), b.size()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegScore {
    /// `None` for classes absent from both masks.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class intersection and union pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl SegCounts {
    pub fn new(classes: usize) -> Self {
        SegCounts {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &Grid<u32>, truth: &Grid<u32>) -> Result<()> {
        same_size("segmentation masks", pred, truth)?;
        let n = self.union.len();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::Input(format!(
                    "class index {} >= class count {n}",
                    p.max(t)
                )));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<SegScore> {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Input("no class occurs in either mask".into()));
        }
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(SegScore { per_class, miou })
    }
}

/// Intersection over union per class; the mean skips classes absent from both masks.
pub fn iou(pred: &Grid<u32>, truth: &Grid<u32>, classes: usize) -> Result<SegScore> {
    let mut c = SegCounts::new(classes);
    c.add(pred, truth)?;
    c.finish()
}

/// Correct and visible keypoint counts for one image.
pub fn pck_counts(
    pred: &[(f64, f64)],
    truth: &[(f64, f64)],
    visible: &[bool],
    alpha: f64,
) -> Result<(usize, usize)> {
    if pred.len() != truth.len() || truth.len() != visible.len() {
        return Err(Error::shape("keypoint lists", truth.len(), pred.len()));
    }
    let vis: Vec<usize> = (0..truth.len()).filter(|&k| visible[k]).collect();
    if vis.is_empty() {
        return Err(Error::Input("no visible keypoints".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &k in &vis {
        x0 = x0.min(truth[k].0);
        x1 = x1.max(truth[k].0);
        y0 = y0.min(truth[k].1);
        y1 = y1.max(truth[k].1);
    }
    let threshold = alpha * (x1 - x0).max(y1 - y0);
    let correct = vis
        .iter()
        .filter(|&&k| {
            let d = ((pred[k].0 - truth[k].0).powi(2) + (pred[k].1 - truth[k].1).powi(2)).sqrt();
            d <= threshold
        })
        .count();
    Ok((correct, vis.len()))
}

/// Fraction of visible keypoints within `alpha · max(h, w)` of the truth, where
/// `h × w` is the bounding box of the visible true keypoints.
pub fn pck(pred: &[(f64, f64)], truth: &[(f64, f64)], visible: &[bool], alpha: f64) -> Result<f64> {
    let (c, n) = pck_counts(pred, truth, visible, alpha)?;
    Ok(c as f64 / n as f64)
}

/// Masked squared-error sums for NMSE.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmseSums {
    pub error: f64,
    pub norm: f64,
    pub count: usize,
}

impl NmseSums {
    pub fn add(&mut self, pred: &Grid<f32>, truth: &Grid<f32>, valid: &Grid<bool>) -> Result<()> {
        same_size("depth grids", pred, truth)?;
        same_size("validity mask", truth, valid)?;
        for ((&p, &t), &v) in pred.data().iter().zip(truth.data()).zip(valid.data()) {
            if v {
                self.error += (p as f64 - t as f64).powi(2);
                self.norm += (t as f64).powi(2);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Input("no valid depth pixels".into()));
        }
        if self.norm == 0.0 {
            return Err(Error::Input(
                "ground-truth depth is zero on every valid pixel".into(),
            ));
        }
        Ok(self.error / self.norm)
    }
}

/// `‖(pred − truth)|valid‖² / ‖truth|valid‖²`.
pub fn mnmse(pred: &Grid<f32>, truth: &Grid<f32>, valid: &Grid<bool>) -> Result<f64> {
    let mut s = NmseSums::default();
    s.add(pred, truth, valid)?;
    s.finish()
}

/// Squared-error sums over the central crop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmseSums {
    pub squared: f64,
    pub squared_log: f64,
    pub count: usize,
}

/// Start and length of the central half of an axis of length `n`.
pub fn central_crop(n: usize) -> (usize, usize) {
    let len = n / 2;
    ((n - len) / 2, len)
}

impl RmseSums {
    pub fn add(&mut self, pred: &Grid<f32>, truth: &Grid<f32>) -> Result<()> {
        same_size("depth grids", pred, truth)?;
        let n = pred.size();
        if n < 2 {
            return Err(Error::Input(format!(
                "depth grid must be at least 2×2, got {n}×{n}"
            )));
        }
        let (start, len) = central_crop(n);
        for y in start..start + len {
            for x in start..start + len {
                let p = (*pred.get(x, y) as f64).clamp(DEPTH_MIN, DEPTH_MAX);
                let t = (*truth.get(x, y) as f64).clamp(DEPTH_MIN, DEPTH_MAX);
                self.squared += (p - t).powi(2);
                self.squared_log += (p.ln() - t.ln()).powi(2);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::Input("no depth pixels".into()));
        }
        let n = self.count as f64;
        Ok(((self.squared / n).sqrt(), (self.squared_log / n).sqrt()))
    }
}

/// RMSE and log-RMSE over the central crop with both sides clamped to `[0.001, 80]`.
pub fn rmse_pair(pred: &Grid<f32>, truth: &Grid<f32>) -> Result<(f64, f64)> {
    let mut s = RmseSums::default();
    s.add(pred, truth)?;
    s.finish()
}

/// A metrics CSV: one row per image plus an aggregate row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl MetricTable {
    pub fn new(columns: Vec<String>) -> Self {
        MetricTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn segmentation(classes: usize) -> Self {
        let mut cols = vec!["miou".to_string()];
        cols.extend((0..classes).map(|k| format!("iou_class_{k}")));
        Self::new(cols)
    }

    pub fn keypoints() -> Self {
        Self::new(PCK_ALPHAS.iter().map(|a| format!("pck_{a:.2}")).collect())
    }

    pub fn depth() -> Self {
        Self::new(vec!["mnmse".into(), "rmse".into(), "rmse_log".into()])
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::shape("metric row", self.columns.len(), values.len()));
        }
        self.rows.push((name.into(), values));
        Ok(())
    }

    /// Value of `column` in the row named `row`.
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(n, _)| n == row)?.1[c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, vals) in &self.rows {
            out.push_str(name);
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g<T>(n: usize, v: Vec<T>) -> Grid<T> {
        Grid::from_vec(n, v).unwrap()
    }

    #[test]
    fn iou_worked_example() {
        let s = iou(&g(2, vec![0, 1, 1, 0]), &g(2, vec![0, 1, 0, 0]), 2).unwrap();
        assert_eq!(s.per_class, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert!((s.miou - 7.0 / 12.0).abs() < 1e-15);
        let d = iou(&g(1, vec![0]), &g(1, vec![1]), 3).unwrap();
        assert_eq!(d.per_class, vec![Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn pck_boundary_counts() {
        let truth = [(0.0, 0.0), (10.0, 0.0)];
        let pred = [(1.0, 0.0), (10.0, 0.0)];
        assert_eq!(pck(&pred, &truth, &[true, true], 0.1).unwrap(), 1.0);
        assert!(pck(&pred, &truth, &[false, false], 0.1).is_err());
    }

    #[test]
    fn mnmse_example() {
        let v = mnmse(&g(1, vec![2.0]), &g(1, vec![1.0]), &g(1, vec![true])).unwrap();
        assert_eq!(v, 1.0);
        let p = Grid::from_vec(2, vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let t = Grid::from_vec(2, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let m = Grid::from_vec(2, vec![true, true, false, false]).unwrap();
        assert!((mnmse(&p, &t, &m).unwrap() - 0.2).abs() < 1e-15);
        assert!(mnmse(&p, &t, &g(2, vec![false; 4])).is_err());
    }

    #[test]
    fn rmse_clamps_prediction() {
        let p = g(4, vec![100.0; 16]);
        let t = g(4, vec![80.0; 16]);
        assert_eq!(rmse_pair(&p, &t).unwrap(), (0.0, 0.0));
        assert_eq!(central_crop(4), (1, 2));
        assert_eq!(central_crop(5), (1, 2));
    }

    #[test]
    fn csv_layout() {
        let mut t = MetricTable::keypoints();
        t.push("0", vec![Some(1.0), Some(0.5), None]).unwrap();
        assert_eq!(t.to_csv(), "image,pck_0.10,pck_0.05,pck_0.02\n0,1,0.5,\n");
    }
}
