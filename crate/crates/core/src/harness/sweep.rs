//! Ablation and long-tail sweeps.

use std::path::Path;

use rayon::prelude::*;

use super::config::{axis_key, differing_keys, ExperimentConfig, LongtailMode};
use super::experiment::{run_experiment_in, Outcome, Session};
use crate::metrics::MetricTable;
use crate::synthesis::PoolSpec;
use crate::{Error, Result};

/// One row per sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let c = self.columns.iter().position(|x| x == name)?;
        Some(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Aggregate-row values of a metric table, in column order.
fn aggregate(table: &MetricTable) -> Vec<String> {
    table
        .columns
        .iter()
        .map(|c| fmt_opt(table.get("all", c)))
        .collect()
}

/// Run one experiment per value of the configured axis, all else fixed.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path, session: &Session) -> Result<SweepTable> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("ablation needs a [sweep] section".into()))?;
    let key = axis_key(&sweep.axis)?;
    let mut base = cfg.clone();
    base.sweep = None;
    let points: Vec<ExperimentConfig> = sweep
        .values
        .iter()
        .map(|v| base.with_axis(&sweep.axis, v))
        .collect::<Result<_>>()?;
    for p in &points {
        if differing_keys(&base, p).iter().any(|k| k != key) {
            return Err(Error::Config(format!(
                "sweep point changes more than `{key}`"
            )));
        }
    }
    let outcomes: Vec<Outcome> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_experiment_in(p, &out.join(format!("{}_{i}", sweep.axis)), session))
        .collect::<Result<_>>()?;
    let mut columns: Vec<String> = [
        "axis",
        "value",
        "config_hash",
        "retained",
        "rejected",
        "inversion_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    columns.extend(outcomes[0].metrics.columns.iter().cloned());
    let rows = sweep
        .values
        .iter()
        .zip(&outcomes)
        .map(|(v, o)| {
            let mut r = vec![
                sweep.axis.clone(),
                if v.contains(',') {
                    format!("\"{v}\"")
                } else {
                    v.clone()
                },
                o.config_hash.clone(),
                o.retained.to_string(),
                o.rejected.to_string(),
                o.inversion_loss.to_string(),
            ];
            r.extend(aggregate(&o.metrics));
            r
        })
        .collect();
    let table = SweepTable { columns, rows };
    table.write(&out.join("ablation.csv"))?;
    Ok(table)
}

/// Rare-class IOU, mean IOU over the other defined classes, and overall mIOU.
pub fn longtail_scores(
    table: &MetricTable,
    rare_class: usize,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let classes = table.columns.len() - 1;
    let rare = table.get("all", &format!("iou_class_{rare_class}"));
    let others: Vec<f64> = (0..classes)
        .filter(|&k| k != rare_class)
        .filter_map(|k| table.get("all", &format!("iou_class_{k}")))
        .collect();
    let nonrare = (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64);
    (rare, nonrare, table.get("all", "miou"))
}

/// Substitution or addition sweep over the rare class's share of the pool.
pub fn run_longtail(cfg: &ExperimentConfig, out: &Path, session: &Session) -> Result<SweepTable> {
    cfg.validate()?;
    if cfg.task != crate::label_codec::Task::Segmentation {
        return Err(Error::Config(
            "long-tail sweeps need the segmentation task".into(),
        ));
    }
    let lt = &cfg.longtail;
    let base = cfg.pool_size;
    let points: Vec<(String, String, PoolSpec)> = match lt.mode {
        LongtailMode::Substitute => {
            if lt.proportions.is_empty() {
                return Err(Error::Config("substitution sweep needs proportions".into()));
            }
            lt.proportions
                .iter()
                .map(|&p| {
                    (
                        p.to_string(),
                        String::new(),
                        PoolSpec::Substitute {
                            base_size: base,
                            proportion: p,
                        },
                    )
                })
                .collect()
        }
        LongtailMode::Add => {
            if lt.counts.is_empty() {
                return Err(Error::Config("addition sweep needs counts".into()));
            }
            lt.counts
                .iter()
                .flat_map(|&k| {
                    [
                        (
                            k.to_string(),
                            "+rare".to_string(),
                            PoolSpec::Add {
                                base_size: base,
                                rare_present: k,
                                rare_absent: 0,
                            },
                        ),
                        (
                            k.to_string(),
                            "-rare".to_string(),
                            PoolSpec::Add {
                                base_size: base,
                                rare_present: 0,
                                rare_absent: k,
                            },
                        ),
                    ]
                })
                .collect()
        }
    };
    let mode = match lt.mode {
        LongtailMode::Substitute => "substitute",
        LongtailMode::Add => "add",
    };
    let outcomes: Vec<Outcome> = points
        .par_iter()
        .enumerate()
        .map(|(i, (_, _, spec))| {
            let mut c = cfg.clone();
            c.pool = Some(*spec);
            c.sweep = None;
            run_experiment_in(&c, &out.join(format!("{mode}_{i}")), session)
        })
        .collect::<Result<_>>()?;
    let columns = [
        "mode",
        "value",
        "arm",
        "rare_iou",
        "nonrare_miou",
        "miou",
        "config_hash",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = points
        .iter()
        .zip(&outcomes)
        .map(|((value, arm, _), o)| {
            let (rare, nonrare, miou) = longtail_scores(&o.metrics, cfg.scene.rare_class);
            vec![
                mode.to_string(),
                value.clone(),
                arm.clone(),
                fmt_opt(rare),
                fmt_opt(nonrare),
                fmt_opt(miou),
                o.config_hash.clone(),
            ]
        })
        .collect();
    let table = SweepTable { columns, rows };
    table.write(&out.join("longtail.csv"))?;
    Ok(table)
}
