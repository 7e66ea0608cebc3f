use std::fmt::Write as _;

use super::{chamfer, iou_grid, normal_consistency, surface_samples, CanonicalSdf, GridBox, OracleSdf};
use crate::error::{Error, Result};
use crate::geom::{self, MolecularConfiguration, Trajectory};
use crate::model::Model;
use crate::train::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub resolution: usize,
    pub margin: f64,
    /// Surface points drawn per field for CD and NC.
    pub surface_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { resolution: super::DEFAULT_RESOLUTION, margin: super::DEFAULT_MARGIN, surface_points: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub frame: Option<usize>,
    pub horizon: Option<f64>,
    pub corruption: Option<f64>,
    pub seed: Option<u64>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, value: f64) -> Self {
        Self { metric: metric.to_string(), frame: None, horizon: None, corruption: None, seed: None, value }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub const HEADER: &'static str = "metric,frame,horizon,corruption,seed,value";

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.10e}",
                r.metric,
                opt(&r.frame),
                opt(&r.horizon),
                opt(&r.corruption),
                opt(&r.seed),
                r.value
            );
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<20} {:>6} {:>8} {:>10} {:>6} {:>14}\n", "metric", "frame", "horizon", "corruption", "seed", "value");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>8} {:>10} {:>6} {:>14.6}",
                r.metric,
                opt(&r.frame),
                opt(&r.horizon),
                opt(&r.corruption),
                opt(&r.seed),
                r.value
            );
        }
        s
    }
}

/// Sample mean and its standard error (0 for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub iou: f64,
    pub chamfer: f64,
    pub normal_consistency: f64,
}

/// Compares the dynamics field generated at time `t` against the oracle
/// distance of `truth`. A prediction without any surface in the box scores
/// an infinite CD and zero NC.
pub fn frame_metrics(
    model: &Model,
    first: &MolecularConfiguration,
    truth: &MolecularConfiguration,
    t: f64,
    opts: &EvalOptions,
) -> Result<FrameMetrics> {
    let (theta, frame) = model.dynamics_field(first, truth, t)?;
    let pred = CanonicalSdf { theta: &theta, arch: &model.config.field, frame };
    let oracle = OracleSdf(truth);
    let bbox = GridBox::around(truth, opts.margin);
    let iou = iou_grid(&pred, &oracle, &bbox, opts.resolution)?;
    let truth_surface = surface_samples(&oracle, &bbox, opts.surface_points, mix_seed(opts.seed, 1, 0))?;
    let (cd, nc) = match surface_samples(&pred, &bbox, opts.surface_points, mix_seed(opts.seed, 2, 0)) {
        Ok(s) => (chamfer(&s.points, &truth_surface.points)?, normal_consistency(&s, &truth_surface)?),
        Err(Error::EmptySurface) => (f64::INFINITY, 0.0),
        Err(e) => return Err(e),
    };
    Ok(FrameMetrics { iou, chamfer: cd, normal_consistency: nc })
}

fn push_frame(report: &mut MetricReport, m: &FrameMetrics, frame: usize, horizon: f64) {
    for (name, v) in [("iou", m.iou), ("cd", m.chamfer), ("nc", m.normal_consistency)] {
        report.push(MetricRow { frame: Some(frame), horizon: Some(horizon), ..MetricRow::new(name, v) });
    }
}

/// Metrics at each horizon time, which must coincide with a frame of
/// `traj`. A trailing `iou_nonincreasing` row is 1 when IoU never rises
/// across the horizons beyond `t0`, else 0.
pub fn horizon_eval(
    model: &Model,
    traj: &Trajectory,
    t0: f64,
    horizons: &[f64],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let times = traj.times();
    let mut report = MetricReport::default();
    let mut beyond = Vec::new();
    for &h in horizons {
        let k = times.iter().position(|&t| (t - h).abs() < 1e-9).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "horizon {h} is not a frame time in [{}, {}]",
                times[0],
                times[times.len() - 1]
            ))
        })?;
        let m = frame_metrics(model, &traj.frames()[0], &traj.frames()[k], h, opts)?;
        push_frame(&mut report, &m, k, h);
        if h > t0 {
            beyond.push((h, m.iou));
        }
    }
    beyond.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = beyond.windows(2).all(|w| w[1].1 <= w[0].1);
    report.push(MetricRow::new("iou_nonincreasing", if monotone { 1.0 } else { 0.0 }));
    Ok(report)
}

/// Property MAE (averaged over properties) after removing a fraction of
/// each molecule's atoms, one row per (fraction, seed).
pub fn corruption_eval(
    model: &Model,
    dataset: &[(MolecularConfiguration, Vec<f64>)],
    fractions: &[f64],
    seeds: &[u64],
) -> Result<MetricReport> {
    for &f in fractions {
        for (c, _) in dataset {
            if !(0.0..1.0).contains(&f) || (f * c.len() as f64).floor() as usize >= c.len() {
                return Err(Error::InvalidArgument(format!("fraction {f} invalid for a molecule of {} atoms", c.len())));
            }
        }
    }
    let mut report = MetricReport::default();
    for &f in fractions {
        for &s in seeds {
            let mut preds = Vec::with_capacity(dataset.len());
            for (i, (c, _)) in dataset.iter().enumerate() {
                let damaged = geom::corrupt(c, f, mix_seed(s, i as u64, 0))?;
                preds.push(model.predict_property(&damaged)?);
            }
            let targets: Vec<Vec<f64>> = dataset.iter().map(|(_, y)| y.clone()).collect();
            let per = super::mae(&preds, &targets)?;
            let v = per.iter().sum::<f64>() / per.len() as f64;
            report.push(MetricRow { corruption: Some(f), seed: Some(s), ..MetricRow::new("mae", v) });
        }
    }
    Ok(report)
}
