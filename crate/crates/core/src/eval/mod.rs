//! Surface metrics, correlation statistics, atom extraction and the
//! evaluation harnesses built on them.

mod harness;
mod stats;
mod surface;


use rayon::prelude::*;

use crate::cinr::{FieldArchitecture, FieldParameters};
use crate::encoder::CanonicalFrame;
use crate::error::{Error, Result};
use crate::geom::{self, MolecularConfiguration, Vec3};

pub use harness::{
    corruption_eval, frame_metrics, horizon_eval, mean_and_se, EvalOptions, FrameMetrics, MetricReport, MetricRow,
};
pub use stats::{correlation_report, pearson, ranks, spearman, Correlation};
pub use surface::{surface_samples, SurfaceSampleSet, SURFACE_TOLERANCE};

/// Margin added around atom centers for evaluation grids (Å).
pub const DEFAULT_MARGIN: f64 = 2.0;
pub const DEFAULT_RESOLUTION: usize = 64;
/// Radius of non-maximum suppression in [`extract_atoms`] (Å).
pub const NMS_RADIUS: f64 = 0.8;

/// A scalar field with a spatial gradient.
pub trait Field: Sync {
    fn value_grad(&self, x: Vec3) -> (f64, Vec3);

    fn value(&self, x: Vec3) -> f64 {
        self.value_grad(x).0
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        xs.par_iter().map(|&x| self.value(x)).collect()
    }

    fn values_grads(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        xs.par_iter().map(|&x| self.value_grad(x)).collect()
    }
}

/// The union-of-spheres distance of a configuration.
pub struct OracleSdf<'a>(pub &'a MolecularConfiguration);

impl Field for OracleSdf<'_> {
    fn value_grad(&self, x: Vec3) -> (f64, Vec3) {
        (geom::oracle_sdf(self.0, x), geom::oracle_sdf_grad(self.0, x))
    }

    fn value(&self, x: Vec3) -> f64 {
        geom::oracle_sdf(self.0, x)
    }
}

/// Channel 0 of a coordinate MLP queried in canonical coordinates.
pub struct CanonicalSdf<'a> {
    pub theta: &'a FieldParameters,
    pub arch: &'a FieldArchitecture,
    pub frame: CanonicalFrame,
}

impl Field for CanonicalSdf<'_> {
    fn value_grad(&self, x: Vec3) -> (f64, Vec3) {
        self.values_grads(&[x])[0]
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        let c: Vec<Vec3> = xs.iter().map(|&x| self.frame.canonical_coords(x)).collect();
        self.theta.eval_batch(self.arch, &c).into_iter().map(|v| v[0]).collect()
    }

    fn values_grads(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        let c: Vec<Vec3> = xs.iter().map(|&x| self.frame.canonical_coords(x)).collect();
        self.theta
            .eval_with_grad_batch(self.arch, &c)
            .into_iter()
            .map(|(f, g)| (f, geom::mat_vec(&self.frame.q, g)))
            .collect()
    }
}

/// Axis-aligned evaluation box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridBox {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl GridBox {
    pub fn new(lo: Vec3, hi: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Bounds of the atom centers inflated by `margin` on every side.
    pub fn around(config: &MolecularConfiguration, margin: f64) -> Self {
        let (lo, hi) = config.bounds();
        Self { lo: lo.map(|v| v - margin), hi: hi.map(|v| v + margin) }
    }

    pub fn union(&self, other: &GridBox) -> Self {
        Self {
            lo: [0, 1, 2].map(|k| self.lo[k].min(other.lo[k])),
            hi: [0, 1, 2].map(|k| self.hi[k].max(other.hi[k])),
        }
    }

    /// Vertices of a `res`³ lattice spanning the box, x slowest.
    pub fn lattice(&self, res: usize) -> Vec<Vec3> {
        let step = self.spacing(res);
        let mut out = Vec::with_capacity(res * res * res);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    out.push([
                        self.lo[0] + i as f64 * step[0],
                        self.lo[1] + j as f64 * step[1],
                        self.lo[2] + k as f64 * step[2],
                    ]);
                }
            }
        }
        out
    }

    pub fn spacing(&self, res: usize) -> Vec3 {
        let d = (res.max(2) - 1) as f64;
        [0, 1, 2].map(|k| (self.hi[k] - self.lo[k]) / d)
    }

    fn contains(&self, x: Vec3, slack: f64) -> bool {
        (0..3).all(|k| x[k] >= self.lo[k] - slack && x[k] <= self.hi[k] + slack)
    }
}

/// Intersection over union of the negative regions of two fields sampled
/// on a `resolution`³ lattice. Two empty regions count as identical.
pub fn iou_grid(a: &dyn Field, b: &dyn Field, bbox: &GridBox, resolution: usize) -> Result<f64> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution} below 8")));
    }
    let pts = bbox.lattice(resolution);
    let va = a.values(&pts);
    let vb = b.values(&pts);
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in va.iter().zip(&vb) {
        let (ia, ib) = (*x < 0.0, *y < 0.0);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn nearest(p: Vec3, set: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &q) in set.iter().enumerate() {
        let d = geom::dot(geom::sub(p, q), geom::sub(p, q));
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{what} needs nonempty point sets")));
    }
    Ok(())
}

/// Symmetric mean squared nearest-neighbour distance (Å²).
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    check_nonempty(p.len().min(q.len()), "chamfer distance")?;
    let one_way = |a: &[Vec3], b: &[Vec3]| {
        let d: Vec<f64> = a.par_iter().map(|&x| nearest(x, b).1).collect();
        d.iter().sum::<f64>() / a.len() as f64
    };
    Ok(0.5 * one_way(p, q) + 0.5 * one_way(q, p))
}

/// Symmetric mean of |n · n′| over nearest-point matches.
pub fn normal_consistency(a: &SurfaceSampleSet, b: &SurfaceSampleSet) -> Result<f64> {
    check_nonempty(a.points.len().min(b.points.len()), "normal consistency")?;
    let one_way = |a: &SurfaceSampleSet, b: &SurfaceSampleSet| {
        let c: Vec<f64> = a
            .points
            .par_iter()
            .zip(&a.normals)
            .map(|(&x, &n)| geom::dot(n, b.normals[nearest(x, &b.points).0]).abs())
            .collect();
        c.iter().sum::<f64>() / a.points.len() as f64
    };
    Ok(0.5 * one_way(a, b) + 0.5 * one_way(b, a))
}

/// Per-property mean absolute error.
pub fn mae(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let p = targets[0].len();
    if predictions.iter().chain(targets).any(|v| v.len() != p) {
        return Err(Error::InvalidArgument("property vectors differ in length".into()));
    }
    let mut out = vec![0.0; p];
    for (y, t) in predictions.iter().zip(targets) {
        for j in 0..p {
            out[j] += (y[j] - t[j]).abs();
        }
    }
    Ok(out.into_iter().map(|s| s / predictions.len() as f64).collect())
}

/// One atom recovered from a density field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractedAtom {
    pub number: u32,
    pub position: Vec3,
    pub peak: f64,
}

/// Atoms read off a multi-channel density: per channel, lattice points
/// that beat all 26 neighbours and exceed `threshold`, then greedy
/// suppression of weaker peaks within [`NMS_RADIUS`] across all channels.
/// `density` maps points to one value per entry of `vocab`.
pub fn extract_atoms_from(
    density: &(dyn Fn(&[Vec3]) -> Vec<Vec<f64>> + Sync),
    vocab: &[u32],
    bbox: &GridBox,
    resolution: usize,
    threshold: f64,
) -> Result<Vec<ExtractedAtom>> {
    if resolution < 3 {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution} below 3")));
    }
    let r = resolution;
    let pts = bbox.lattice(r);
    let values = density(&pts);
    if values.iter().any(|v| v.len() != vocab.len()) {
        return Err(Error::InvalidArgument(format!("density has the wrong channel count for {} elements", vocab.len())));
    }
    let idx = |i: usize, j: usize, k: usize| (i * r + j) * r + k;
    let mut peaks = Vec::new();
    for (c, &number) in vocab.iter().enumerate() {
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    let here = idx(i, j, k);
                    let v = values[here][c];
                    if v <= threshold || !is_local_max(&values, c, r, [i, j, k], here) {
                        continue;
                    }
                    peaks.push(ExtractedAtom { number, position: pts[here], peak: v });
                }
            }
        }
    }
    // stable sort keeps channel/lattice order among equal peaks
    peaks.sort_by(|a, b| b.peak.total_cmp(&a.peak));
    let mut kept: Vec<ExtractedAtom> = Vec::new();
    for p in peaks {
        if kept.iter().all(|q| geom::dist(p.position, q.position) > NMS_RADIUS) {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Ties are broken by lattice order so a flat plateau yields one peak.
fn is_local_max(values: &[Vec<f64>], c: usize, r: usize, at: [usize; 3], here: usize) -> bool {
    let v = values[here][c];
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            for dk in -1i64..=1 {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let n = [at[0] as i64 + di, at[1] as i64 + dj, at[2] as i64 + dk];
                if n.iter().any(|&x| x < 0 || x >= r as i64) {
                    continue;
                }
                let other = ((n[0] as usize * r) + n[1] as usize) * r + n[2] as usize;
                let w = values[other][c];
                if w > v || (w == v && other < here) {
                    return false;
                }
            }
        }
    }
    true
}

/// [`extract_atoms_from`] applied to a generated density field evaluated in
/// canonical coordinates; channel `c` is element `vocab[c]`.
pub fn extract_atoms(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    vocab: &[u32],
    bbox: &GridBox,
    resolution: usize,
    threshold: f64,
) -> Result<Vec<ExtractedAtom>> {
    if arch.out_dim != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "field has {} channels for {} elements",
            arch.out_dim,
            vocab.len()
        )));
    }
    let density = |xs: &[Vec3]| {
        let c: Vec<Vec3> = xs.iter().map(|&x| frame.canonical_coords(x)).collect();
        theta.eval_batch(arch, &c)
    };
    extract_atoms_from(&density, vocab, bbox, resolution, threshold)
}

/// The extracted atoms as a configuration, or `None` when nothing was found.
pub fn atoms_to_configuration(atoms: &[ExtractedAtom]) -> Option<MolecularConfiguration> {
    if atoms.is_empty() {
        return None;
    }
    MolecularConfiguration::new(atoms.iter().map(|a| a.position).collect(), atoms.iter().map(|a| a.number).collect())
        .ok()
}
