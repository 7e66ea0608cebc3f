use rand::Rng;
use rayon::prelude::*;

use super::{Field, GridBox};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Largest |f| accepted at a projected surface point.
pub const SURFACE_TOLERANCE: f64 = 1e-4;
const PROBE: usize = 16;
const MAX_NEWTON: usize = 50;
const MIN_GRAD: f64 = 1e-8;
/// Seeds tried per requested sample before giving up.
const MAX_SEEDS_PER_SAMPLE: usize = 20;

/// Points on a zero level set with unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceSampleSet {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl SurfaceSampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `m` points on the zero level set of `field` inside `bbox`.
///
/// Seeds are placed on probe-lattice edges whose endpoints differ in sign
/// and projected with Newton steps whose length is capped at one probe
/// cell; seeds that fail to converge are replaced.
pub fn surface_samples(field: &dyn Field, bbox: &GridBox, m: usize, seed: u64) -> Result<SurfaceSampleSet> {
    let probe = bbox.lattice(PROBE);
    let values = field.values(&probe);
    let idx = |i: usize, j: usize, k: usize| (i * PROBE + j) * PROBE + k;
    let mut edges = Vec::new();
    for i in 0..PROBE {
        for j in 0..PROBE {
            for k in 0..PROBE {
                let a = idx(i, j, k);
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (ni, nj, nk) = (i + di, j + dj, k + dk);
                    if ni >= PROBE || nj >= PROBE || nk >= PROBE {
                        continue;
                    }
                    let b = idx(ni, nj, nk);
                    if (values[a] < 0.0) != (values[b] < 0.0) {
                        edges.push((a, b));
                    }
                }
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptySurface);
    }
    let cell = bbox.spacing(PROBE);
    let max_step = cell.iter().cloned().fold(0.0, f64::max);
    let mut rng = crate::rng(seed);
    let mut out = SurfaceSampleSet::default();
    let mut tried = 0;
    while out.len() < m {
        let need = m - out.len();
        tried += need;
        if tried > MAX_SEEDS_PER_SAMPLE * m.max(1) {
            return Err(Error::InvalidArgument(format!(
                "surface projection converged for only {} of {m} samples",
                out.len()
            )));
        }
        let seeds: Vec<Vec3> = (0..need)
            .map(|_| {
                let (a, b) = edges[rng.gen_range(0..edges.len())];
                let s: f64 = rng.gen_range(0.0..1.0);
                let mut p = geom::add(probe[a], geom::scale(geom::sub(probe[b], probe[a]), s));
                for k in 0..3 {
                    p[k] += rng.gen_range(-0.5..0.5) * cell[k];
                }
                p
            })
            .collect();
        let projected: Vec<Option<(Vec3, Vec3)>> =
            seeds.par_iter().map(|&p| project(field, p, max_step, bbox, max_step)).collect();
        for (p, n) in projected.into_iter().flatten().take(need) {
            out.points.push(p);
            out.normals.push(n);
        }
    }
    Ok(out)
}

fn project(field: &dyn Field, mut x: Vec3, max_step: f64, bbox: &GridBox, slack: f64) -> Option<(Vec3, Vec3)> {
    for _ in 0..=MAX_NEWTON {
        let (f, g) = field.value_grad(x);
        let gn2 = geom::dot(g, g);
        if !f.is_finite() || !gn2.is_finite() || gn2 < MIN_GRAD * MIN_GRAD {
            return None;
        }
        if f.abs() < SURFACE_TOLERANCE {
            if !bbox.contains(x, slack) {
                return None;
            }
            return Some((x, geom::scale(g, 1.0 / gn2.sqrt())));
        }
        let mut step = geom::scale(g, -f / gn2);
        let len = geom::norm(step);
        if len > max_step {
            step = geom::scale(step, max_step / len);
        }
        x = geom::add(x, step);
    }
    None
}
