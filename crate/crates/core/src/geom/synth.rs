use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{add, axis_angle, centroid, mat_vec, oracle_sdf, scale, sub, MolecularConfiguration, Trajectory, Vec3};
use crate::error::{Error, Result};

const CUBE: f64 = 6.0;
const MIN_SEPARATION: f64 = 1.0;
const MAX_ATTEMPTS: usize = 10_000;
const MAX_AMPLITUDE: f64 = 0.5;
const ELEMENTS: [u32; 4] = [1, 6, 7, 8];

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = super::norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Places `n_atoms` random H/C/N/O atoms in a 6 Å cube (pairwise ≥ 1 Å)
/// and moves them with a smooth global rotation about the initial centroid
/// plus per-atom sinusoidal wobble of at most 0.5 Å. Frame k sits at
/// t = k/(T−1).
pub fn synth_trajectory(seed: u64, n_atoms: usize, n_frames: usize) -> Result<Trajectory> {
    if n_atoms < 2 || n_frames < 2 {
        return Err(Error::InvalidArgument("synthetic trajectories need N ≥ 2 and T ≥ 2".into()));
    }
    let mut rng = crate::rng(seed);
    let half = CUBE / 2.0;
    let mut base: Vec<Vec3> = Vec::with_capacity(n_atoms);
    let mut attempts = 0;
    while base.len() < n_atoms {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "could not place {n_atoms} atoms with {MIN_SEPARATION} Å separation"
            )));
        }
        let p = [rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half)];
        if base.iter().all(|&q| super::dist(p, q) >= MIN_SEPARATION) {
            base.push(p);
        }
    }
    let numbers: Vec<u32> = (0..n_atoms).map(|_| ELEMENTS[rng.gen_range(0..ELEMENTS.len())]).collect();
    let axis = unit_vector(&mut rng);
    let total_angle = rng.gen_range(0.25 * PI..=PI);
    let wobble: Vec<(Vec3, f64)> = (0..n_atoms)
        .map(|_| {
            let dir = unit_vector(&mut rng);
            let amp = rng.gen_range(0.0..MAX_AMPLITUDE);
            (scale(dir, amp), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let center = centroid(&base);

    let times: Vec<f64> = (0..n_frames).map(|k| k as f64 / (n_frames - 1) as f64).collect();
    let frames = times
        .iter()
        .map(|&t| {
            let rot = axis_angle(axis, total_angle * t);
            let coords = base
                .iter()
                .zip(&wobble)
                .map(|(&p, &(a, phase))| {
                    let local = add(sub(p, center), scale(a, (PI * t + phase).sin()));
                    add(center, mat_vec(&rot, local))
                })
                .collect();
            MolecularConfiguration::new(coords, numbers.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(frames, times)
}

/// Removes ⌊fraction·N⌋ atoms chosen uniformly at random.
pub fn corrupt(config: &MolecularConfiguration, fraction: f64, seed: u64) -> Result<MolecularConfiguration> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("corruption fraction {fraction} outside [0, 1)")));
    }
    let n = config.len();
    let drop = (fraction * n as f64).floor() as usize;
    if drop >= n {
        return Err(Error::InvalidArgument(format!("corrupting {drop} of {n} atoms leaves none")));
    }
    if drop == 0 {
        return Ok(config.clone());
    }
    let mut rng = crate::rng(seed);
    let mut removed = vec![false; n];
    for i in index::sample(&mut rng, n, drop) {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    Ok(config.permuted(&keep))
}

/// How spatial queries are drawn around a molecule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuerySpec {
    pub n: usize,
    pub near_fraction: f64,
    pub sigma_near: f64,
    pub margin: f64,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self { n: 256, near_fraction: 0.5, sigma_near: 0.3, margin: 2.0 }
    }
}

fn surface_point(config: &MolecularConfiguration, rng: &mut impl Rng) -> Vec3 {
    // points buried inside a neighbouring sphere are not on the union surface
    loop {
        let i = rng.gen_range(0..config.len());
        let p = add(config.coords()[i], scale(unit_vector(rng), config.radius(i)));
        if oracle_sdf(config, p) > -1e-12 {
            return p;
        }
    }
}

/// ⌈near·n⌉ jittered surface points, the rest uniform in the atom-center
/// bounding box inflated by `margin`.
pub fn sample_queries(config: &MolecularConfiguration, spec: &QuerySpec, seed: u64) -> Vec<Vec3> {
    let mut rng = crate::rng(seed);
    let n_near = ((spec.near_fraction * spec.n as f64).ceil() as usize).min(spec.n);
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..n_near {
        let p = surface_point(config, &mut rng);
        if spec.sigma_near > 0.0 {
            let noise: Vec3 = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            out.push(add(p, scale(noise, spec.sigma_near)));
        } else {
            out.push(p);
        }
    }
    let (lo, hi) = config.bounds();
    for _ in n_near..spec.n {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = rng.gen_range(lo[k] - spec.margin..=hi[k] + spec.margin);
        }
        out.push(p);
    }
    out
}

/// Points exactly on the union-of-spheres surface.
pub fn sample_surface(config: &MolecularConfiguration, n: usize, seed: u64) -> Vec<Vec3> {
    let spec = QuerySpec { n, near_fraction: 1.0, sigma_near: 0.0, margin: 0.0 };
    sample_queries(config, &spec, seed)
}
