//! Molecular configurations, rigid motions and the analytic fields used as
//! ground truth: a union-of-spheres SDF and per-element Gaussian densities.

pub mod elements;
mod io;
mod synth;

pub use io::{parse_xyz, parse_xyz_blocks, write_ply, write_trajectory_xyz, write_xyz, write_xyz_with_comment, Parsed, XyzBlock};
pub use synth::{corrupt, sample_queries, sample_surface, synth_trajectory, QuerySpec};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// mᵀ v
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn frobenius_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = scale(axis, 1.0 / norm(axis));
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Atom positions (Å) and atomic numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularConfiguration {
    coords: Vec<Vec3>,
    numbers: Vec<u32>,
}

impl MolecularConfiguration {
    pub fn new(coords: Vec<Vec3>, numbers: Vec<u32>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("configuration needs at least one atom".into()));
        }
        if coords.len() != numbers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates but {} atomic numbers",
                coords.len(),
                numbers.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom coordinate".into()));
        }
        if numbers.iter().any(|&z| z == 0) {
            return Err(Error::InvalidArgument("atomic numbers must be positive".into()));
        }
        Ok(Self { coords, numbers })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn numbers(&self) -> &[u32] {
        &self.numbers
    }

    pub fn radius(&self, i: usize) -> f64 {
        elements::vdw_radius(self.numbers[i])
    }

    pub fn radii(&self) -> Vec<f64> {
        self.numbers.iter().map(|&z| elements::vdw_radius(z)).collect()
    }

    pub fn with_coords(&self, coords: Vec<Vec3>) -> Result<Self> {
        Self::new(coords, self.numbers.clone())
    }

    /// Reorders atoms: atom `k` of the result is atom `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            numbers: perm.iter().map(|&i| self.numbers[i]).collect(),
        }
    }

    /// Axis-aligned bounds of the atom centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.coords {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

/// Frames sharing one atom list, with strictly increasing times in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Vec<MolecularConfiguration>,
    times: Vec<f64>,
}

impl Trajectory {
    pub fn new(frames: Vec<MolecularConfiguration>, times: Vec<f64>) -> Result<Self> {
        if frames.is_empty() || frames.len() != times.len() {
            return Err(Error::InvalidArgument("trajectory needs one time per frame".into()));
        }
        let first = &frames[0];
        if frames.iter().any(|f| f.numbers != first.numbers) {
            return Err(Error::InvalidArgument("atom count/types differ between frames".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("timestamps must be strictly increasing".into()));
        }
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("timestamps must lie in [0, 1]".into()));
        }
        Ok(Self { frames, times })
    }

    pub fn frames(&self) -> &[MolecularConfiguration] {
        &self.frames
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps the frames at `indices` (times unchanged).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.frames[i].clone()).collect(),
            indices.iter().map(|&i| self.times[i]).collect(),
        )
    }
}

/// x ↦ R x + t
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        if frobenius_diff(&rtr, &IDENTITY) > 1e-10 || (det(&rotation) - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("rotation is not in SO(3)".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: IDENTITY, translation: [0.0; 3] }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, x), self.translation)
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }
}

pub fn centroid(coords: &[Vec3]) -> Vec3 {
    let n = coords.len() as f64;
    let s = coords.iter().fold([0.0; 3], |acc, &p| add(acc, p));
    scale(s, 1.0 / n)
}

pub fn apply_rigid(coords: &[Vec3], g: &RigidTransform) -> Vec<Vec3> {
    coords.iter().map(|&p| g.apply(p)).collect()
}

pub fn transform_config(config: &MolecularConfiguration, g: &RigidTransform) -> MolecularConfiguration {
    MolecularConfiguration {
        coords: apply_rigid(&config.coords, g),
        numbers: config.numbers.clone(),
    }
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> RigidTransform {
    let mut rng = crate::rng(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with(rng: &mut impl Rng) -> RigidTransform {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    let rotation = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    RigidTransform { rotation, translation: [0.0; 3] }
}

/// Random rotation plus a translation with components in [-5, 5] Å.
pub fn random_rigid(seed: u64) -> RigidTransform {
    let mut rng = crate::rng(seed);
    let g = random_rotation_with(&mut rng);
    let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
    g.with_translation(t)
}

/// Four distinct elements at non-coplanar positions, so the mirror image
/// cannot be rotated onto the original.
pub fn chiral_config() -> MolecularConfiguration {
    MolecularConfiguration::new(
        vec![[0.0, 0.0, 0.0], [1.1, 0.0, 0.0], [-0.3, 1.4, 0.0], [-0.4, -0.5, 1.3]],
        vec![6, 1, 7, 8],
    )
    .expect("valid configuration")
}

/// Reflection through the yz plane.
pub fn mirror(config: &MolecularConfiguration) -> MolecularConfiguration {
    let coords = config.coords.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    MolecularConfiguration { coords, numbers: config.numbers.clone() }
}

/// Union-of-spheres signed distance: minᵢ(‖x − xᵢ‖ − rᵢ).
pub fn oracle_sdf(config: &MolecularConfiguration, x: Vec3) -> f64 {
    config
        .coords
        .iter()
        .zip(&config.numbers)
        .map(|(&p, &z)| dist(x, p) - elements::vdw_radius(z))
        .fold(f64::INFINITY, f64::min)
}

/// Gradient of [`oracle_sdf`] (direction away from the closest sphere's center).
pub fn oracle_sdf_grad(config: &MolecularConfiguration, x: Vec3) -> Vec3 {
    let (best, _) = config
        .coords
        .iter()
        .zip(&config.numbers)
        .map(|(&p, &z)| dist(x, p) - elements::vdw_radius(z))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
    let d = sub(x, config.coords[best]);
    let n = norm(d);
    if n == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        scale(d, 1.0 / n)
    }
}

/// Per-channel Gaussian density, σ = ½·radius of each atom. `vocab[c]` is
/// the atomic number feeding channel `c`.
pub fn oracle_density(config: &MolecularConfiguration, vocab: &[u32], x: Vec3) -> Result<Vec<f64>> {
    let mut out = vec![0.0; vocab.len()];
    for (&p, &z) in config.coords.iter().zip(&config.numbers) {
        let c = vocab
            .iter()
            .position(|&v| v == z)
            .ok_or_else(|| Error::InvalidArgument(format!("element Z={z} not in density vocabulary")))?;
        let sigma = 0.5 * elements::vdw_radius(z);
        let d2 = dot(sub(x, p), sub(x, p));
        out[c] += (-d2 / (2.0 * sigma * sigma)).exp();
    }
    Ok(out)
}
