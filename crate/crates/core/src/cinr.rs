//! Coordinate MLP fields evaluated in canonical coordinates.
//!
//! Weights are stored `[fan_in, fan_out]` so a batch of points (rows) maps
//! through `x·W + b`. At the skip layer the raw input is concatenated after
//! the hidden state.

use rand::Rng;
use rayon::prelude::*;

use crate::encoder::CanonicalFrame;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::params::{normal, xavier, ParamStore};
use crate::tensor::kernels;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    /// No nonlinearity; only useful for tests and linear probes.
    Identity,
}

/// β in the hidden activation softplus(βz)/β. Larger values bend closer to
/// a ReLU while staying smooth; unit β is too gentle to carve Å-sized
/// spheres out of raw coordinates.
pub const SOFTPLUS_SHARPNESS: f64 = 10.0;

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => kernels::softplus(SOFTPLUS_SHARPNESS * z) / SOFTPLUS_SHARPNESS,
            Activation::Identity => z,
        }
    }

    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => kernels::sigmoid(SOFTPLUS_SHARPNESS * z),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    /// Hidden-layer index whose input gets the raw coordinates appended.
    pub skip: Option<usize>,
    pub activation: Activation,
}

impl FieldArchitecture {
    pub fn new(hidden: Vec<usize>, out_dim: usize, skip: Option<usize>, activation: Activation) -> Result<Self> {
        let arch = Self { input_dim: 3, hidden, out_dim, skip, activation };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.out_dim == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument("field widths must be positive and depth ≥ 1".into()));
        }
        if let Some(s) = self.skip {
            if s <= 1 || s >= self.hidden.len() {
                return Err(Error::InvalidArgument(format!(
                    "skip layer {s} outside (1, {})",
                    self.hidden.len()
                )));
            }
        }
        Ok(())
    }

    pub fn desk(out_dim: usize) -> Self {
        Self::new(vec![64; 5], out_dim, Some(3), Activation::Softplus).expect("valid preset")
    }

    pub fn paper(out_dim: usize) -> Self {
        Self::new(vec![512; 8], out_dim, Some(4), Activation::Softplus).expect("valid preset")
    }

    pub fn tiny(out_dim: usize) -> Self {
        Self::new(vec![8; 2], out_dim, None, Activation::Softplus).expect("valid preset")
    }

    /// Affine layers including the output head.
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let mut fan_in = if l == 0 { self.input_dim } else { self.hidden[l - 1] };
        if self.skip == Some(l) {
            fan_in += self.input_dim;
        }
        let fan_out = if l < self.hidden.len() { self.hidden[l] } else { self.out_dim };
        (fan_in, fan_out)
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers()).map(|l| {
            let (i, o) = self.layer_shape(l);
            i * o + o
        }).sum()
    }

    /// Compact `key=value` description, stable across runs.
    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        format!(
            "hidden={} out={} skip={}",
            widths.join("x"),
            self.out_dim,
            self.skip.map_or("none".into(), |s| s.to_string())
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParameters {
    pub layers: Vec<LayerParams>,
}

impl FieldParameters {
    pub fn zeros(arch: &FieldArchitecture) -> Self {
        let layers = (0..arch.num_layers())
            .map(|l| {
                let (i, o) = arch.layer_shape(l);
                LayerParams { weight: Tensor::zeros(&[i, o]), bias: Tensor::zeros(&[1, o]) }
            })
            .collect();
        Self { layers }
    }

    pub fn check(&self, arch: &FieldArchitecture) -> Result<()> {
        if self.layers.len() != arch.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "{} layers for an architecture with {}",
                self.layers.len(),
                arch.num_layers()
            )));
        }
        for (l, p) in self.layers.iter().enumerate() {
            let (i, o) = arch.layer_shape(l);
            if p.weight.shape() != [i, o] || p.bias.shape() != [1, o] {
                return Err(Error::Shape {
                    op: "field layer",
                    node: l,
                    lhs: p.weight.shape().to_vec(),
                    rhs: vec![i, o],
                });
            }
            if !p.weight.is_finite() || !p.bias.is_finite() {
                return Err(Error::NonFinite(format!("field layer {l}")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    pub fn to_store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (l, p) in self.layers.iter().enumerate() {
            s.insert(format!("{prefix}layer{l}/w"), p.weight.clone());
            s.insert(format!("{prefix}layer{l}/b"), p.bias.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore, prefix: &str, arch: &FieldArchitecture) -> Result<Self> {
        let layers = (0..arch.num_layers())
            .map(|l| {
                Ok(LayerParams {
                    weight: store.get(&format!("{prefix}layer{l}/w"))?.clone(),
                    bias: store.get(&format!("{prefix}layer{l}/b"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self { layers };
        p.check(arch)?;
        Ok(p)
    }

    /// Adds every tensor to the graph as a constant.
    pub fn constants(&self, g: &mut Graph) -> FieldNodes {
        FieldNodes {
            layers: self.layers.iter().map(|p| (g.constant(p.weight.clone()), g.constant(p.bias.clone()))).collect(),
        }
    }

    pub fn leaves(&self, g: &mut Graph) -> FieldNodes {
        FieldNodes {
            layers: self.layers.iter().map(|p| (g.leaf(p.weight.clone()), g.leaf(p.bias.clone()))).collect(),
        }
    }

    /// Batched evaluation without a graph, parallel over point blocks.
    pub fn eval_batch(&self, arch: &FieldArchitecture, points: &[Vec3]) -> Vec<Vec<f64>> {
        points
            .par_chunks(BLOCK)
            .flat_map_iter(|chunk| {
                let out = self.forward_block(arch, chunk, false).0;
                let c = arch.out_dim;
                (0..chunk.len()).map(move |i| out[i * c..(i + 1) * c].to_vec()).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Values of channel 0 and its spatial gradient, without a graph.
    pub fn eval_with_grad_batch(&self, arch: &FieldArchitecture, points: &[Vec3]) -> Vec<(f64, Vec3)> {
        points
            .par_chunks(BLOCK)
            .flat_map_iter(|chunk| {
                let (out, tangent) = self.forward_block(arch, chunk, true);
                let c = arch.out_dim;
                let m = chunk.len();
                let tangent = tangent.expect("requested");
                (0..m)
                    .map(move |i| {
                        let grad = [0, 1, 2].map(|k| tangent[(k * m + i) * c]);
                        (out[i * c], grad)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn forward_block(&self, arch: &FieldArchitecture, pts: &[Vec3], tangents: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let m = pts.len();
        let x: Vec<f64> = pts.iter().flatten().copied().collect();
        let mut a = x.clone();
        let mut width = 3;
        let mut t = tangents.then(|| seed_tangents(m));
        for (l, p) in self.layers.iter().enumerate() {
            if arch.skip == Some(l) {
                a = concat_cols(&a, width, &x, 3, m);
                if let Some(tv) = t.as_mut() {
                    *tv = concat_cols(tv, width, &seed_tangents(m), 3, 3 * m);
                }
                width += 3;
            }
            let (fi, fo) = p.weight.dims2();
            debug_assert_eq!(fi, width);
            let mut z = kernels::matmul(&a, p.weight.data(), m, fi, fo);
            for row in z.chunks_mut(fo) {
                for (v, b) in row.iter_mut().zip(p.bias.data()) {
                    *v += b;
                }
            }
            let hidden = l < arch.hidden.len();
            if let Some(tv) = t.as_mut() {
                let mut tz = kernels::matmul(tv, p.weight.data(), 3 * m, fi, fo);
                if hidden {
                    for k in 0..3 {
                        for (tt, zz) in tz[k * m * fo..(k + 1) * m * fo].iter_mut().zip(&z) {
                            *tt *= arch.activation.slope(*zz);
                        }
                    }
                }
                *tv = tz;
            }
            if hidden {
                for v in z.iter_mut() {
                    *v = arch.activation.apply(*v);
                }
            }
            a = z;
            width = fo;
        }
        (a, t)
    }
}

const BLOCK: usize = 512;

/// 3m×3 tangent seed: block k holds e_k in every row.
fn seed_tangents(m: usize) -> Vec<f64> {
    let mut t = vec![0.0; 9 * m];
    for k in 0..3 {
        for i in 0..m {
            t[(k * m + i) * 3 + k] = 1.0;
        }
    }
    t
}

fn concat_cols(a: &[f64], wa: usize, b: &[f64], wb: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

/// Graph handles for one field's weights and biases.
#[derive(Clone, Debug)]
pub struct FieldNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl FieldNodes {
    /// Reads the current node values back into parameters.
    pub fn values(&self, g: &Graph) -> FieldParameters {
        FieldParameters {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| LayerParams { weight: g.value(w).clone(), bias: g.value(b).clone() })
                .collect(),
        }
    }
}

pub fn init_field_params(arch: &FieldArchitecture, seed: u64) -> FieldParameters {
    let mut rng = crate::rng(seed);
    let layers = (0..arch.num_layers())
        .map(|l| {
            let (i, o) = arch.layer_shape(l);
            LayerParams { weight: xavier(&mut rng, i, o), bias: Tensor::zeros(&[1, o]) }
        })
        .collect();
    FieldParameters { layers }
}

/// Parameters whose channel 0 approximates the distance to a sphere of
/// `radius` about the origin: He-normal hidden layers, a positive-mean
/// output layer, then the output rescaled to unit mean gradient norm and
/// shifted to vanish on the sphere.
/// Widens first-layer pre-activations so softplus units bend sharply on
/// the Å scale.
const GEOMETRIC_INPUT_GAIN: f64 = 1.0;

pub fn geometric_init(arch: &FieldArchitecture, radius: f64, seed: u64) -> FieldParameters {
    let mut rng = crate::rng(seed);
    let last = arch.num_layers() - 1;
    let mut theta = FieldParameters {
        layers: (0..arch.num_layers())
            .map(|l| {
                let (i, o) = arch.layer_shape(l);
                let gain = if l == 0 { GEOMETRIC_INPUT_GAIN } else { 1.0 };
                let weight = if l < last {
                    normal(&mut rng, &[i, o], gain * (2.0 / o as f64).sqrt())
                } else {
                    let mean = (std::f64::consts::PI / i as f64).sqrt();
                    normal(&mut rng, &[i, o], 1e-4).map(|v| v + mean)
                };
                LayerParams { weight, bias: Tensor::zeros(&[1, o]) }
            })
            .collect(),
    };
    let probe: Vec<Vec3> = (0..256)
        .map(|_| {
            let v: Vec3 = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
            let n = crate::geom::norm(v).max(1e-9);
            crate::geom::scale(v, radius / n)
        })
        .collect();
    let vg = theta.eval_with_grad_batch(arch, &probe);
    let g_mean = vg.iter().map(|(_, g)| crate::geom::norm(*g)).sum::<f64>() / vg.len() as f64;
    let f_mean = vg.iter().map(|(f, _)| f).sum::<f64>() / vg.len() as f64;
    if g_mean > 1e-12 {
        let out = &mut theta.layers[last];
        out.weight = out.weight.map(|v| v / g_mean);
        out.bias = out.bias.map(|_| -f_mean / g_mean);
    }
    theta
}

fn activate(g: &mut Graph, act: Activation, z: NodeId) -> Result<NodeId> {
    match act {
        Activation::Softplus => {
            let zs = g.scale(z, SOFTPLUS_SHARPNESS)?;
            let a = g.softplus(zs)?;
            g.scale(a, 1.0 / SOFTPLUS_SHARPNESS)
        }
        Activation::Identity => Ok(z),
    }
}

/// Field values for a batch of points `x` (n×3) → n×C_out.
pub fn field_forward(g: &mut Graph, arch: &FieldArchitecture, nodes: &FieldNodes, x: NodeId) -> Result<NodeId> {
    check_nodes(arch, nodes)?;
    let mut a = x;
    for (l, &(w, b)) in nodes.layers.iter().enumerate() {
        if arch.skip == Some(l) {
            a = g.concat(&[a, x], 1)?;
        }
        let z = g.affine(a, w, b)?;
        a = if l < arch.hidden.len() { activate(g, arch.activation, z)? } else { z };
    }
    Ok(a)
}

/// Field values plus ∂f₀/∂x (n×3), both differentiable with respect to the
/// weights. The spatial gradient is carried forward as three tangent
/// columns stacked into 3n rows, so no second backward pass is needed.
pub fn field_forward_with_grad(
    g: &mut Graph,
    arch: &FieldArchitecture,
    nodes: &FieldNodes,
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    check_nodes(arch, nodes)?;
    let n = g.shape(x)[0];
    let seed = g.constant(Tensor::matrix(3 * n, 3, seed_tangents(n))?);
    let mut a = x;
    let mut t = seed;
    for (l, &(w, b)) in nodes.layers.iter().enumerate() {
        if arch.skip == Some(l) {
            a = g.concat(&[a, x], 1)?;
            t = g.concat(&[t, seed], 1)?;
        }
        let z = g.affine(a, w, b)?;
        let tz = g.matmul(t, w)?;
        if l < arch.hidden.len() {
            match arch.activation {
                Activation::Softplus => {
                    let zs = g.scale(z, SOFTPLUS_SHARPNESS)?;
                    let s = g.sigmoid(zs)?;
                    let s3 = g.concat(&[s, s, s], 0)?;
                    t = g.mul(s3, tz)?;
                    let sp = g.softplus(zs)?;
                    a = g.scale(sp, 1.0 / SOFTPLUS_SHARPNESS)?;
                }
                Activation::Identity => {
                    t = tz;
                    a = z;
                }
            }
        } else {
            t = tz;
            a = z;
        }
    }
    let col = g.slice(t, 1, 0, 1)?;
    let planes = g.reshape(col, &[3, n])?;
    let grad = g.transpose(planes)?;
    Ok((a, grad))
}

fn check_nodes(arch: &FieldArchitecture, nodes: &FieldNodes) -> Result<()> {
    if nodes.layers.len() != arch.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} layer nodes for an architecture with {}",
            nodes.layers.len(),
            arch.num_layers()
        )));
    }
    Ok(())
}

pub fn field_eval(theta: &FieldParameters, arch: &FieldArchitecture, x: Vec3) -> Result<Vec<f64>> {
    theta.check(arch)?;
    let mut g = Graph::new();
    let nodes = theta.constants(&mut g);
    let xn = g.constant(Tensor::row(&x));
    let out = field_forward(&mut g, arch, &nodes, xn)?;
    Ok(g.value(out).data().to_vec())
}

/// ∂f₀/∂x′ by reverse-mode differentiation with the input as the leaf.
pub fn field_grad(theta: &FieldParameters, arch: &FieldArchitecture, x: Vec3) -> Result<Vec3> {
    let grads = field_grad_batch(theta, arch, &[x])?;
    Ok(grads[0])
}

pub fn field_grad_batch(theta: &FieldParameters, arch: &FieldArchitecture, xs: &[Vec3]) -> Result<Vec<Vec3>> {
    theta.check(arch)?;
    let mut g = Graph::new();
    let nodes = theta.constants(&mut g);
    let data: Vec<f64> = xs.iter().flatten().copied().collect();
    let xn = g.leaf(Tensor::matrix(xs.len(), 3, data)?);
    let out = field_forward(&mut g, arch, &nodes, xn)?;
    let first = g.slice(out, 1, 0, 1)?;
    // rows are independent, so the gradient of the sum is the per-row gradient
    let total = g.sum(first)?;
    let grads = g.backward(total)?;
    let gx = grads.get(xn).expect("input is a leaf");
    Ok(gx.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn canonical_field_eval(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    x: Vec3,
) -> Result<Vec<f64>> {
    field_eval(theta, arch, frame.canonical_coords(x))
}

/// Canonical coordinates of world-space points as a graph node:
/// rows (x − x̄)·Q, with `qt` holding Qᵀ.
pub fn canonical_points(g: &mut Graph, qt: NodeId, centroid: Vec3, points: &[Vec3]) -> Result<NodeId> {
    let data: Vec<f64> = points
        .iter()
        .flat_map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let xc = g.constant(Tensor::matrix(points.len(), 3, data)?);
    let q = g.transpose(qt)?;
    g.matmul(xc, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    fn sample_points(seed: u64, n: usize) -> Vec<Vec3> {
        use rand::Rng;
        let mut r = crate::rng(seed);
        (0..n).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect()
    }

    #[test]
    fn presets_and_token_layout() {
        let d = FieldArchitecture::desk(1);
        assert_eq!(d.num_layers(), 6);
        assert_eq!(d.layer_shape(0), (3, 64));
        assert_eq!(d.layer_shape(3), (67, 64));
        assert_eq!(d.layer_shape(5), (64, 1));
        assert!(FieldArchitecture::new(vec![8, 8], 1, Some(1), Activation::Softplus).is_err());
        assert!(FieldArchitecture::new(vec![8, 0], 1, None, Activation::Softplus).is_err());
        assert!(FieldArchitecture::new(vec![8, 8, 8], 1, Some(2), Activation::Softplus).is_ok());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = FieldArchitecture::desk(1);
        let a = init_field_params(&arch, 3);
        assert_eq!(a, init_field_params(&arch, 3));
        assert_ne!(a, init_field_params(&arch, 4));
        for (l, p) in a.layers.iter().enumerate() {
            let (i, o) = arch.layer_shape(l);
            let bound = (6.0 / (i + o) as f64).sqrt();
            assert!(p.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(p.bias.data().iter().all(|&b| b == 0.0));
        }
        assert_eq!(a.num_params(), arch.param_count());
    }

    #[test]
    fn zero_parameters_give_zero_field() {
        let arch = FieldArchitecture::desk(2);
        let z = FieldParameters::zeros(&arch);
        for x in sample_points(1, 5) {
            assert_eq!(field_eval(&z, &arch, x).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn linear_net_sums_inputs() {
        let arch = FieldArchitecture::new(vec![3], 1, None, Activation::Identity).unwrap();
        let mut p = FieldParameters::zeros(&arch);
        p.layers[0].weight = Tensor::matrix(3, 3, geom::IDENTITY.concat()).unwrap();
        p.layers[1].weight = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let v = field_eval(&p, &arch, [1.0, 2.0, -0.5]).unwrap();
        assert_eq!(v, vec![2.5]);
        assert_eq!(field_grad(&p, &arch, [4.0, 0.0, 1.0]).unwrap(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let arch = FieldArchitecture::tiny(1);
        let mut p = init_field_params(&arch, 1);
        p.layers[1].weight = Tensor::zeros(&[3, 8]);
        assert!(field_eval(&p, &arch, [0.0; 3]).is_err());
        p.layers.pop();
        assert!(field_eval(&p, &arch, [0.0; 3]).is_err());
    }

    #[test]
    fn evaluation_is_pure() {
        let arch = FieldArchitecture::desk(1);
        let p = init_field_params(&arch, 9);
        let x = [0.3, -0.7, 1.1];
        assert_eq!(field_eval(&p, &arch, x).unwrap(), field_eval(&p, &arch, x).unwrap());
    }

    #[test]
    fn squared_norm_gradient() {
        // ‖x‖² from the op set, differentiated through the graph
        let x = [0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let xn = g.leaf(Tensor::row(&x));
        let sq = g.square(xn).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        for (gv, xv) in grads.get(xn).unwrap().data().iter().zip(x) {
            assert!((gv - 2.0 * xv).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = FieldArchitecture::new(vec![16, 16, 16], 1, Some(2), Activation::Softplus).unwrap();
        let p = init_field_params(&arch, 5);
        let h = 1e-5;
        for x in sample_points(2, 10) {
            let grad = field_grad(&p, &arch, x).unwrap();
            for k in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (field_eval(&p, &arch, xp).unwrap()[0] - field_eval(&p, &arch, xm).unwrap()[0]) / (2.0 * h);
                assert!((fd - grad[k]).abs() / grad[k].abs().max(1.0) < 1e-5);
            }
        }
    }

    #[test]
    fn gradient_error_decays_quadratically() {
        let arch = FieldArchitecture::desk(1);
        let p = init_field_params(&arch, 6);
        let x = [0.2, 0.4, -0.3];
        let d = geom::scale([1.0, -2.0, 0.5], 1.0 / 21.25f64.sqrt());
        let f0 = field_eval(&p, &arch, x).unwrap()[0];
        let slope = geom::dot(field_grad(&p, &arch, x).unwrap(), d);
        let err = |h: f64| (field_eval(&p, &arch, geom::add(x, geom::scale(d, h))).unwrap()[0] - f0 - h * slope).abs();
        let ratio = err(1e-3) / err(1e-4);
        assert!((80.0..=120.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn tangent_gradient_matches_reverse_mode() {
        let arch = FieldArchitecture::desk(1);
        let p = init_field_params(&arch, 8);
        let pts = sample_points(3, 7);
        let reverse = field_grad_batch(&p, &arch, &pts).unwrap();
        let mut g = Graph::new();
        let nodes = p.constants(&mut g);
        let xn = g.constant(Tensor::matrix(7, 3, pts.iter().flatten().copied().collect()).unwrap());
        let (f, grad) = field_forward_with_grad(&mut g, &arch, &nodes, xn).unwrap();
        let fast = p.eval_with_grad_batch(&arch, &pts);
        for i in 0..7 {
            for k in 0..3 {
                assert!((g.value(grad).get2(i, k) - reverse[i][k]).abs() < 1e-12);
                assert!((fast[i].1[k] - reverse[i][k]).abs() < 1e-12);
            }
            assert!((g.value(f).get2(i, 0) - fast[i].0).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_graph() {
        let arch = FieldArchitecture::desk(3);
        let p = init_field_params(&arch, 10);
        let pts = sample_points(4, 1100);
        let fast = p.eval_batch(&arch, &pts);
        for (x, v) in pts.iter().zip(&fast).step_by(97) {
            let slow = field_eval(&p, &arch, *x).unwrap();
            assert!(slow.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn canonical_evaluation() {
        let arch = FieldArchitecture::tiny(1);
        let p = init_field_params(&arch, 2);
        let frame = CanonicalFrame { q: geom::random_rotation(4).rotation, centroid: [1.0, 2.0, 3.0] };
        let at_center = canonical_field_eval(&p, &arch, &frame, frame.centroid).unwrap();
        assert_eq!(at_center, field_eval(&p, &arch, [0.0; 3]).unwrap());
        let g = geom::random_rigid(8);
        let moved = CanonicalFrame { q: geom::mat_mul(&g.rotation, &frame.q), centroid: g.apply(frame.centroid) };
        for x in sample_points(5, 10) {
            let a = canonical_field_eval(&p, &arch, &frame, x).unwrap()[0];
            let b = canonical_field_eval(&p, &arch, &moved, g.apply(x)).unwrap()[0];
            assert!((a - b).abs() < 1e-6);
        }
        let mut q = p.clone();
        let mut w = q.layers[0].weight.data().to_vec();
        w[0] += 0.5;
        q.layers[0].weight = Tensor::matrix(3, 8, w).unwrap();
        let x = [0.3, 0.9, -1.2];
        assert_ne!(field_eval(&p, &arch, x).unwrap(), field_eval(&q, &arch, x).unwrap());
    }

    #[test]
    fn store_round_trip() {
        let arch = FieldArchitecture::desk(1);
        let p = init_field_params(&arch, 1);
        let s = p.to_store("field/");
        assert_eq!(FieldParameters::from_store(&s, "field/", &arch).unwrap(), p);
        assert!(FieldParameters::from_store(&s, "field/", &FieldArchitecture::tiny(1)).is_err());
    }
}
