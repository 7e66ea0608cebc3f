//! Dual-stream equivariant encoder and canonical frame construction.
//!
//! Scalars `h` (N×C) are rotation invariant; vectors are stored as three
//! N×C planes, one per Cartesian component, so a rotation acts on them by
//! mixing planes and never touches channels. Every update below is either a
//! function of invariants or a linear combination of vectors with invariant
//! coefficients, which is what keeps the vector stream equivariant.

use crate::error::{Error, Result};
use crate::geom::{self, elements, Mat3, MolecularConfiguration, Vec3};
use crate::params::{normal, xavier, Bound, ParamStore};
use crate::tensor::{kernels, Graph, NodeId, Tensor};

/// Norm floor below which an axis is treated as degenerate.
const DEGENERATE: f64 = 1e-6;
/// Added inside channel-norm square roots so N = 1 stays differentiable.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub rbf_centers: usize,
    pub rbf_cutoff: f64,
    pub embed_dim: usize,
    /// Atoms up to this count use the complete graph, beyond it kNN.
    pub full_graph_max: usize,
    pub knn: usize,
    pub frame_eps: f64,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            channels: 32,
            layers: 3,
            rbf_centers: 16,
            rbf_cutoff: 6.0,
            embed_dim: 32,
            full_graph_max: 32,
            knn: 8,
            frame_eps: 1e-8,
        }
    }

    pub fn paper() -> Self {
        Self { channels: 512, layers: 6, rbf_centers: 32, embed_dim: 512, ..Self::desk() }
    }

    pub fn tiny() -> Self {
        Self { channels: 8, layers: 1, rbf_centers: 8, embed_dim: 8, ..Self::desk() }
    }
}

/// Orthonormal frame Q (columns q₁, q₂, q₃) anchored at the centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalFrame {
    pub q: Mat3,
    pub centroid: Vec3,
}

impl CanonicalFrame {
    pub fn identity() -> Self {
        Self { q: geom::IDENTITY, centroid: [0.0; 3] }
    }

    /// Qᵀ(x − x̄)
    pub fn canonical_coords(&self, x: Vec3) -> Vec3 {
        geom::mat_t_vec(&self.q, geom::sub(x, self.centroid))
    }

    /// Inverse of [`canonical_coords`](Self::canonical_coords).
    pub fn to_world(&self, c: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.q, c), self.centroid)
    }

    pub fn column(&self, k: usize) -> Vec3 {
        [self.q[0][k], self.q[1][k], self.q[2][k]]
    }
}

pub fn canonical_coords(frame: &CanonicalFrame, x: Vec3) -> Vec3 {
    frame.canonical_coords(x)
}

pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64, store: &mut ParamStore) {
    let mut rng = crate::rng(seed);
    let c = cfg.channels;
    let bias = |n: usize| Tensor::zeros(&[1, n]);
    store.insert("encoder/embed", normal(&mut rng, &[elements::MAX_Z as usize + 1, c], 1.0));
    store.insert("encoder/rbf_w", xavier(&mut rng, cfg.rbf_centers, c));
    store.insert("encoder/rbf_b", bias(c));
    store.insert("encoder/psi_w", xavier(&mut rng, 2 * c, c));
    store.insert("encoder/psi_b", bias(c));
    for l in 0..cfg.layers {
        let p = format!("encoder/layer{l}");
        store.insert(format!("{p}/wv"), xavier(&mut rng, c, c));
        store.insert(format!("{p}/gate_w"), xavier(&mut rng, 3 * c, c));
        store.insert(format!("{p}/gate_b"), bias(c));
        store.insert(format!("{p}/msg_w"), xavier(&mut rng, 3 * c, c));
        store.insert(format!("{p}/msg_b"), bias(c));
        store.insert(format!("{p}/upd_w"), xavier(&mut rng, 2 * c, c));
        store.insert(format!("{p}/upd_b"), bias(c));
    }
    for k in 0..2 {
        store.insert(format!("encoder/axis{k}/score_w"), xavier(&mut rng, c, 1));
        store.insert(format!("encoder/axis{k}/score_b"), Tensor::zeros(&[1, 1]));
        store.insert(format!("encoder/axis{k}/mix"), xavier(&mut rng, c, 1));
    }
    store.insert("encoder/pool_w", xavier(&mut rng, c, cfg.embed_dim));
    store.insert("encoder/pool_b", bias(cfg.embed_dim));
}

/// Directed edges `(receiver, sender)`: the complete graph for small
/// molecules, otherwise each atom's k nearest neighbours.
pub fn neighborhood(coords: &[Vec3], cfg: &EncoderConfig) -> Vec<(usize, usize)> {
    let n = coords.len();
    let mut edges = Vec::new();
    if n <= cfg.full_graph_max {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    edges.push((i, j));
                }
            }
        }
    } else {
        for i in 0..n {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (geom::dist(coords[i], coords[j]), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            edges.extend(others.iter().take(cfg.knn).map(|&(_, j)| (i, j)));
        }
    }
    edges
}

fn rbf(d: f64, cfg: &EncoderConfig) -> Vec<f64> {
    let k = cfg.rbf_centers;
    let spacing = cfg.rbf_cutoff / (k - 1).max(1) as f64;
    (0..k)
        .map(|i| {
            let mu = i as f64 * spacing;
            (-((d - mu) / spacing).powi(2)).exp()
        })
        .collect()
}

/// Final-layer features as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub h: NodeId,
    /// x, y, z planes, each N×C.
    pub v: [NodeId; 3],
}

fn check_finite(g: &Graph, id: NodeId, layer: &str) -> Result<()> {
    if g.value(id).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("encoder activations at {layer}")))
    }
}

fn wrap_layer<T>(r: Result<T>, layer: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("encoder {layer}: {m}")),
        other => other,
    })
}

pub fn encoder_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    config: &MolecularConfiguration,
) -> Result<EncoderOutput> {
    let n = config.len();
    let c = cfg.channels;
    if config.numbers().iter().any(|&z| z > elements::MAX_Z) {
        return Err(Error::InvalidArgument("atomic number beyond the embedding table".into()));
    }
    let center = geom::centroid(config.coords());
    let x: Vec<Vec3> = config.coords().iter().map(|&q| geom::sub(q, center)).collect();
    let edges = neighborhood(&x, cfg);
    let z_index: Vec<usize> = config.numbers().iter().map(|&z| z as usize).collect();

    let h0 = wrap_layer(g.gather_rows(p.get("encoder/embed")?, z_index), "embedding")?;
    if edges.is_empty() {
        let zero = g.constant(Tensor::zeros(&[n, c]));
        return Ok(EncoderOutput { h: h0, v: [zero; 3] });
    }

    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let e_count = edges.len();
    let mut rbf_rows = Vec::with_capacity(e_count * cfg.rbf_centers);
    let mut dirs = [vec![0.0; e_count], vec![0.0; e_count], vec![0.0; e_count]];
    for (k, &(i, j)) in edges.iter().enumerate() {
        let d = geom::sub(x[j], x[i]);
        let len = geom::norm(d);
        rbf_rows.extend(rbf(len, cfg));
        if len > 0.0 {
            for a in 0..3 {
                dirs[a][k] = d[a] / len;
            }
        }
    }
    let rbf_node = g.constant(Tensor::matrix(e_count, cfg.rbf_centers, rbf_rows)?);
    let edge_feat = g.affine(rbf_node, p.get("encoder/rbf_w")?, p.get("encoder/rbf_b")?)?;

    let hi = g.gather_rows(h0, src.clone())?;
    let hj = g.gather_rows(h0, dst.clone())?;
    let pair = g.concat(&[hi, hj], 1)?;
    let psi_pre = g.affine(pair, p.get("encoder/psi_w")?, p.get("encoder/psi_b")?)?;
    let psi = g.tanh(psi_pre)?;
    let mut v = [psi; 3];
    for a in 0..3 {
        let dir = g.constant(Tensor::matrix(e_count, 1, dirs[a].clone())?);
        let weighted = g.mul(psi, dir)?;
        v[a] = g.scatter_add_rows(weighted, src.clone(), n)?;
    }
    check_finite(g, v[0], "vector init")?;

    let mut h = h0;
    for l in 0..cfg.layers {
        let name = format!("layer {l}");
        let pre = format!("encoder/layer{l}");
        let out: Result<()> = (|| {
            let hi = g.gather_rows(h, src.clone())?;
            let hj = g.gather_rows(h, dst.clone())?;
            let cat = g.concat(&[hi, hj, edge_feat], 1)?;
            let gate_pre = g.affine(cat, p.get(&format!("{pre}/gate_w"))?, p.get(&format!("{pre}/gate_b"))?)?;
            let gate = g.tanh(gate_pre)?;
            let msg_pre = g.affine(cat, p.get(&format!("{pre}/msg_w"))?, p.get(&format!("{pre}/msg_b"))?)?;
            let msg = g.tanh(msg_pre)?;

            let wv = p.get(&format!("{pre}/wv"))?;
            let mut new_v = v;
            let mut sq = None;
            for a in 0..3 {
                let mixed = g.matmul(v[a], wv)?;
                let vj = g.gather_rows(v[a], dst.clone())?;
                let gated = g.mul(gate, vj)?;
                let agg = g.scatter_add_rows(gated, src.clone(), n)?;
                new_v[a] = g.add(mixed, agg)?;
                let s = g.square(new_v[a])?;
                sq = Some(match sq {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
            let norms = g.sqrt_eps(sq.unwrap(), NORM_EPS)?;
            let msum = g.scatter_add_rows(msg, src.clone(), n)?;
            let upd_in = g.concat(&[msum, norms], 1)?;
            let upd_pre = g.affine(upd_in, p.get(&format!("{pre}/upd_w"))?, p.get(&format!("{pre}/upd_b"))?)?;
            let upd = g.tanh(upd_pre)?;
            h = g.add(h, upd)?;
            v = new_v;
            Ok(())
        })();
        wrap_layer(out, &name)?;
        check_finite(g, h, &name)?;
    }
    Ok(EncoderOutput { h, v })
}

#[derive(Clone, Copy, Debug)]
pub struct Axes {
    pub u: [NodeId; 2],
    /// Per-axis attention over atoms, 1×N.
    pub alpha: [NodeId; 2],
}

/// u_k = Σᵢ αᵢ⁽ᵏ⁾ · (channel mix of vᵢ), α from a softmax over atoms of an
/// invariant score.
pub fn aggregate_axes(g: &mut Graph, p: &Bound, out: &EncoderOutput) -> Result<Axes> {
    let mut u = [out.h; 2];
    let mut alpha = [out.h; 2];
    for k in 0..2 {
        let score = g.affine(out.h, p.get(&format!("encoder/axis{k}/score_w"))?, p.get(&format!("encoder/axis{k}/score_b"))?)?;
        let row = g.transpose(score)?;
        alpha[k] = g.softmax(row)?;
        let mix = p.get(&format!("encoder/axis{k}/mix"))?;
        let comps = out
            .v
            .iter()
            .map(|&plane| g.matmul(plane, mix))
            .collect::<Result<Vec<_>>>()?;
        let per_atom = g.concat(&comps, 1)?;
        u[k] = g.matmul(alpha[k], per_atom)?;
    }
    Ok(Axes { u, alpha })
}

fn normalize_node(g: &mut Graph, u: NodeId, eps: f64) -> Result<NodeId> {
    let sq = g.square(u)?;
    let s = g.sum(sq)?;
    let n = g.sqrt_eps(s, eps * eps)?;
    g.div(u, n)
}

fn first_non_parallel(q1: Vec3) -> Vec3 {
    (0..3)
        .map(|k| {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            e
        })
        .find(|&e| geom::dot(e, q1).abs() < 1.0 - DEGENERATE)
        .unwrap_or([0.0, 1.0, 0.0])
}

/// Modified Gram–Schmidt on the two axes, completed by a cross product.
/// Returns the 3×3 node holding Qᵀ (rows q₁, q₂, q₃).
///
/// Normalization is u / √(‖u‖² + ε²). When ‖u₁‖ is below 1e-6 the frame
/// falls back to the identity; when the orthogonal part of u₂ vanishes, q₂
/// comes from the first standard basis vector not parallel to q₁.
pub fn gram_schmidt_frame(g: &mut Graph, u1: NodeId, u2: NodeId, eps: f64) -> Result<NodeId> {
    if g.value(u1).norm() < DEGENERATE {
        return Ok(g.constant(Tensor::matrix(3, 3, geom::IDENTITY.concat())?));
    }
    let q1 = normalize_node(g, u1, eps)?;
    let proj = g.mul(u2, q1)?;
    let coef = g.sum(proj)?;
    let along = g.mul(q1, coef)?;
    let perp = g.sub(u2, along)?;
    let q2 = if g.value(perp).norm() < DEGENERATE {
        let q1v = vec3(g.value(q1));
        let e = g.constant(Tensor::row(&first_non_parallel(q1v)));
        let proj = g.mul(e, q1)?;
        let coef = g.sum(proj)?;
        let along = g.mul(q1, coef)?;
        let perp = g.sub(e, along)?;
        normalize_node(g, perp, eps)?
    } else {
        normalize_node(g, perp, eps)?
    };
    let q3 = g.cross3(q1, q2)?;
    g.concat(&[q1, q2, q3], 0)
}

fn vec3(t: &Tensor) -> Vec3 {
    [t.data()[0], t.data()[1], t.data()[2]]
}

/// Plain-value Gram–Schmidt with the same fallbacks as the graph version.
pub fn gram_schmidt(u1: Vec3, u2: Vec3, eps: f64) -> Mat3 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row(&u1));
    let b = g.constant(Tensor::row(&u2));
    let qt = gram_schmidt_frame(&mut g, a, b, eps).expect("3-vectors");
    rows_to_q(g.value(qt))
}

/// Converts the Qᵀ node value (rows = axes) into Q (columns = axes).
pub fn rows_to_q(qt: &Tensor) -> Mat3 {
    let d = qt.data();
    let mut q = [[0.0; 3]; 3];
    for k in 0..3 {
        for r in 0..3 {
            q[r][k] = d[k * 3 + r];
        }
    }
    q
}

/// Everything the downstream pipeline needs from one molecule.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    /// 1×D invariant embedding.
    pub embedding: NodeId,
    /// Qᵀ (rows are the frame axes).
    pub qt: NodeId,
    pub centroid: Vec3,
}

impl EncodedNodes {
    pub fn frame(&self, g: &Graph) -> CanonicalFrame {
        CanonicalFrame { q: rows_to_q(g.value(self.qt)), centroid: self.centroid }
    }
}

pub fn encode_molecule_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    config: &MolecularConfiguration,
) -> Result<EncodedNodes> {
    let out = encoder_forward(g, p, cfg, config)?;
    let n = config.len();
    let avg = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let pooled = g.matmul(avg, out.h)?;
    let embedding = g.affine(pooled, p.get("encoder/pool_w")?, p.get("encoder/pool_b")?)?;
    let axes = aggregate_axes(g, p, &out)?;
    let qt = gram_schmidt_frame(g, axes.u[0], axes.u[1], cfg.frame_eps)?;
    Ok(EncodedNodes { embedding, qt, centroid: geom::centroid(config.coords()) })
}

/// Embedding values and frame, without gradients.
///
/// Runs on plain buffers instead of a graph. Concatenated pair inputs are
/// never materialized: `[hᵢ, hⱼ, e]·W` is split into per-atom products
/// gathered per edge, which is the same sum in a different order.
pub fn encode_molecule(
    params: &ParamStore,
    cfg: &EncoderConfig,
    config: &MolecularConfiguration,
) -> Result<(Vec<f64>, CanonicalFrame)> {
    let n = config.len();
    let c = cfg.channels;
    if config.numbers().iter().any(|&z| z > elements::MAX_Z) {
        return Err(Error::InvalidArgument("atomic number beyond the embedding table".into()));
    }
    let w = |name: &str| params.get(name).map(|t| t.data());
    let center = geom::centroid(config.coords());
    let x: Vec<Vec3> = config.coords().iter().map(|&q| geom::sub(q, center)).collect();
    let edges = neighborhood(&x, cfg);

    let embed = w("encoder/embed")?;
    let mut h: Vec<f64> =
        config.numbers().iter().flat_map(|&z| embed[z as usize * c..(z as usize + 1) * c].iter().copied()).collect();
    let mut v = [vec![0.0; n * c], vec![0.0; n * c], vec![0.0; n * c]];

    if !edges.is_empty() {
        let e_count = edges.len();
        let mut rbf_rows = Vec::with_capacity(e_count * cfg.rbf_centers);
        let mut dirs = vec![[0.0; 3]; e_count];
        for (k, &(i, j)) in edges.iter().enumerate() {
            let d = geom::sub(x[j], x[i]);
            let len = geom::norm(d);
            rbf_rows.extend(rbf(len, cfg));
            if len > 0.0 {
                dirs[k] = [d[0] / len, d[1] / len, d[2] / len];
            }
        }
        let mut edge_feat = kernels::matmul(&rbf_rows, w("encoder/rbf_w")?, e_count, cfg.rbf_centers, c);
        add_bias(&mut edge_feat, w("encoder/rbf_b")?);

        let psi = pair_affine(&h, None, w("encoder/psi_w")?, w("encoder/psi_b")?, &edges, c, n);
        for (k, &(i, _)) in edges.iter().enumerate() {
            for ch in 0..c {
                let t = tanh_exp(psi[k * c + ch]);
                for a in 0..3 {
                    v[a][i * c + ch] += t * dirs[k][a];
                }
            }
        }
        finite_or(&v[0], "vector init")?;

        for l in 0..cfg.layers {
            let pre = format!("encoder/layer{l}");
            let get = |s: &str| w(&format!("{pre}/{s}"));
            let gate = pair_affine(&h, Some(&edge_feat), get("gate_w")?, get("gate_b")?, &edges, c, n);
            let msg = pair_affine(&h, Some(&edge_feat), get("msg_w")?, get("msg_b")?, &edges, c, n);
            let wv = get("wv")?;
            let mut new_v = [kernels::matmul(&v[0], wv, n, c, c), kernels::matmul(&v[1], wv, n, c, c), kernels::matmul(&v[2], wv, n, c, c)];
            let mut msum = vec![0.0; n * c];
            for (k, &(i, j)) in edges.iter().enumerate() {
                for ch in 0..c {
                    let gk = tanh_exp(gate[k * c + ch]);
                    for a in 0..3 {
                        new_v[a][i * c + ch] += gk * v[a][j * c + ch];
                    }
                    msum[i * c + ch] += tanh_exp(msg[k * c + ch]);
                }
            }
            let mut upd_in = Vec::with_capacity(n * 2 * c);
            for i in 0..n {
                upd_in.extend_from_slice(&msum[i * c..(i + 1) * c]);
                upd_in.extend((0..c).map(|ch| {
                    let s = new_v[0][i * c + ch].powi(2) + new_v[1][i * c + ch].powi(2) + new_v[2][i * c + ch].powi(2);
                    (s + NORM_EPS).sqrt()
                }));
            }
            let mut upd = kernels::matmul(&upd_in, get("upd_w")?, n, 2 * c, c);
            add_bias(&mut upd, get("upd_b")?);
            for (hv, u) in h.iter_mut().zip(&upd) {
                *hv += tanh_exp(*u);
            }
            v = new_v;
            finite_or(&h, &format!("layer {l}"))?;
        }
    }

    let mut pooled = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            pooled[ch] += h[i * c + ch] / n as f64;
        }
    }
    let mut embedding = kernels::matmul(&pooled, w("encoder/pool_w")?, 1, c, cfg.embed_dim);
    add_bias(&mut embedding, w("encoder/pool_b")?);

    let mut u = [[0.0; 3]; 2];
    for (k, uk) in u.iter_mut().enumerate() {
        let mut score = kernels::matmul(&h, w(&format!("encoder/axis{k}/score_w"))?, n, c, 1);
        add_bias(&mut score, w(&format!("encoder/axis{k}/score_b"))?);
        let top = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = score.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = ex.iter().sum();
        let mix = w(&format!("encoder/axis{k}/mix"))?;
        for a in 0..3 {
            let per_atom = kernels::matmul(&v[a], mix, n, c, 1);
            uk[a] = per_atom.iter().zip(&ex).map(|(p, e)| p * e / total).sum();
        }
    }
    let q = gram_schmidt(u[0], u[1], cfg.frame_eps);
    Ok((embedding, CanonicalFrame { q, centroid: center }))
}

/// tanh through a single `exp`, which is several times cheaper than libm's
/// `tanh` and agrees with it to a few ulps of 1.
fn tanh_exp(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn add_bias(rows: &mut [f64], b: &[f64]) {
    for chunk in rows.chunks_mut(b.len()) {
        for (x, y) in chunk.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn finite_or(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("encoder activations at {layer}")))
    }
}

/// Pre-activations of `[h_recv, h_send, edge]·W + b` for every edge, with
/// the weight split into its row blocks.
fn pair_affine(
    h: &[f64],
    edge_feat: Option<&[f64]>,
    w: &[f64],
    b: &[f64],
    edges: &[(usize, usize)],
    c: usize,
    n: usize,
) -> Vec<f64> {
    let recv = kernels::matmul(h, &w[..c * c], n, c, c);
    let send = kernels::matmul(h, &w[c * c..2 * c * c], n, c, c);
    let mut out = match edge_feat {
        Some(e) => kernels::matmul(e, &w[2 * c * c..3 * c * c], edges.len(), c, c),
        None => vec![0.0; edges.len() * c],
    };
    for (k, &(i, j)) in edges.iter().enumerate() {
        for ch in 0..c {
            out[k * c + ch] += recv[i * c + ch] + send[j * c + ch] + b[ch];
        }
    }
    out
}

/// Encoder features as plain values: h (N×C) and v as N×C×3.
pub fn encoder_features(
    params: &ParamStore,
    cfg: &EncoderConfig,
    config: &MolecularConfiguration,
) -> Result<(Tensor, Vec<[Vec<f64>; 3]>)> {
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let out = encoder_forward(&mut g, &p, cfg, config)?;
    let c = cfg.channels;
    let planes: Vec<&Tensor> = out.v.iter().map(|&id| g.value(id)).collect();
    let v = (0..config.len())
        .map(|i| {
            let row = |a: usize| planes[a].data()[i * c..(i + 1) * c].to_vec();
            [row(0), row(1), row(2)]
        })
        .collect();
    Ok((g.value(out.h).clone(), v))
}

/// Global axes and attention weights as plain values.
pub fn axes_values(
    params: &ParamStore,
    cfg: &EncoderConfig,
    config: &MolecularConfiguration,
) -> Result<([Vec3; 2], [Vec<f64>; 2])> {
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let out = encoder_forward(&mut g, &p, cfg, config)?;
    let axes = aggregate_axes(&mut g, &p, &out)?;
    let u = [vec3(g.value(axes.u[0])), vec3(g.value(axes.u[1]))];
    let alpha = [g.value(axes.alpha[0]).data().to_vec(), g.value(axes.alpha[1]).data().to_vec()];
    Ok((u, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{det, frobenius_diff, mat_mul, random_rigid, random_rotation, transform_config, transpose};
    use rand::Rng;

    fn params(seed: u64) -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig::tiny();
        let mut s = ParamStore::new();
        init_encoder_params(&cfg, seed, &mut s);
        (s, cfg)
    }

    fn random_config(seed: u64, n: usize) -> MolecularConfiguration {
        let mut r = crate::rng(seed);
        let zs = [1, 6, 7, 8];
        MolecularConfiguration::new(
            (0..n).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect(),
            (0..n).map(|_| zs[r.gen_range(0..4)]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gram_schmidt_examples() {
        let q = gram_schmidt([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-8);
        assert!(frobenius_diff(&q, &geom::IDENTITY) < 1e-12);
        let q = gram_schmidt([2.0, 0.0, 0.0], [1.0, 1.0, 0.0], 1e-8);
        assert!(frobenius_diff(&q, &geom::IDENTITY) < 1e-12);
        let q = gram_schmidt([0.0, 0.0, 3.0], [0.0, 2.0, 0.0], 1e-8);
        let f = CanonicalFrame { q, centroid: [0.0; 3] };
        for (k, want) in [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]].iter().enumerate() {
            assert!(geom::dist(f.column(k), *want) < 1e-12);
        }
        assert!((det(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_fallbacks() {
        assert_eq!(gram_schmidt([0.0; 3], [1.0, 2.0, 3.0], 1e-8), geom::IDENTITY);
        // u2 parallel to u1 = x̂: q2 comes from ŷ
        let q = gram_schmidt([3.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 1e-8);
        assert!(frobenius_diff(&q, &geom::IDENTITY) < 1e-12);
        let q = gram_schmidt([0.0, 1.0, 1.0], [0.0, 2.0, 2.0], 1e-8);
        assert!(frobenius_diff(&mat_mul(&transpose(&q), &q), &geom::IDENTITY) < 1e-12);
        assert!((det(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_coords_examples() {
        let f = CanonicalFrame { q: random_rotation(3).rotation, centroid: [1.0, -2.0, 0.5] };
        assert_eq!(f.canonical_coords(f.centroid), [0.0; 3]);
        let id = CanonicalFrame::identity();
        assert_eq!(id.canonical_coords([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let x = [0.3, 0.2, -4.0];
        assert!(geom::dist(f.to_world(f.canonical_coords(x)), x) < 1e-14);
    }

    #[test]
    fn single_atom_has_zero_vectors_and_axes() {
        let (s, cfg) = params(1);
        let c = MolecularConfiguration::new(vec![[1.0, 2.0, 3.0]], vec![6]).unwrap();
        let (_, v) = encoder_features(&s, &cfg, &c).unwrap();
        assert!(v[0].iter().flatten().all(|&x| x == 0.0));
        let (u, alpha) = axes_values(&s, &cfg, &c).unwrap();
        assert_eq!(u, [[0.0; 3]; 2]);
        assert_eq!(alpha[0], vec![1.0]);
        let (_, frame) = encode_molecule(&s, &cfg, &c).unwrap();
        assert_eq!(frame.q, geom::IDENTITY);
    }

    #[test]
    fn features_rotate_with_input() {
        let (s, cfg) = params(2);
        let c = MolecularConfiguration::new(
            vec![[0.0, 0.0, 0.0], [1.3, 0.1, 0.0], [0.2, 1.1, 0.4]],
            vec![6, 8, 1],
        )
        .unwrap();
        let g = random_rotation(5);
        let (h, v) = encoder_features(&s, &cfg, &c).unwrap();
        let (h2, v2) = encoder_features(&s, &cfg, &transform_config(&c, &g)).unwrap();
        assert!(h.max_abs_diff(&h2) < 1e-8);
        for (a, b) in v.iter().zip(&v2) {
            for ch in 0..cfg.channels {
                let rotated = g.rotation.map(|row| row[0] * a[0][ch] + row[1] * a[1][ch] + row[2] * a[2][ch]);
                for k in 0..3 {
                    assert!((rotated[k] - b[k][ch]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn permutation_permutes_rows() {
        let (s, cfg) = params(3);
        let c = random_config(4, 5);
        let perm = [3, 0, 4, 1, 2];
        let (h, v) = encoder_features(&s, &cfg, &c).unwrap();
        let (hp, vp) = encoder_features(&s, &cfg, &c.permuted(&perm)).unwrap();
        let cols = cfg.channels;
        for (k, &i) in perm.iter().enumerate() {
            for ch in 0..cols {
                assert!((h.get2(i, ch) - hp.get2(k, ch)).abs() < 1e-12);
                for a in 0..3 {
                    assert!((v[i][a][ch] - vp[k][a][ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn axes_are_equivariant_and_alpha_normalized() {
        let (s, cfg) = params(4);
        let c = random_config(9, 6);
        let g = random_rotation(77);
        let (u, alpha) = axes_values(&s, &cfg, &c).unwrap();
        let (ur, _) = axes_values(&s, &cfg, &transform_config(&c, &g)).unwrap();
        for k in 0..2 {
            assert!(geom::dist(geom::mat_vec(&g.rotation, u[k]), ur[k]) < 1e-8);
            assert!((alpha[k].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_equivariance_and_embedding_invariance() {
        let (s, cfg) = params(5);
        for seed in 0..20 {
            let c = random_config(100 + seed, 3 + seed as usize % 8);
            let g = random_rigid(200 + seed);
            let (e1, f1) = encode_molecule(&s, &cfg, &c).unwrap();
            let (e2, f2) = encode_molecule(&s, &cfg, &transform_config(&c, &g)).unwrap();
            assert!(frobenius_diff(&f2.q, &mat_mul(&g.rotation, &f1.q)) < 1e-6);
            assert!(e1.iter().zip(&e2).all(|(a, b)| (a - b).abs() < 1e-6));
            assert!((det(&f1.q) - 1.0).abs() < 1e-8);
            let x = [0.4, -1.0, 2.2];
            assert!(geom::dist(f1.canonical_coords(x), f2.canonical_coords(g.apply(x))) < 1e-6);
        }
    }

    #[test]
    fn embedding_permutation_invariant_and_distinct() {
        let (s, cfg) = params(6);
        let c = random_config(1, 6);
        let (e1, f1) = encode_molecule(&s, &cfg, &c).unwrap();
        let (e2, f2) = encode_molecule(&s, &cfg, &c.permuted(&[5, 4, 3, 2, 1, 0])).unwrap();
        assert!(e1.iter().zip(&e2).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(frobenius_diff(&f1.q, &f2.q) < 1e-10);
        let other = MolecularConfiguration::new(c.coords().to_vec(), vec![16; 6]).unwrap();
        let (e3, _) = encode_molecule(&s, &cfg, &other).unwrap();
        let diff: f64 = e1.iter().zip(&e3).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn plain_encoding_matches_graph() {
        let (s, cfg) = params(4);
        for (t, n) in [(0, 1), (1, 2), (2, 7), (3, 40)] {
            let c = random_config(t, n);
            let (e, f) = encode_molecule(&s, &cfg, &c).unwrap();
            let mut g = Graph::new();
            let p = s.bind_const(&mut g);
            let enc = encode_molecule_graph(&mut g, &p, &cfg, &c).unwrap();
            let diff = e.iter().zip(g.value(enc.embedding).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "n={n}: {diff}");
            assert!(frobenius_diff(&f.q, &enc.frame(&g).q) < 1e-12, "n={n}");
        }
    }

    #[test]
    fn knn_neighborhood_beyond_full_graph() {
        let cfg = EncoderConfig { full_graph_max: 4, knn: 2, ..EncoderConfig::tiny() };
        let coords: Vec<Vec3> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let e = neighborhood(&coords, &cfg);
        assert_eq!(e.len(), 12);
        assert!(e.contains(&(0, 1)) && e.contains(&(0, 2)));
        assert!(e.contains(&(3, 2)) && e.contains(&(3, 4)));
        let small = EncoderConfig::tiny();
        assert_eq!(neighborhood(&coords[..3], &small).len(), 6);
    }
}
