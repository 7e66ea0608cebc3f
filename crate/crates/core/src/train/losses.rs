//! Task losses, as graph builders and as plain evaluations.

use crate::cinr::{self, FieldArchitecture, FieldParameters};
use crate::encoder::CanonicalFrame;
use crate::error::{Error, Result};
use crate::geom::{self, MolecularConfiguration, Vec3};
use crate::tensor::{Graph, NodeId, Tensor};

const NORM_EPS: f64 = 1e-12;

/// mean |f − target| over queries plus mean |f| over surface samples.
pub fn sdf_graph(g: &mut Graph, f: NodeId, target: &[f64], f_surface: Option<NodeId>) -> Result<NodeId> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("SDF loss needs at least one query".into()));
    }
    let t = g.constant(Tensor::matrix(target.len(), 1, target.to_vec())?);
    let d = g.sub(f, t)?;
    let a = g.abs(d)?;
    let fit = g.mean(a)?;
    match f_surface {
        Some(s) => {
            let a = g.abs(s)?;
            let on = g.mean(a)?;
            g.add(fit, on)
        }
        None => Ok(fit),
    }
}

/// mean (‖∇f‖ − 1)² for an n×3 gradient node.
pub fn eikonal_graph(g: &mut Graph, grad: NodeId) -> Result<NodeId> {
    let sq = g.square(grad)?;
    let s = g.sum_axis(sq, 1)?;
    let n = g.sqrt_eps(s, NORM_EPS)?;
    let d = g.add_scalar(n, -1.0)?;
    let d2 = g.square(d)?;
    g.mean(d2)
}

/// Mean over query rows of the squared channel error.
pub fn density_graph(g: &mut Graph, f: NodeId, target: &Tensor) -> Result<NodeId> {
    if g.shape(f) != target.shape() {
        return Err(Error::Shape { op: "density loss", node: f.0, lhs: g.shape(f).to_vec(), rhs: target.shape().to_vec() });
    }
    let rows = target.shape()[0] as f64;
    let t = g.constant(target.clone());
    let d = g.sub(f, t)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / rows)
}

/// Σ |ŷ − y| for a 1×P prediction node.
pub fn property_graph(g: &mut Graph, yhat: NodeId, y: &[f64]) -> Result<NodeId> {
    if g.shape(yhat) != [1, y.len()] {
        return Err(Error::Shape { op: "property loss", node: yhat.0, lhs: g.shape(yhat).to_vec(), rhs: vec![1, y.len()] });
    }
    let t = g.constant(Tensor::row(y));
    let d = g.sub(yhat, t)?;
    g.l1_norm(d)
}

fn canonical_batch(frame: &CanonicalFrame, xs: &[Vec3]) -> Result<Tensor> {
    Tensor::matrix(xs.len(), 3, xs.iter().flat_map(|&x| frame.canonical_coords(x)).collect())
}

fn field_values(theta: &FieldParameters, arch: &FieldArchitecture, frame: &CanonicalFrame, xs: &[Vec3]) -> Result<(Graph, NodeId)> {
    theta.check(arch)?;
    let mut g = Graph::new();
    let nodes = theta.constants(&mut g);
    let x = g.constant(canonical_batch(frame, xs)?);
    let f = cinr::field_forward(&mut g, arch, &nodes, x)?;
    Ok((g, f))
}

pub fn loss_sdf(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    config: &MolecularConfiguration,
    queries: &[Vec3],
    surface: &[Vec3],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("SDF loss needs at least one query".into()));
    }
    let (mut g, f) = field_values(theta, arch, frame, queries)?;
    let f0 = g.slice(f, 1, 0, 1)?;
    let target: Vec<f64> = queries.iter().map(|&x| geom::oracle_sdf(config, x)).collect();
    let fs = if surface.is_empty() {
        None
    } else {
        let nodes = theta.constants(&mut g);
        let xs = g.constant(canonical_batch(frame, surface)?);
        let f = cinr::field_forward(&mut g, arch, &nodes, xs)?;
        Some(g.slice(f, 1, 0, 1)?)
    };
    let l = sdf_graph(&mut g, f0, &target, fs)?;
    Ok(g.value(l).item())
}

pub fn loss_eikonal(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    queries: &[Vec3],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("eikonal loss needs at least one query".into()));
    }
    theta.check(arch)?;
    let mut g = Graph::new();
    let nodes = theta.constants(&mut g);
    let x = g.constant(canonical_batch(frame, queries)?);
    let (_, grad) = cinr::field_forward_with_grad(&mut g, arch, &nodes, x)?;
    let l = eikonal_graph(&mut g, grad)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdLoss {
    pub total: f64,
    pub sdf: f64,
    pub eikonal: f64,
}

pub fn combine_md(sdf: f64, eikonal: f64, lambda: f64) -> MdLoss {
    MdLoss { total: sdf + lambda * eikonal, sdf, eikonal }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_md(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    config: &MolecularConfiguration,
    queries: &[Vec3],
    surface: &[Vec3],
    lambda: f64,
) -> Result<MdLoss> {
    let sdf = loss_sdf(theta, arch, frame, config, queries, surface)?;
    let eik = loss_eikonal(theta, arch, frame, queries)?;
    Ok(combine_md(sdf, eik, lambda))
}

/// Σ |pooled·W + b − y|.
pub fn loss_property(pooled: &[f64], head_w: &Tensor, head_b: &Tensor, y: &[f64]) -> Result<f64> {
    let (d, p) = head_w.dims2();
    if pooled.len() != d || y.len() != p || head_b.len() != p {
        return Err(Error::Shape { op: "property loss", node: 0, lhs: vec![pooled.len(), y.len()], rhs: vec![d, p] });
    }
    Ok((0..p)
        .map(|j| {
            let yhat = head_b.data()[j] + (0..d).map(|i| pooled[i] * head_w.get2(i, j)).sum::<f64>();
            (yhat - y[j]).abs()
        })
        .sum())
}

pub fn density_targets(config: &MolecularConfiguration, vocab: &[u32], xs: &[Vec3]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(xs.len() * vocab.len());
    for &x in xs {
        data.extend(geom::oracle_density(config, vocab, x)?);
    }
    Tensor::matrix(xs.len(), vocab.len(), data)
}

pub fn loss_density(
    theta: &FieldParameters,
    arch: &FieldArchitecture,
    frame: &CanonicalFrame,
    config: &MolecularConfiguration,
    vocab: &[u32],
    queries: &[Vec3],
) -> Result<f64> {
    if arch.out_dim != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "field has {} channels, density has {}",
            arch.out_dim,
            vocab.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("density loss needs at least one query".into()));
    }
    let target = density_targets(config, vocab, queries)?;
    let (mut g, f) = field_values(theta, arch, frame, queries)?;
    let l = density_graph(&mut g, f, &target)?;
    Ok(g.value(l).item())
}
