use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns `(value, gradient)` at a point. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("grad_check base value".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Shape {
            op: "grad_check",
            node: 0,
            lhs: point.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    grad_check_values(|p| Ok(f(p)?.0), &analytic, point, step)
}

/// Compares a precomputed `analytic` gradient with central differences of
/// `value` around `point`, using the same error measure as [`grad_check`].
pub fn grad_check_values<V>(value: V, analytic: &Tensor, point: &Tensor, step: f64) -> Result<f64>
where
    V: Fn(&Tensor) -> Result<f64>,
{
    if analytic.shape() != point.shape() {
        return Err(Error::Shape {
            op: "grad_check",
            node: 0,
            lhs: point.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let x = probe[i];
        probe[i] = x + step;
        let plus = value(&Tensor::new(point.shape().to_vec(), probe.clone())?)?;
        probe[i] = x - step;
        let minus = value(&Tensor::new(point.shape().to_vec(), probe.clone())?)?;
        probe[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("grad_check probe at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// [`grad_check`] for a function expressed as a graph builder: `build`
/// receives a fresh graph and the leaf holding the point and must return
/// a scalar node.
pub fn grad_check_graph<B>(build: B, point: &Tensor, step: f64) -> Result<f64>
where
    B: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check(
        |p| {
            let mut g = Graph::new();
            let x = g.leaf(p.clone());
            let out = build(&mut g, x)?;
            let value = g.value(out).item();
            let mut grads = g.backward(out)?;
            Ok((value, grads.take(x).expect("leaf gradient")))
        },
        point,
        step,
    )
}
