use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;

fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(r, c, v.to_vec()).unwrap()
}

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts a node against a fixed random tensor so any output shape
/// becomes a scalar with a generic cotangent.
fn contract(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = random(seed ^ 0xABCD, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn tensor_rejects_bad_input() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
    assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
}

#[test]
fn matmul_relu_softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(mat(2, 1, &[1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.shape(c), &[2, 1]);

    let x = g.constant(Tensor::row(&[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = g.constant(Tensor::row(&[0.0, 0.0]));
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.constant(mat(2, 3, &[0.0; 6]));
    let b = g.constant(mat(2, 3, &[0.0; 6]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, node, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(node, 2);
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(mat(3, 2, &[0.0; 6]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn sum_wx_gradient_is_outer_product() {
    let mut g = Graph::new();
    let w = g.leaf(random(1, &[2, 3], -1.0, 1.0));
    let xv = [0.5, -1.5, 2.0];
    let x = g.constant(mat(3, 1, &xv));
    let y = g.matmul(w, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let gw = grads.get(w).unwrap();
    for r in 0..2 {
        for c in 0..3 {
            assert_eq!(gw.get2(r, c), xv[c]);
        }
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(&[1.0, 2.0]));
    let y = g.sin(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar { .. })));
}

#[test]
fn unreached_leaves_get_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let unused = g.leaf(Tensor::row(&[1.0, 1.0]));
    let y = g.square(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn grad_check_scalar_examples() {
    let sq = grad_check_graph(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 1e-6).unwrap();
    assert!(sq <= 1e-8, "x^2: {sq}");
    let sin = grad_check_graph(|g, x| g.sin(x), &Tensor::scalar(0.7), 1e-6).unwrap();
    assert!(sin <= 1e-8, "sin: {sin}");
}

#[test]
fn grad_check_reports_non_finite() {
    let r = grad_check(
        |p| {
            let v = p.item();
            Ok((if v > 1.0 { f64::NAN } else { v }, Tensor::scalar(1.0)))
        },
        &Tensor::scalar(1.0),
        1e-3,
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn forward_eval_rebinds_and_is_pure() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(&[1.0, 2.0]));
    let w = g.leaf(mat(2, 2, &[1.0, 0.5, -0.5, 2.0]));
    let h = g.matmul(x, w).unwrap();
    let t = g.tanh(h).unwrap();
    let out = g.sum(t).unwrap();
    let mut bind = HashMap::new();
    bind.insert(x, Tensor::row(&[0.3, -0.2]));
    bind.insert(w, mat(2, 2, &[0.1, 0.2, 0.3, 0.4]));
    let a = g.forward_eval(&bind, out).unwrap();
    let b = g.forward_eval(&bind, out).unwrap();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    let expected = (0.3f64 * 0.1 - 0.2 * 0.3).tanh() + (0.3f64 * 0.2 - 0.2 * 0.4).tanh();
    assert!((a.item() - expected).abs() < 1e-15);

    bind.remove(&w);
    assert!(matches!(g.forward_eval(&bind, out), Err(Error::UnboundLeaf(_))));
}

#[test]
fn backward_is_linear_in_cotangent() {
    let build = |g: &mut Graph, x: NodeId, a: f64| -> NodeId {
        let s = g.softplus(x).unwrap();
        let c = g.cos(s).unwrap();
        let m = g.mul(c, x).unwrap();
        let sum = g.sum(m).unwrap();
        g.scale(sum, a).unwrap()
    };
    let p = random(9, &[3, 4], -2.0, 2.0);
    let mut g1 = Graph::new();
    let x1 = g1.leaf(p.clone());
    let o1 = build(&mut g1, x1, 1.0);
    let mut g2 = Graph::new();
    let x2 = g2.leaf(p);
    let o2 = build(&mut g2, x2, -3.5);
    let a = g1.backward(o1).unwrap().take(x1).unwrap();
    let b = g2.backward(o2).unwrap().take(x2).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((v - (-3.5) * u).abs() <= 1e-14 * u.abs().max(1.0));
    }
}

#[test]
fn attend_single_key_returns_value() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::row(&[0.2, -0.1, 0.4, 0.0]));
    let k = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
    let v = g.constant(Tensor::row(&[5.0, 6.0, 7.0, 8.0]));
    let o = g.attend(q, &[k], &[v], 2).unwrap();
    assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn scatter_is_adjoint_of_gather() {
    let mut g = Graph::new();
    let x = g.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = g.gather_rows(x, vec![2, 0, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = g.scatter_add_rows(y, vec![2, 0, 2], 3).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
}

type Builder = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;

/// (name, lhs shape, rhs shape, lhs range, builder). The second operand is a
/// leaf too so binary ops are checked on both sides.
fn op_cases(r: usize, c: usize) -> Vec<(&'static str, Vec<usize>, Vec<usize>, (f64, f64), Builder)> {
    vec![
        ("matmul", vec![r, c], vec![c, r], (-1.0, 1.0), |g, a, b| g.matmul(a, b)),
        ("add", vec![r, c], vec![r, c], (-1.0, 1.0), |g, a, b| g.add(a, b)),
        ("add_row", vec![r, c], vec![1, c], (-1.0, 1.0), |g, a, b| g.add(a, b)),
        ("sub_col", vec![r, c], vec![r, 1], (-1.0, 1.0), |g, a, b| g.sub(a, b)),
        ("mul", vec![r, c], vec![r, c], (-1.0, 1.0), |g, a, b| g.mul(a, b)),
        ("mul_scalar", vec![r, c], vec![1], (-1.0, 1.0), |g, a, b| g.mul(a, b)),
        ("div", vec![r, c], vec![r, c], (-1.0, 1.0), |g, a, b| {
            let e = g.exp(b)?;
            g.div(a, e)
        }),
        ("sin", vec![r, c], vec![1], (-3.0, 3.0), |g, a, _| g.sin(a)),
        ("cos", vec![r, c], vec![1], (-3.0, 3.0), |g, a, _| g.cos(a)),
        ("tanh", vec![r, c], vec![1], (-2.0, 2.0), |g, a, _| g.tanh(a)),
        ("softplus", vec![r, c], vec![1], (-4.0, 4.0), |g, a, _| g.softplus(a)),
        ("sigmoid", vec![r, c], vec![1], (-4.0, 4.0), |g, a, _| g.sigmoid(a)),
        ("relu", vec![r, c], vec![1], (0.05, 1.0), |g, a, _| g.relu(a)),
        ("exp", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.exp(a)),
        ("abs", vec![r, c], vec![1], (0.05, 1.0), |g, a, _| g.abs(a)),
        ("square", vec![r, c], vec![1], (-2.0, 2.0), |g, a, _| g.square(a)),
        ("sqrt", vec![r, c], vec![1], (0.2, 2.0), |g, a, _| g.sqrt_eps(a, 1e-12)),
        ("layer_norm", vec![r, c.max(2)], vec![1], (-2.0, 2.0), |g, a, _| g.layer_norm(a, 1e-5)),
        ("softmax", vec![r, c], vec![1], (-2.0, 2.0), |g, a, _| g.softmax(a)),
        ("concat0", vec![r, c], vec![2, c], (-1.0, 1.0), |g, a, b| g.concat(&[a, b, a], 0)),
        ("concat1", vec![r, c], vec![r, 2], (-1.0, 1.0), |g, a, b| g.concat(&[b, a], 1)),
        ("slice0", vec![r + 1, c], vec![1], (-1.0, 1.0), |g, a, _| g.slice(a, 0, 1, 1)),
        ("slice1", vec![r, c + 1], vec![1], (-1.0, 1.0), |g, a, _| g.slice(a, 1, 1, 1)),
        ("reshape", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| {
            let n = g.value(a).len();
            g.reshape(a, &[n])
        }),
        ("transpose", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.transpose(a)),
        ("sum", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.sum(a)),
        ("mean", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.mean(a)),
        ("sum_axis0", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.sum_axis(a, 0)),
        ("sum_axis1", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.sum_axis(a, 1)),
        ("l1", vec![r, c], vec![1], (0.05, 1.0), |g, a, _| g.l1_norm(a)),
        ("l2", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| g.l2_norm(a)),
        ("gather", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| {
            let rows = g.value(a).dims2().0;
            g.gather_rows(a, vec![rows - 1, 0, rows - 1])
        }),
        ("scatter", vec![r, c], vec![1], (-1.0, 1.0), |g, a, _| {
            let rows = g.value(a).dims2().0;
            g.scatter_add_rows(a, (0..rows).map(|i| i % 2).collect(), 2)
        }),
        ("cross3", vec![1, 3], vec![1, 3], (-1.0, 1.0), |g, a, b| g.cross3(a, b)),
        ("attend", vec![1, 2 * c], vec![3, 2 * c], (-1.0, 1.0), |g, q, kv| {
            let rows: Vec<NodeId> = (0..3).map(|i| g.slice(kv, 0, i, 1)).collect::<Result<_>>()?;
            let keys = [rows[0], rows[1], rows[2]];
            let t0 = g.tanh(rows[0])?;
            let s2 = g.sin(rows[2])?;
            let values = [rows[1], t0, s2];
            g.attend(q, &keys, &values, 2)
        }),
    ]
}

fn check_op(seed: u64, r: usize, c: usize) {
    for (k, (name, sa, sb, (lo, hi), build)) in op_cases(r, c).into_iter().enumerate() {
        let a0 = random(seed + k as u64, &sa, lo, hi);
        let b0 = random(seed + 1000 + k as u64, &sb, lo.min(-0.5), hi.max(0.5));
        // w.r.t. first operand
        let b_fixed = b0.clone();
        let err_a = grad_check(
            |a| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone());
                let y = g.leaf(b_fixed.clone());
                let o = build(&mut g, x, y)?;
                let s = contract(&mut g, o, seed)?;
                let v = g.value(s).item();
                Ok((v, g.backward(s)?.take(x).unwrap()))
            },
            &a0,
            1e-6,
        )
        .unwrap();
        assert!(err_a <= 1e-5, "{name} lhs: {err_a}");
        let a_fixed = a0.clone();
        let err_b = grad_check(
            |b| {
                let mut g = Graph::new();
                let x = g.leaf(a_fixed.clone());
                let y = g.leaf(b.clone());
                let o = build(&mut g, x, y)?;
                let s = contract(&mut g, o, seed)?;
                let v = g.value(s).item();
                Ok((v, g.backward(s)?.take(y).unwrap()))
            },
            &b0,
            1e-6,
        )
        .unwrap();
        assert!(err_b <= 1e-5, "{name} rhs: {err_b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..10_000, r in 1usize..=7, c in 1usize..=7) {
        check_op(seed, r, c);
    }

    #[test]
    fn forward_is_bit_reproducible(seed in 0u64..10_000) {
        let x = random(seed, &[4, 5], -1.0, 1.0);
        let w = random(seed + 1, &[5, 3], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let wi = g.leaf(w.clone());
            let h = g.matmul(xi, wi).unwrap();
            let n = g.layer_norm(h, 1e-5).unwrap();
            let s = g.softmax(n).unwrap();
            g.value(s).clone()
        };
        let a = run();
        let b = run();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
