//! Plain loops over row-major slices. Loop order is i-k-j so the inner loop
//! streams contiguous memory.

const BLOCK: usize = 16;

/// out[m×n] += a[m×k] · b[k×n]
///
/// Output columns are processed in register-sized blocks; every output
/// element still accumulates its k products in ascending order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 + BLOCK <= n {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&orow[j0..j0 + BLOCK]);
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..p * n + j0 + BLOCK];
                for l in 0..BLOCK {
                    acc[l] += av * brow[l];
                }
            }
            orow[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        if j0 < n {
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..(p + 1) * n];
                for (o, &bv) in orow[j0..].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += dot(grow, brow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n], rows of `a`/`g` accumulated in order.
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let orow = &mut out[p * n..(p + 1) * n];
        let mut j0 = 0;
        while j0 + BLOCK <= n {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&orow[j0..j0 + BLOCK]);
            for i in 0..m {
                let av = a[i * k + p];
                let grow = &g[i * n + j0..i * n + j0 + BLOCK];
                for l in 0..BLOCK {
                    acc[l] += av * grow[l];
                }
            }
            orow[j0..j0 + BLOCK].copy_from_slice(&acc);
            j0 += BLOCK;
        }
        if j0 < n {
            for i in 0..m {
                let av = a[i * k + p];
                for (o, &gv) in orow[j0..].iter_mut().zip(&g[i * n + j0..(i + 1) * n]) {
                    *o += av * gv;
                }
            }
        }
    }
}

/// Dot product with four interleaved partial sums so the loop vectorizes;
/// the summation order is fixed, so results are reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
