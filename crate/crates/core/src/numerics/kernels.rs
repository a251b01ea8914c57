//! Slice-level kernels shared by the tape and the incremental decoder.
//!
//! Loop order is fixed in every reduction. The decoder relies on this to
//! reproduce the tape's logits bit for bit.

use super::{NumericsError, Result, Scalar};

/// `c[m,n] = a[m,k] * b[k,n]`, overwriting `c`.
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    }
}

/// `c[m,n] = a[m,k] * b[n,k]^T`, overwriting `c`.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            c[i * n + j] = acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub fn matmul_nn_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    }
}

fn check_finite<F: Scalar>(x: &[F], op: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

fn row_max<F: Scalar>(row: &[F]) -> F {
    row.iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m })
}

pub fn log_softmax_rows<F: Scalar>(x: &[F], v: usize, out: &mut [F]) -> Result<()> {
    check_finite(x, "log_softmax")?;
    for (row, orow) in x.chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        let m = row_max(row);
        let mut s = F::zero();
        for &z in row {
            s += (z - m).exp();
        }
        let lse = m + s.ln();
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = z - lse;
        }
    }
    Ok(())
}

pub fn softmax_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let m = row_max(row);
    let mut s = F::zero();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        s += *o;
    }
    let inv = F::one() / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn entropy_rows<F: Scalar>(x: &[F], v: usize, out: &mut [F]) -> Result<()> {
    check_finite(x, "entropy_from_logits")?;
    let mut logp = vec![F::zero(); v];
    for (row, h) in x.chunks_exact(v).zip(out.iter_mut()) {
        log_softmax_one(row, &mut logp);
        let mut acc = F::zero();
        for &lp in &logp {
            acc -= lp.exp() * lp;
        }
        *h = if acc < F::zero() { F::zero() } else { acc };
    }
    Ok(())
}

pub fn log_softmax_one<F: Scalar>(row: &[F], out: &mut [F]) {
    let m = row_max(row);
    let mut s = F::zero();
    for &z in row {
        s += (z - m).exp();
    }
    let lse = m + s.ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

/// Softmax of row `i` restricted to columns `0..=i`; later columns are zero.
pub fn causal_softmax_rows<F: Scalar>(x: &[F], t: usize, out: &mut [F]) {
    for i in 0..t {
        let row = &x[i * t..i * t + i + 1];
        let orow = &mut out[i * t..(i + 1) * t];
        softmax_into(row, &mut orow[..=i]);
        orow[i + 1..].iter_mut().for_each(|o| *o = F::zero());
    }
}

/// Layer norm over rows of width `d`; writes normalized values and per-row
/// reciprocal standard deviations.
pub fn layer_norm_rows<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    d: usize,
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let eps = F::of(1e-5);
    let inv_d = F::one() / F::of(d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mut mean = F::zero();
        for &z in row {
            mean += z;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &z in row {
            var += (z - mean) * (z - mean);
        }
        var *= inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}
