//! Raw f64 kernels behind the tensor ops.
//!
//! Each kernel has a sequential body; with the `parallel` feature the outer
//! loop fans out over rayon while every output element keeps the exact same
//! accumulation order, so parallel and sequential builds are bitwise equal.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which parallel dispatch is not worth
/// the fork-join overhead.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 16 * 1024;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul_nn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_nn_row(&a[i * k..(i + 1) * k], b, k, n, row);
    }
}

#[inline]
fn matmul_nn_row(a_row: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for l in 0..k {
        let av = a_row[l];
        let b_row = &b[l * n..(l + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(row, a_row)| matmul_nn_row(a_row, b, k, n, row));
}

pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        return matmul_nn_par(a, b, m, k, n, out);
    }
    matmul_nn_seq(a, b, m, k, n, out);
}

/// out[m,n] = a[m,k] @ b[n,k]^T
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, k, row);
    }
}

#[inline]
fn matmul_nt_row(a_row: &[f64], b: &[f64], k: usize, out_row: &mut [f64]) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(row, a_row)| matmul_nt_row(a_row, b, k, row));
}

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        return matmul_nt_par(a, b, m, k, n, out);
    }
    matmul_nt_seq(a, b, m, k, n, out);
}

/// out[k,n] = a[m,k]^T @ b[m,n]
pub fn matmul_tn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for (l, row) in out.chunks_mut(n).enumerate() {
        matmul_tn_row(a, b, m, k, n, l, row);
    }
}

#[inline]
fn matmul_tn_row(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, l: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for i in 0..m {
        let av = a[i * k + l];
        let b_row = &b[i * n..(i + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(l, row)| matmul_tn_row(a, b, m, k, n, l, row));
}

pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK && k > 1 {
        return matmul_tn_par(a, b, m, k, n, out);
    }
    matmul_tn_seq(a, b, m, k, n, out);
}

/// Batched: for each g, out[g] = a[g] (m x k) @ b[g] (k x n), optionally with
/// b[g] stored transposed (n x k).
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
    out: &mut [f64],
) {
    let (asz, bsz, osz) = (m * k, k * n, m * n);
    debug_assert_eq!(out.len(), batch * osz);
    let slice_job = |g: usize, out_g: &mut [f64]| {
        let a_g = &a[g * asz..(g + 1) * asz];
        let b_g = &b[g * bsz..(g + 1) * bsz];
        if b_transposed {
            matmul_nt_seq(a_g, b_g, m, k, n, out_g);
        } else {
            matmul_nn_seq(a_g, b_g, m, k, n, out_g);
        }
    };
    #[cfg(feature = "parallel")]
    if batch * m * k * n >= PAR_MIN_WORK && batch > 1 {
        out.par_chunks_mut(osz)
            .enumerate()
            .for_each(|(g, out_g)| slice_job(g, out_g));
        return;
    }
    for (g, out_g) in out.chunks_mut(osz).enumerate() {
        slice_job(g, out_g);
    }
}

/// Batched: for each g, out[g] = a[g] (m x k)^T @ b[g] (m x n), so out slices
/// are k x n. Used by the backward pass of batched products.
pub fn bmm_tn(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, out: &mut [f64]) {
    let (asz, bsz, osz) = (m * k, m * n, k * n);
    debug_assert_eq!(out.len(), batch * osz);
    let slice_job = |g: usize, out_g: &mut [f64]| {
        matmul_tn_seq(&a[g * asz..(g + 1) * asz], &b[g * bsz..(g + 1) * bsz], m, k, n, out_g);
    };
    #[cfg(feature = "parallel")]
    if batch * m * k * n >= PAR_MIN_WORK && batch > 1 {
        out.par_chunks_mut(osz)
            .enumerate()
            .for_each(|(g, out_g)| slice_job(g, out_g));
        return;
    }
    for (g, out_g) in out.chunks_mut(osz).enumerate() {
        slice_job(g, out_g);
    }
}

/// Applies f element-wise over paired inputs.
pub fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync, out: &mut [f64]) {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if a.len() >= PAR_MIN_WORK {
        out.par_iter_mut()
            .zip(a.par_iter().zip(b.par_iter()))
            .for_each(|(o, (&x, &y))| *o = f(x, y));
        return;
    }
    for (o, (&x, &y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
        *o = f(x, y);
    }
}

pub fn map(a: &[f64], f: impl Fn(f64) -> f64 + Sync, out: &mut [f64]) {
    debug_assert_eq!(a.len(), out.len());
    #[cfg(feature = "parallel")]
    if a.len() >= PAR_MIN_WORK {
        out.par_iter_mut()
            .zip(a.par_iter())
            .for_each(|(o, &x)| *o = f(x));
        return;
    }
    for (o, &x) in out.iter_mut().zip(a.iter()) {
        *o = f(x);
    }
}

/// Row-wise softmax with temperature and max-subtraction, rows of width `w`.
pub fn softmax_rows(x: &[f64], w: usize, temperature: f64, out: &mut [f64]) {
    let row_job = |x_row: &[f64], o_row: &mut [f64]| {
        let mut mx = f64::NEG_INFINITY;
        for &v in x_row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            let e = ((v - mx) / temperature).exp();
            *o = e;
            sum += e;
        }
        for o in o_row.iter_mut() {
            *o /= sum;
        }
    };
    #[cfg(feature = "parallel")]
    if x.len() >= PAR_MIN_WORK && x.len() / w > 1 {
        out.par_chunks_mut(w)
            .zip(x.par_chunks(w))
            .for_each(|(o_row, x_row)| row_job(x_row, o_row));
        return;
    }
    for (o_row, x_row) in out.chunks_mut(w).zip(x.chunks(w)) {
        row_job(x_row, o_row);
    }
}

/// Row-wise log-softmax with temperature: computed directly from shifted
/// logits, not as log(softmax(x)).
pub fn log_softmax_rows(x: &[f64], w: usize, temperature: f64, out: &mut [f64]) {
    for (o_row, x_row) in out.chunks_mut(w).zip(x.chunks(w)) {
        let mut mx = f64::NEG_INFINITY;
        for &v in x_row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for &v in x_row {
            sum += ((v - mx) / temperature).exp();
        }
        let log_z = sum.ln();
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            *o = (v - mx) / temperature - log_z;
        }
    }
}

pub const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044715;

/// tanh-form gelu
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
