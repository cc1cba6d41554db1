//! Raw matrix kernels behind the tape ops.
//!
//! Each kernel has a sequential implementation and, with the `parallel`
//! feature, a rayon row-parallel variant. Both compute every output element
//! with the same inner-loop order, so results are bit-identical across modes
//! and thread counts. The `parallel` bench compares the two directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which the parallel kernels fall back
/// to the sequential path; tiny matrices lose more to task overhead than
/// they gain from extra cores.
pub const PAR_MIN_FLOPS: usize = 1 << 18;

fn mm_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], p: usize, n: usize) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let mut acc = 0.0;
        for q in 0..p {
            acc += a_row[q] * b[q * n + j];
        }
        *o = acc;
    }
}

fn mm_nt_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], p: usize, n: usize) {
    for j in 0..n {
        let b_row = &b[j * p..(j + 1) * p];
        let mut acc = 0.0;
        for q in 0..p {
            acc += a_row[q] * b_row[q];
        }
        out_row[j] = acc;
    }
}

/// C[m×n] = A[m×p] · B[p×n], sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        mm_row(&mut out[i * n..(i + 1) * n], &a[i * p..(i + 1) * p], b, p, n);
    }
    out
}

/// C[m×n] = A[m×p] · B[p×n], rayon over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .zip(a.par_chunks(p))
        .for_each(|(out_row, a_row)| mm_row(out_row, a_row, b, p, n));
    out
}

#[cfg(not(feature = "parallel"))]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    matmul_seq(a, b, m, p, n)
}

/// C = A·B, picking the parallel kernel when the work justifies it.
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    if cfg!(feature = "parallel") && m > 1 && m * p * n >= PAR_MIN_FLOPS {
        matmul_par(a, b, m, p, n)
    } else {
        matmul_seq(a, b, m, p, n)
    }
}

/// C[m×n] = A[m×p] · B[n×p]ᵀ, sequential.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        mm_nt_row(&mut out[i * n..(i + 1) * n], &a[i * p..(i + 1) * p], b, p, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .zip(a.par_chunks(p))
        .for_each(|(out_row, a_row)| mm_nt_row(out_row, a_row, b, p, n));
    out
}

#[cfg(not(feature = "parallel"))]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    matmul_nt_seq(a, b, m, p, n)
}

/// C = A·Bᵀ with automatic kernel choice.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    if cfg!(feature = "parallel") && m > 1 && m * p * n >= PAR_MIN_FLOPS {
        matmul_nt_par(a, b, m, p, n)
    } else {
        matmul_nt_seq(a, b, m, p, n)
    }
}

/// C[p×n] = A[m×p]ᵀ · B[m×n]. Used only by backward rules; stays sequential
/// since the column-major accumulation does not split by output row cheaply.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * n];
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let b_row = &b[i * n..(i + 1) * n];
        for (q, &aq) in a_row.iter().enumerate() {
            let out_row = &mut out[q * n..(q + 1) * n];
            for j in 0..n {
                out_row[j] += aq * b_row[j];
            }
        }
    }
    out
}
