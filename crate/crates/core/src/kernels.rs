//! Matrix kernels used by the tape.
//!
//! Every kernel partitions work by output row, and each output row is
//! produced by exactly one worker with a fixed inner loop order. The
//! parallel and sequential paths are therefore bitwise identical.
//! The `parallel` feature selects the rayon path for the dispatching
//! entry points; both variants stay public so they can be benchmarked
//! against each other.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this count are not worth handing to the thread pool.
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 32;

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

#[inline]
fn matmul_nt_row(a_row: &[f64], b: &[f64], k: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if n == 0 {
        return;
    }
    for (i, row) in out.chunks_mut(n).enumerate().take(m) {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, row-parallel.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    out.par_chunks_mut(n)
        .enumerate()
        .take(m)
        .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`, single-threaded.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    for (i, row) in out.chunks_mut(n).enumerate().take(m) {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, k, row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    out.par_chunks_mut(n)
        .enumerate()
        .take(m)
        .for_each(|(i, row)| matmul_nt_row(&a[i * k..(i + 1) * k], b, k, row));
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`, single-threaded.
pub fn matmul_tn_acc_seq(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    for (p, row) in out.chunks_mut(n).enumerate().take(k) {
        tn_row(a, c, m, k, n, p, row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_acc_par(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    out.par_chunks_mut(n)
        .enumerate()
        .take(k)
        .for_each(|(p, row)| tn_row(a, c, m, k, n, p, row));
}

#[inline]
fn tn_row(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, p: usize, row: &mut [f64]) {
    for i in 0..m {
        let av = a[i * k + p];
        if av == 0.0 {
            continue;
        }
        let c_row = &c[i * n..(i + 1) * n];
        for (o, &cv) in row.iter_mut().zip(c_row) {
            *o += av * cv;
        }
    }
}

/// Dispatching matmul: parallel when the feature is on and the problem is big enough.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m >= PAR_MIN_ROWS {
        return matmul_par(a, b, m, k, n, out);
    }
    matmul_seq(a, b, m, k, n, out)
}

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m >= PAR_MIN_ROWS {
        return matmul_nt_par(a, b, m, k, n, out);
    }
    matmul_nt_seq(a, b, m, k, n, out)
}

pub fn matmul_tn_acc(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if k >= PAR_MIN_ROWS {
        return matmul_tn_acc_par(a, c, m, k, n, out);
    }
    matmul_tn_acc_seq(a, c, m, k, n, out)
}

/// Maps `f` over `items`, in parallel when the feature is on. Output order
/// always matches input order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
