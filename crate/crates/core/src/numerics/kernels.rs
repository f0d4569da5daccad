//! Dense kernels used by the tape.
//!
//! Every output element of [`matmul_into`] is accumulated from zero over the
//! inner index in ascending order with one fused multiply-add per term, which
//! is exactly the textbook triple loop written with `mul_add`. The blocking
//! only changes which elements are computed together, never the per-element
//! sum order.

use super::array::Scalar;

/// Strided view of a matrix: element `(i, k)` lives at `i*row + k*col`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    row: usize,
    col: usize,
}

/// `c[p×r] = a[p×q] · b[q×r]`, overwriting `c`.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    let a = View { data: a, row: q, col: 1 };
    let b = View { data: b, row: r, col: 1 };
    strided(a, b, c, p, q, r);
}

fn strided<T: Scalar>(a: View<T>, b: View<T>, c: &mut [T], p: usize, q: usize, r: usize) {
    let mut packed = Vec::with_capacity(q * NR_WIDE);
    let mut j = 0;
    while j + NR_WIDE <= r {
        column_panel::<T, NR_WIDE>(a, b, c, &mut packed, j, p, q, r);
        j += NR_WIDE;
    }
    while j + 8 <= r {
        column_panel::<T, 8>(a, b, c, &mut packed, j, p, q, r);
        j += 8;
    }
    while j < r {
        column_panel::<T, 1>(a, b, c, &mut packed, j, p, q, r);
        j += 1;
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * r];
    matmul_into(a, b, &mut c, p, q, r);
    c
}

const NR_WIDE: usize = 32;
const MR: usize = 4;

/// Columns `j..j+NR` of `c`, with that slice of `b` packed contiguously.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn column_panel<T: Scalar, const NR: usize>(
    a: View<T>,
    b: View<T>,
    c: &mut [T],
    packed: &mut Vec<T>,
    j: usize,
    p: usize,
    q: usize,
    r: usize,
) {
    packed.clear();
    if b.col == 1 {
        for k in 0..q {
            packed.extend_from_slice(&b.data[k * b.row + j..k * b.row + j + NR]);
        }
    } else {
        packed.resize(q * NR, T::zero());
        for jj in 0..NR {
            let src = &b.data[(j + jj) * b.col..];
            for k in 0..q {
                packed[k * NR + jj] = src[k * b.row];
            }
        }
    }
    let mut i = 0;
    // Eight rows of 32 f32 columns fill sixteen vector registers; at f64 the
    // same tile would spill.
    if std::mem::size_of::<T>() == 4 {
        while i + 8 <= p {
            tile::<T, 8, NR>(a, packed, c, i, j, q, r);
            i += 8;
        }
    }
    while i + MR <= p {
        tile::<T, MR, NR>(a, packed, c, i, j, q, r);
        i += MR;
    }
    while i < p {
        tile::<T, 1, NR>(a, packed, c, i, j, q, r);
        i += 1;
    }
}

/// One `M×NR` block of `c`. Each element is accumulated from zero over
/// ascending `k` with one fused multiply-add per term. Kept out of line: once
/// the packed stride is a visible constant, LLVM vectorizes over `k` instead of
/// keeping the accumulators in registers, which is about ten times slower.
#[inline(never)]
fn tile<T: Scalar, const M: usize, const NR: usize>(
    a: View<T>,
    packed: &[T],
    c: &mut [T],
    i: usize,
    j: usize,
    q: usize,
    r: usize,
) {
    let mut acc = [[T::zero(); NR]; M];
    for k in 0..q {
        let brow: &[T; NR] = packed[k * NR..(k + 1) * NR].try_into().unwrap();
        for (ii, acc_row) in acc.iter_mut().enumerate() {
            let av = a.data[(i + ii) * a.row + k * a.col];
            for jj in 0..NR {
                acc_row[jj] = av.mul_add(brow[jj], acc_row[jj]);
            }
        }
    }
    for (ii, acc_row) in acc.iter().enumerate() {
        c[(i + ii) * r + j..(i + ii) * r + j + NR].copy_from_slice(acc_row);
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for ib in (0..rows).step_by(B) {
        for jb in (0..cols).step_by(B) {
            for i in ib..(ib + B).min(rows) {
                for j in jb..(jb + B).min(cols) {
                    out[j * rows + i] = x[i * cols + j];
                }
            }
        }
    }
    out
}

/// `a·bᵀ` where `a` is `p×q` and `b` is `r×q`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    debug_assert_eq!((a.len(), b.len()), (p * q, r * q));
    let mut c = vec![T::zero(); p * r];
    let a = View { data: a, row: q, col: 1 };
    let b = View { data: b, row: 1, col: q };
    strided(a, b, &mut c, p, q, r);
    c
}

/// `aᵀ·b` where `a` is `q×p` and `b` is `q×r`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    debug_assert_eq!((a.len(), b.len()), (q * p, q * r));
    let mut c = vec![T::zero(); p * r];
    let a = View { data: a, row: 1, col: p };
    let b = View { data: b, row: r, col: 1 };
    strided(a, b, &mut c, p, q, r);
    c
}
