//! Small dense matrix kernels backing the convolution layers.
//!
//! Both kernels work on row-major slices and accumulate (`C += ...`), so a
//! caller can sum contributions from several filter taps into one output
//! buffer. The hot loops keep a fixed-size tile of partial sums in local
//! arrays; accumulating straight into the output buffer instead would
//! serialise every update on the store-to-load latency of the same slot
//! and leave most of the floating-point units idle.

use crate::tensor::Real;

/// Rows of `C` computed per tile.
const MR: usize = 4;
/// Columns of `C` computed per tile.
const NR: usize = 8;

/// `C += A * B` for row-major `A (m x k)`, `B (k x n)`, `C (m x n)`.
pub(crate) fn mm_nn(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows_a = a.chunks_exact(k);
    let mut rows_c = c.chunks_exact_mut(n);
    let mut i = 0;
    while i + MR <= m {
        let (a0, a1, a2, a3) = (
            rows_a.next().unwrap(),
            rows_a.next().unwrap(),
            rows_a.next().unwrap(),
            rows_a.next().unwrap(),
        );
        let (c0, c1, c2, c3) = (
            rows_c.next().unwrap(),
            rows_c.next().unwrap(),
            rows_c.next().unwrap(),
            rows_c.next().unwrap(),
        );
        nn_rows4(a0, a1, a2, a3, b, n, c0, c1, c2, c3);
        i += MR;
    }
    for (ar, cr) in rows_a.zip(rows_c) {
        nn_row1(ar, b, n, cr);
    }
}

/// Four `A` rows against all of `B`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn nn_rows4(
    a0: &[Real],
    a1: &[Real],
    a2: &[Real],
    a3: &[Real],
    b: &[Real],
    n: usize,
    c0: &mut [Real],
    c1: &mut [Real],
    c2: &mut [Real],
    c3: &mut [Real],
) {
    let mut j = 0;
    while j + NR <= n {
        // One flat accumulator per row, each updated by its own tight loop:
        // a single loop writing through a two-dimensional array defeats the
        // auto-vectoriser, while these per-row axpy loops compile to packed
        // multiply-adds.  Every accumulator still sees the same sequence of
        // additions, so the results are bit-identical to the fused form.
        let mut s0 = [0.0 as Real; NR];
        let mut s1 = [0.0 as Real; NR];
        let mut s2 = [0.0 as Real; NR];
        let mut s3 = [0.0 as Real; NR];
        for ((((&x0, &x1), &x2), &x3), brow) in
            a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n))
        {
            let bj: &[Real; NR] = brow[j..j + NR].try_into().unwrap();
            for t in 0..NR {
                s0[t] += x0 * bj[t];
            }
            for t in 0..NR {
                s1[t] += x1 * bj[t];
            }
            for t in 0..NR {
                s2[t] += x2 * bj[t];
            }
            for t in 0..NR {
                s3[t] += x3 * bj[t];
            }
        }
        for t in 0..NR {
            c0[j + t] += s0[t];
            c1[j + t] += s1[t];
            c2[j + t] += s2[t];
            c3[j + t] += s3[t];
        }
        j += NR;
    }
    while j < n {
        let mut s = [0.0 as Real; MR];
        for ((((&x0, &x1), &x2), &x3), brow) in
            a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n))
        {
            let bv = brow[j];
            s[0] += x0 * bv;
            s[1] += x1 * bv;
            s[2] += x2 * bv;
            s[3] += x3 * bv;
        }
        c0[j] += s[0];
        c1[j] += s[1];
        c2[j] += s[2];
        c3[j] += s[3];
        j += 1;
    }
}

/// One `A` row against all of `B`.
#[inline]
fn nn_row1(ar: &[Real], b: &[Real], n: usize, cr: &mut [Real]) {
    let mut j = 0;
    while j + NR <= n {
        let mut s = [0.0 as Real; NR];
        for (&x, brow) in ar.iter().zip(b.chunks_exact(n)) {
            let bj: &[Real; NR] = brow[j..j + NR].try_into().unwrap();
            for t in 0..NR {
                s[t] += x * bj[t];
            }
        }
        for t in 0..NR {
            cr[j + t] += s[t];
        }
        j += NR;
    }
    while j < n {
        let mut s = 0.0;
        for (&x, brow) in ar.iter().zip(b.chunks_exact(n)) {
            s += x * brow[j];
        }
        cr[j] += s;
        j += 1;
    }
}

/// `C += A^T * G` for row-major `A (m x d)`, `G (m x r)`, `C (d x r)`.
///
/// This is the weight-gradient shape: each sample row of `A` and `G`
/// contributes a rank-one update, and the tile turns that stream of updates
/// into register-resident outer products.
pub(crate) fn mm_tn(a: &[Real], g: &[Real], c: &mut [Real], m: usize, d: usize, r: usize) {
    debug_assert_eq!(a.len(), m * d);
    debug_assert_eq!(g.len(), m * r);
    debug_assert_eq!(c.len(), d * r);
    let mut ci = 0;
    while ci + MR <= d {
        let mut k = 0;
        while k + NR <= r {
            // Flat per-row accumulators for the same reason as in `nn_rows4`.
            let mut s0 = [0.0 as Real; NR];
            let mut s1 = [0.0 as Real; NR];
            let mut s2 = [0.0 as Real; NR];
            let mut s3 = [0.0 as Real; NR];
            for (arow, grow) in a.chunks_exact(d).zip(g.chunks_exact(r)) {
                let av: &[Real; MR] = arow[ci..ci + MR].try_into().unwrap();
                let gv: &[Real; NR] = grow[k..k + NR].try_into().unwrap();
                for t in 0..NR {
                    s0[t] += av[0] * gv[t];
                }
                for t in 0..NR {
                    s1[t] += av[1] * gv[t];
                }
                for t in 0..NR {
                    s2[t] += av[2] * gv[t];
                }
                for t in 0..NR {
                    s3[t] += av[3] * gv[t];
                }
            }
            let s = [s0, s1, s2, s3];
            for (ii, si) in s.iter().enumerate() {
                let crow = &mut c[(ci + ii) * r + k..(ci + ii) * r + k + NR];
                for t in 0..NR {
                    crow[t] += si[t];
                }
            }
            k += NR;
        }
        while k < r {
            let mut s = [0.0 as Real; MR];
            for (arow, grow) in a.chunks_exact(d).zip(g.chunks_exact(r)) {
                let av: &[Real; MR] = arow[ci..ci + MR].try_into().unwrap();
                let gv = grow[k];
                for ii in 0..MR {
                    s[ii] += av[ii] * gv;
                }
            }
            for (ii, si) in s.iter().enumerate() {
                c[(ci + ii) * r + k] += si;
            }
            k += 1;
        }
        ci += MR;
    }
    while ci < d {
        let mut k = 0;
        while k + NR <= r {
            let mut s = [0.0 as Real; NR];
            for (arow, grow) in a.chunks_exact(d).zip(g.chunks_exact(r)) {
                let x = arow[ci];
                let gv: &[Real; NR] = grow[k..k + NR].try_into().unwrap();
                for t in 0..NR {
                    s[t] += x * gv[t];
                }
            }
            let crow = &mut c[ci * r + k..ci * r + k + NR];
            for t in 0..NR {
                crow[t] += s[t];
            }
            k += NR;
        }
        while k < r {
            let mut s = 0.0;
            for (arow, grow) in a.chunks_exact(d).zip(g.chunks_exact(r)) {
                s += arow[ci] * grow[k];
            }
            c[ci * r + k] += s;
            k += 1;
        }
        ci += 1;
    }
}
