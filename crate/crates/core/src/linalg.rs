//! Row-major GEMM on top of `matrixmultiply`.

use crate::par;
use crate::tensor::Scalar;

/// `c (m x n) = op(a) * op(b)`, or `+=` when `accumulate` is set.
///
/// `a` is stored `m x k` (`k x m` when `trans_a`), `b` is stored `k x n`
/// (`n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    accumulate: bool,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };

    // Split over row blocks of C when A is untransposed; each block is an
    // independent GEMM with identical per-element arithmetic.
    if !trans_a && par::enabled() && m * n >= par::MIN_PARALLEL_LEN && m >= 64 {
        let rows = m.div_ceil(rayon_threads() * 4).max(16);
        par::for_each_chunk(c, rows * n, |ci, cblk| {
            let r0 = ci * rows;
            let mr = cblk.len() / n;
            let ablk = &a[r0 * k..(r0 + mr) * k];
            // SAFETY: buffer lengths were checked above, strides match row-major layout.
            unsafe {
                T::gemm_raw(
                    mr,
                    k,
                    n,
                    T::one(),
                    ablk.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    cblk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }

    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    // SAFETY: buffer lengths were checked above, strides match the stated layout.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(feature = "parallel")]
fn rayon_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn rayon_threads() -> usize {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        let (m, n, k) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, &a, &b, false, &mut c);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = [100.0f64];
        gemm(false, false, 1, 1, 2, &a, &b, true, &mut c);
        assert_eq!(c, [111.0]);
    }
}
