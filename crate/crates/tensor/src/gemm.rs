//! Row-major matrix products used by `matmul` and the convolution kernels.
//!
//! All routines accumulate into `c`. Inner loops are written as lane-independent
//! updates so they vectorize without reassociating float sums.

use crate::scalar::Scalar;

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let block = &mut c[i * n..(i + 4) * n];
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (r0, r1, r2, r3) = (
                &mut r0[j0..j1],
                &mut r1[j0..j1],
                &mut r2[j0..j1],
                &mut r3[j0..j1],
            );
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for ((((x0, x1), x2), x3), &bv) in r0
                    .iter_mut()
                    .zip(r1.iter_mut())
                    .zip(r2.iter_mut())
                    .zip(r3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (x, &bv) in row.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for p in 0..k {
            let brow = &b[p * n + j0..p * n + j1];
            for i in 0..m {
                let av = a[p * m + i];
                if av == T::zero() {
                    continue;
                }
                let row = &mut c[i * n + j0..i * n + j1];
                for (x, &bv) in row.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// Dot product with eight independent partial sums.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
