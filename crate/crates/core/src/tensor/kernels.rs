//! Plain matrix kernels over row-major slices. Loop orders keep the innermost
//! loop contiguous so the compiler can vectorize it.

use super::Float;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul_into(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        crow.fill(0.0);
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_into(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            *cv = dot(arow, brow);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn_acc(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed summation order).
pub(crate) fn dot(a: &[Float], b: &[Float]) -> Float {
    let mut acc = [0.0 as Float; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: Float, x: &[Float], y: &mut [Float]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
