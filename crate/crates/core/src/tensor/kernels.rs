//! Row-major matrix products on top of nalgebra's column-major gemm.
//!
//! A row-major `r x c` buffer is the column-major `c x r` transpose, so every
//! product below is rewritten in terms of transposed views.

use nalgebra::DMatrixView;

/// Below this many multiply-adds gemm's packing costs more than it saves.
const SMALL: usize = 1 << 16;

/// `A[m x k] * B[k x n]`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    if m * k * n <= SMALL {
        let mut c = vec![0.0; m * n];
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2
            unsafe { small_matmul_avx2(a, k, b, n, &mut c) };
            return c;
        }
        small_matmul(a, k, b, n, &mut c);
        return c;
    }
    let at = DMatrixView::from_slice(a, k, m);
    let bt = DMatrixView::from_slice(b, n, k);
    (bt * at).data.into()
}

/// `c += A * B` with plain loops; no fused multiply-add, so every
/// instruction set rounds the same way.
#[inline(always)]
fn small_matmul(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &y) in c_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_matmul_avx2(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    small_matmul(a, k, b, n, c)
}

/// `A^T * B` for `A[m x k]`, `B[m x n]`, giving `k x n`.
pub(crate) fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let at = DMatrixView::from_slice(a, k, m);
    let bt = DMatrixView::from_slice(b, n, m);
    (bt * at.transpose()).data.into()
}

/// `A * B^T` for `A[m x n]`, `B[k x n]`, giving `m x k`.
pub(crate) fn matmul_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let at = DMatrixView::from_slice(a, n, m);
    let bt = DMatrixView::from_slice(b, n, k);
    bt.tr_mul(&at).data.into()
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn products_match_naive_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = naive(&a, m, k, &b, n);
        assert!(matmul(&a, m, k, &b, n).iter().zip(&c).all(|(x, y)| (x - y).abs() < 1e-14));

        let at = transpose(&a, m, k);
        let tn = matmul_tn(&at, k, m, &b, n);
        assert!(tn.iter().zip(&c).all(|(x, y)| (x - y).abs() < 1e-14));

        let bt = transpose(&b, k, n);
        let nt = matmul_nt(&a, m, k, &bt, n);
        assert!(nt.iter().zip(&c).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn large_products_take_the_gemm_path() {
        let (m, k, n) = (70, 40, 30);
        assert!(m * k * n > SMALL);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = naive(&a, m, k, &b, n);
        assert!(matmul(&a, m, k, &b, n).iter().zip(&c).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
