//! Dense row-major GEMM kernels on raw slices.
//!
//! Each output row is produced by exactly one thread with a fixed
//! accumulation order, so results do not depend on the thread count.

use crate::par;

const KB: usize = 256;
const NB: usize = 512;
/// Below this many MACs the kernels stay on the calling thread.
const PAR_MIN_MACS: usize = 1 << 18;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn rows_per_task(m: usize) -> usize {
    let t = par::threads().max(1);
    m.div_ceil(t * 4).max(1)
}

/// `c[m x n] = a[m x k] * b[k x n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = 0.0);
    if m == 0 || n == 0 {
        return;
    }
    let rows = rows_per_task(m);
    let min_work = if m * k * n >= PAR_MIN_MACS { 0 } else { usize::MAX };
    par::for_each_chunk_mut(c, rows * n, min_work, |ci, c_chunk| {
        let r0 = ci * rows;
        let nrows = c_chunk.len() / n;
        for jb in (0..n).step_by(NB) {
            let je = (jb + NB).min(n);
            for pb in (0..k).step_by(KB) {
                let pe = (pb + KB).min(k);
                for r in 0..nrows {
                    let i = r0 + r;
                    let a_row = &a[i * k..(i + 1) * k];
                    let c_row = &mut c_chunk[r * n + jb..r * n + je];
                    for p in pb..pe {
                        let av = a_row[p];
                        if av != 0.0 {
                            axpy(c_row, av, &b[p * n + jb..p * n + je]);
                        }
                    }
                }
            }
        }
    });
}

/// `c[m x n] = a[m x k] * b[n x k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose2(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m x n] = a[k x m]^T * b[k x n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = 0.0);
    if m == 0 || n == 0 {
        return;
    }
    let rows = rows_per_task(m);
    let min_work = if m * k * n >= PAR_MIN_MACS { 0 } else { usize::MAX };
    par::for_each_chunk_mut(c, rows * n, min_work, |ci, c_chunk| {
        let r0 = ci * rows;
        let nrows = c_chunk.len() / n;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let a_row = &a[p * m..(p + 1) * m];
            for r in 0..nrows {
                let av = a_row[r0 + r];
                if av != 0.0 {
                    axpy(&mut c_chunk[r * n..(r + 1) * n], av, b_row);
                }
            }
        }
    });
}

/// Transposes a row-major `rows x cols` matrix.
pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const T: usize = 32;
    for ib in (0..rows).step_by(T) {
        for jb in (0..cols).step_by(T) {
            for i in ib..(ib + T).min(rows) {
                for j in jb..(jb + T).min(cols) {
                    out[j * rows + i] = x[i * cols + j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn ramp(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn all_layouts_agree_with_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (17, 300, 9), (70, 600, 530)] {
            let a = ramp(m * k, 1.0);
            let b = ramp(k * n, 2.0);
            let want = naive(&a, &b, m, k, n);
            let mut c = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
            let bt = transpose2(&b, k, n);
            gemm_nt(&a, &bt, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
            let at = transpose2(&a, m, k);
            gemm_tn(&at, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_are_bitwise_equal() {
        let (m, k, n) = (64, 256, 96);
        let a = ramp(m * k, 3.0);
        let b = ramp(k * n, 4.0);
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c1, m, k, n);
        crate::par::sequential(|| gemm_nn(&a, &b, &mut c2, m, k, n));
        assert_eq!(c1, c2);
    }
}
