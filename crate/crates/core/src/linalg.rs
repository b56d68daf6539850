//! Row-major matrices and the handful of products training needs.
//!
//! The dense kernels are delegated to `matrixmultiply::dgemm` (the cache-
//! blocked kernel behind ndarray) and parallelized over row blocks with
//! rayon. Every output element is a fixed-order reduction over `k`, so
//! results are bit-identical regardless of thread count — training under a
//! fixed seed reproduces parameters exactly.

use rayon::prelude::*;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Rows-per-task when fanning a product out over the thread pool. Large
/// enough that each task amortizes dgemm's packing cost.
const ROW_BLOCK: usize = 512;

fn par_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    // C is row-major m×n, overwritten (beta = 0).
    let blocks: Vec<(usize, usize)> = (0..m)
        .step_by(ROW_BLOCK)
        .map(|r0| (r0, (r0 + ROW_BLOCK).min(m)))
        .collect();
    if blocks.len() <= 1 {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    let a_ptr = SharedPtr(a.as_ptr());
    let b_ptr = SharedPtr(b.as_ptr());
    c.par_chunks_mut(ROW_BLOCK * n)
        .zip(blocks.into_par_iter())
        .for_each(|(c_chunk, (r0, r1))| {
            let mb = r1 - r0;
            unsafe {
                matrixmultiply::dgemm(
                    mb,
                    k,
                    n,
                    1.0,
                    a_ptr.get().offset(r0 as isize * rsa),
                    rsa,
                    csa,
                    b_ptr.get(),
                    rsb,
                    csb,
                    0.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

// Raw const pointers are not Send; the row blocks read disjoint ranges of A
// and all of B immutably, so sharing across the pool is sound.
#[derive(Clone, Copy)]
struct SharedPtr(*const f64);
unsafe impl Send for SharedPtr {}
unsafe impl Sync for SharedPtr {}

impl SharedPtr {
    fn get(&self) -> *const f64 {
        self.0
    }
}

/// C = A · Bᵀ  (A: m×k, B: n×k) → m×n. This is the forward-pass shape:
/// activations × weight-rows.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "inner dimensions");
    let mut c = Matrix::zeros(a.rows, b.rows);
    par_gemm(
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (1, b.cols as isize),
        &mut c.data,
    );
    c
}

/// C = A · B  (A: m×k, B: k×n) → m×n. Used for dX = dY · W.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let mut c = Matrix::zeros(a.rows, b.cols);
    par_gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
        &mut c.data,
    );
    c
}

/// C = Aᵀ · B  (A: k×m, B: k×n) → m×n. Used for dW = dYᵀ · X.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "inner dimensions");
    let mut c = Matrix::zeros(a.cols, b.cols);
    par_gemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        (1, a.cols as isize),
        &b.data,
        (b.cols as isize, 1),
        &mut c.data,
    );
    c
}

/// Column sums of A → length-`cols` vector. Used for bias gradients.
pub fn col_sums(a: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for r in 0..a.rows {
        let row = a.row(r);
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_nt(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            for j in 0..b.rows {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(j, k);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, rng.gaussian_vec(rows * cols))
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 37, 19);
        let b = random_matrix(&mut rng, 23, 19);
        let c = matmul_nt(&a, &b);
        let c_ref = naive_nt(&a, &b);
        for (x, y) in c.data.iter().zip(&c_ref.data) {
            assert!((x - y).abs() < 1e-12);
        }

        // nn against nt with explicit transpose
        let bt = {
            let mut t = Matrix::zeros(19, 23);
            for i in 0..23 {
                for j in 0..19 {
                    t.set(j, i, b.get(i, j));
                }
            }
            t
        };
        let c2 = matmul_nn(&a, &bt);
        for (x, y) in c2.data.iter().zip(&c_ref.data) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: Aᵀ·B where A is k×m
        let at = {
            let mut t = Matrix::zeros(19, 37);
            for i in 0..37 {
                for j in 0..19 {
                    t.set(j, i, a.get(i, j));
                }
            }
            t
        };
        let c3 = matmul_tn(&at, &bt);
        for (x, y) in c3.data.iter().zip(&c_ref.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_blocks_bit_identical() {
        let mut rng = Rng::new(8);
        // Tall enough to split into several row blocks.
        let a = random_matrix(&mut rng, 4 * ROW_BLOCK + 13, 24);
        let b = random_matrix(&mut rng, 16, 24);
        let c1 = matmul_nt(&a, &b);
        let c2 = matmul_nt(&a, &b);
        assert_eq!(c1.data, c2.data);
    }

    #[test]
    fn col_sums_match() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(col_sums(&a), vec![5.0, 7.0, 9.0]);
    }
}
