//! Dense row-major matrices and the handful of products the denoiser needs.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = a · b` where `b` is `(a.cols × n)` stored row-major in `b`.
pub fn matmul(a: &Mat, b: &[f64], n: usize) -> Mat {
    let mut out = Mat::zeros(a.rows, n);
    gemm(a.rows, a.cols, n, 1.0, &a.data, false, b, false, 0.0, &mut out.data);
    out
}

/// `out = a · bᵀ` where `b` is `(n × a.cols)` row-major.
pub fn matmul_t(a: &Mat, b: &[f64], n: usize) -> Mat {
    let mut out = Mat::zeros(a.rows, n);
    gemm(a.rows, a.cols, n, 1.0, &a.data, false, b, true, 0.0, &mut out.data);
    out
}

/// `acc += aᵀ · b` with `a: (r × m)`, `b: (r × n)`, `acc: (m × n)` row-major.
pub fn accumulate_at_b(a: &Mat, b: &Mat, acc: &mut [f64]) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(acc.len(), a.cols * b.cols);
    if a.rows == 0 {
        return;
    }
    let (m, k, n) = (a.cols, a.rows, b.cols);
    // aᵀ has row stride 1 and column stride a.cols.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            1,
            a.cols as isize,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            1.0,
            acc.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// General `c = alpha · op(a) · op(b) + beta · c` for row-major operands,
/// `op(a)` is `(m × k)` and `op(b)` is `(k × n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
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
