//! Scalar abstraction over f32/f64 and a bounds-checked strided gemm.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// All pointers must address the full `m x k`, `k x n` and `m x n`
    /// extents implied by the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Hyperbolic tangent; implementations may trade the last ulp for speed.
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    /// Rational minimax approximation, accurate to a few ulp.
    fn tanh_fast(self) -> f32 {
        const CLAMP: f32 = 7.905_311;
        if self.abs() < 4e-4 {
            return self;
        }
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = -2.760_768_5e-16f32;
        p = p * x2 + 2.000_187_9e-13;
        p = p * x2 - 8.604_671_5e-11;
        p = p * x2 + 5.122_297e-8;
        p = p * x2 + 1.485_722_4e-5;
        p = p * x2 + 6.372_619_3e-4;
        p = p * x2 + 4.893_524_6e-3;
        let mut q = 1.198_258_4e-6f32;
        q = q * x2 + 1.185_347e-4;
        q = q * x2 + 2.268_434_6e-3;
        q = q * x2 + 4.893_525e-3;
        x * p / q
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let m = Mat { data, off, rows, cols, rs, cs };
        assert!(m.fits(), "matrix view out of bounds");
        m
    }

    pub fn t(self) -> Self {
        Mat { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let fits = rows == 0 || cols == 0 || off + (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(fits, "matrix view out of bounds");
        MatMut { data, off, rows, cols, rs, cs }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the prior contents of `c`
/// are ignored.
pub fn gemm<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(c.rows, a.rows, "output rows");
    assert_eq!(c.cols, b.cols, "output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // nothing to multiply; only scale c
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[c.off + i * c.rs + j * c.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds checked on construction and the shapes
    // agree, so all addressed elements lie inside the borrowed slices.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Adds the column sums of a dense `rows x cols` matrix into `out`.
pub fn add_col_sums<T: Scalar>(out: &mut [T], m: &[T], rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

/// Adds `bias` to every row of a dense matrix.
pub fn add_bias<T: Scalar>(m: &mut [T], bias: &[T]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}
