use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a network: `f32` for training, `f64`
/// for gradient checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` on strided views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must lie
    /// inside the backing buffers; [`gemm`] checks this before calling.
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
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, R> {
    pub data: &'a [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R> View<'a, R> {
    pub fn row_major(data: &'a [R], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [R], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows: cols, cols: rows, rs: 1, cs: cols }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Strided mutable matrix view.
pub struct ViewMut<'a, R> {
    pub data: &'a mut [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R> ViewMut<'a, R> {
    pub fn row_major(data: &'a mut [R], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }
}

/// Checked matrix product `c = alpha·a·b + beta·c`.
pub fn gemm<R: Real>(alpha: R, a: View<'_, R>, b: View<'_, R>, beta: R, c: ViewMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols > 0 {
        assert!(a.last_index() < a.data.len(), "lhs view out of bounds");
        assert!(b.last_index() < b.data.len(), "rhs view out of bounds");
    }
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len(), "output view out of bounds");
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        R::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [10.0f64; 4];
        gemm(
            1.0,
            View::row_major(&a, 2, 3),
            View::row_major(&b, 3, 2),
            1.0,
            ViewMut::row_major(&mut c, 2, 2),
        );
        assert_eq!(c, [14.0, 15.0, 20.0, 21.0]);
        let mut d = [0.0f32; 9];
        let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
        // aᵀ·a
        gemm(
            1.0,
            View::transposed(&a32, 2, 3),
            View::row_major(&a32, 2, 3),
            0.0,
            ViewMut::row_major(&mut d, 3, 3),
        );
        assert_eq!(d[0], 17.0);
        assert_eq!(d[8], 45.0);
    }
}
