//! Bounds-checked strided matrix views over flat buffers, and the GEMM
//! entry point used by every matrix product in the engine.

use super::Scalar;

/// A strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Row-major block of `rows x cols` starting at `offset` inside a buffer
    /// whose rows are `stride` elements apart.
    pub fn block(offset: usize, rows: usize, cols: usize, stride: usize) -> Self {
        MatView {
            offset,
            rows,
            cols,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> Option<usize> {
        if self.rows == 0 || self.cols == 0 {
            return None;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        debug_assert!(self.rs >= 0 && self.cs >= 0);
        Some(last as usize)
    }

    fn fits(&self, len: usize) -> bool {
        self.max_index().is_none_or(|i| i < len)
    }
}

/// `C = alpha * A * B + beta * C` on strided views.
///
/// Panics if the views disagree in shape or index outside their buffers;
/// both are programming errors inside the engine, not user input errors.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()));
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (cv.offset as isize + i as isize * cv.rs + j as isize * cv.cs) as usize;
                c[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    c[idx] * beta
                };
            }
        }
        return;
    }
    // SAFETY: shapes agree and every view was checked to lie inside its buffer.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}
