//! Strided matrix product on top of `matrixmultiply`.
//!
//! All call sites describe operands with explicit row/column strides so that
//! transposed views and per-head column blocks never need to be copied.

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows × cols` matrix starting at `offset` with row stride `ld`.
    pub fn rm(data: &'a [f64], offset: usize, ld: usize) -> Self {
        Self {
            data,
            offset,
            rs: ld,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with row stride `ld`.
    pub fn tr(data: &'a [f64], offset: usize, ld: usize) -> Self {
        Self {
            data,
            offset,
            rs: 1,
            cs: ld,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha · A·B + beta · C` with `A: m×k`, `B: k×n`, `C: m×n` (row-major,
/// row stride `ldc`, starting at `c_off`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_off + i * ldc..c_off + i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: A view out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: B view out of bounds");
    assert!(
        c_off + (m - 1) * ldc + n - 1 < c.len(),
        "gemm: C view out of bounds"
    );
    // SAFETY: the asserts above bound every element touched through the
    // given strides, and `c` cannot alias `a`/`b` because it is borrowed
    // mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}
