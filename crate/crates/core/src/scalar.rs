//! Floating-point scalar abstraction shared by every numeric module.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Strided read-only matrix view used by [`Scalar::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, S> MatRef<'a, S> {
    /// Row-major `rows × cols` view.
    pub fn row_major(data: &'a [S], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a row-major `cols × rows` buffer.
    pub fn transposed(data: &'a [S], rows: usize) -> Self {
        Self { data, row_stride: 1, col_stride: rows }
    }
}

/// Floating point: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = a·b + beta·c` for an `m×k` by `k×n` product written into a row-major `m×n` buffer.
    fn gemm_raw(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }
}

fn check_extent<S>(rows: usize, cols: usize, m: &MatRef<'_, S>) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * m.row_stride + (cols - 1) * m.col_stride;
    assert!(last < m.data.len(), "gemm operand out of bounds: index {last} >= len {}", m.data.len());
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(m, k, &a);
                check_extent(k, n, &b);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                // SAFETY: extents of all three operands were bounds-checked above and the
                // output slice is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
