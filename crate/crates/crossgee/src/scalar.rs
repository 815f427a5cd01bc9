//! Scalar abstraction used by the whole crate.
//!
//! All numerical routines are generic over a floating scalar so the same
//! code runs in `f64` (the default, see the aliases at the crate root) and
//! `f32`. The trait is a thin bundle of [`nalgebra::RealField`] with the
//! `num-traits` conversion traits; it adds only conversion helpers.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating scalar: everything the estimating-equation machinery needs.
pub trait Scalar:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Convert an `f64` constant into this scalar type.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// Lossy view as `f64` (exact for `f64`, rounded for `f32`).
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
}

/// Max-absolute-value norm of a vector; zero for an empty vector.
pub(crate) fn linf<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Symmetrize a square matrix in place: `m <- (m + m^T) / 2`.
pub(crate) fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = T::c(0.5);
    let nr = m.nrows();
    for i in 0..nr {
        for j in (i + 1)..nr {
            let avg = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
