//! Scalar abstraction so the whole library works over `f32` or `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar type the library is generic over.
///
/// Everything needed is provided by `f32` and `f64`; the blanket impl picks
/// those up automatically.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + std::iter::Sum<Self> + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant (e.g. a tolerance or a default
    /// parameter value).
    fn from_f64_c(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant converts to any real scalar")
    }

    /// Conversion from a count (vector length, sample size).
    fn from_count(value: usize) -> Self {
        Self::from_usize(value).expect("count fits in the scalar type")
    }
}

impl<T> Scalar for T where
    T: RealField + Copy + FromPrimitive + ToPrimitive + std::iter::Sum<T> + Send + Sync + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_and_f64_are_scalars() {
        fn takes_scalar<T: Scalar>() -> T {
            T::from_f64_c(1.5)
        }
        assert_eq!(takes_scalar::<f64>(), 1.5);
        assert_eq!(takes_scalar::<f32>(), 1.5f32);
    }

    #[test]
    fn count_conversion() {
        assert_eq!(f64::from_count(12), 12.0);
    }
}
