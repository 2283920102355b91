use std::fmt;

/// Floating-point scalar the numeric stack is generic over.
///
/// Training and evaluation run on `f32`; gradient checking instantiates the
/// same code with `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + num_traits::NumCast + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 conversion")
    }

    fn from_usize(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("usize conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("f64 widening")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
