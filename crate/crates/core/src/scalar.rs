use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar the numeric core is generic over: f32 or f64.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn erf(self) -> Self;
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}
