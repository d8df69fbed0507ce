//! Floating-point abstraction so every numeric path can run in both
//! precisions: `f32` for training throughput, `f64` for oracle and
//! gradient-equivalence tests.

use num_complex::Complex;

/// Real scalar type used throughout the tensor, SSM, and model code.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + std::fmt::Display
    + std::fmt::LowerExp
    + Default
{
    fn of_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }

    /// Exact Gaussian CDF, computed through `erf` at `f64` precision.
    fn norm_cdf(self) -> Self {
        Self::of_f64(crate::scalar::norm_cdf64(self.into_f64()))
    }

    /// Standard normal density.
    fn norm_pdf(self) -> Self {
        let x = self.into_f64();
        Self::of_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Logistic sigmoid, evaluated in a form that does not overflow.
    fn sigmoid(self) -> Self {
        let x = self.into_f64();
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        Self::of_f64(s)
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Gaussian CDF at `f64` precision: Φ(x) = erfc(−x/√2)/2.
pub fn norm_cdf64(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Complex number over the crate scalar.
pub type Cx<T> = Complex<T>;
