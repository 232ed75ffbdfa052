use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar element type for the tensor engine. Production code runs `f32`;
/// gradient checks run the identical graph in `f64` so finite differences
/// have enough headroom.
pub trait Real:
    Copy
    + Clone
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Rounds half away from zero, matching the quantizer used at coding time.
    fn round_half_away(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;

    /// Standard normal CDF. Both widths evaluate through `f64` `erfc` so the
    /// value is as accurate as the storage type allows.
    fn normal_cdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64(0.5 * libm::erfc(-x / std::f64::consts::SQRT_2))
    }

    /// Standard normal density, the exact derivative of [`Real::normal_cdf`].
    fn normal_pdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// `tanh` through this target's `exp`, which its libm evaluates several
/// times faster than its own `tanh`. `(e^{2|x|}-1) / (e^{2|x|}+1)` is exact
/// to ~2 ulp once `|x|` is large enough that the `-1` cannot cancel; below
/// that, `exp_m1` supplies the difference without cancellation. Beyond the
/// saturation threshold the true value rounds to exactly 1.
#[inline]
fn tanh_f64(x: f64) -> f64 {
    let a = x.abs();
    let t = if a >= 20.0 {
        1.0
    } else if a < 0.25 {
        let e = (2.0 * a).exp_m1();
        e / (e + 2.0)
    } else {
        let e = (2.0 * a).exp();
        (e - 1.0) / (e + 1.0)
    };
    if x.is_sign_negative() {
        -t
    } else {
        t
    }
}

#[inline]
fn tanh_f32(x: f32) -> f32 {
    let a = x.abs();
    let t = if a >= 10.0 {
        1.0
    } else if a < 0.25 {
        let e = (2.0 * a).exp_m1();
        e / (e + 2.0)
    } else {
        let e = (2.0 * a).exp();
        (e - 1.0) / (e + 1.0)
    };
    if x.is_sign_negative() {
        -t
    } else {
        t
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn abs(self) -> Self {
        self.abs()
    }
    #[inline]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline]
    fn exp(self) -> Self {
        self.exp()
    }
    #[inline]
    fn ln(self) -> Self {
        self.ln()
    }
    #[inline]
    fn tanh(self) -> Self {
        tanh_f32(self)
    }
    #[inline]
    fn round_half_away(self) -> Self {
        self.round()
    }
    #[inline]
    fn maxv(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline]
    fn minv(self, other: Self) -> Self {
        self.min(other)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn abs(self) -> Self {
        self.abs()
    }
    #[inline]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline]
    fn exp(self) -> Self {
        self.exp()
    }
    #[inline]
    fn ln(self) -> Self {
        self.ln()
    }
    #[inline]
    fn tanh(self) -> Self {
        tanh_f64(self)
    }
    #[inline]
    fn round_half_away(self) -> Self {
        self.round()
    }
    #[inline]
    fn maxv(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline]
    fn minv(self, other: Self) -> Self {
        self.min(other)
    }
}
