//! Closed interval arithmetic over floating-point scalars.
//!
//! Every operation returns an interval containing the exact image of its
//! operands, evaluated in round-to-nearest. No directed rounding is applied;
//! callers that need an outward margin (e.g. soundness tests) add an explicit
//! epsilon instead. Endpoints are always finite and ordered.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::float::FloatConst;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{GeoCertError, Result};

/// Floating-point scalar the whole crate is generic over.
///
/// `f64` is the default throughout; `f32` matches common GPU training
/// precision and roughly halves memory and time.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts a literal or config value, which must be representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Widening (or for f64, exact) view as f64, for reports and diagnostics.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Closed interval `[lo, hi]` with `lo <= hi`, both finite.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    /// New interval; panics if the endpoints are inverted or non-finite.
    #[inline]
    pub fn new(lo: T, hi: T) -> Self {
        assert!(lo <= hi && lo.is_finite() && hi.is_finite(), "invalid interval endpoints");
        Self { lo, hi }
    }

    /// Checked construction for data arriving from outside the crate.
    pub fn checked(lo: T, hi: T) -> Result<Self> {
        if lo <= hi && lo.is_finite() && hi.is_finite() {
            Ok(Self { lo, hi })
        } else {
            Err(GeoCertError::InvalidInterval { lo: lo.as_f64(), hi: hi.as_f64() })
        }
    }

    /// Degenerate interval `[x, x]`.
    #[inline]
    pub fn point(x: T) -> Self {
        Self::new(x, x)
    }

    /// Interval `[mid - rad, mid + rad]`, `rad >= 0`.
    #[inline]
    pub fn with_radius(mid: T, rad: T) -> Self {
        assert!(rad >= T::zero(), "negative radius");
        Self::new(mid - rad, mid + rad)
    }

    #[inline]
    pub fn width(self) -> T {
        self.hi - self.lo
    }

    #[inline]
    pub fn radius(self) -> T {
        self.width() / T::lit(2.0)
    }

    #[inline]
    pub fn mid(self) -> T {
        (self.lo + self.hi) / T::lit(2.0)
    }

    #[inline]
    pub fn contains(self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }

    #[inline]
    pub fn contains_interval(self, other: Self) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    #[inline]
    pub fn contains_zero(self) -> bool {
        self.contains(T::zero())
    }

    /// Smallest interval covering both operands.
    #[inline]
    pub fn hull(self, other: Self) -> Self {
        Self { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    /// Image under `|.|`.
    #[inline]
    pub fn abs(self) -> Self {
        if self.lo >= T::zero() {
            self
        } else if self.hi <= T::zero() {
            -self
        } else {
            Self { lo: T::zero(), hi: self.hi.max(-self.lo) }
        }
    }

    /// Image under `max(0, .)`.
    #[inline]
    pub fn relu(self) -> Self {
        Self { lo: self.lo.max(T::zero()), hi: self.hi.max(T::zero()) }
    }

    /// Image under clamping to the pixel domain `[0, 1]`.
    #[inline]
    pub fn clamp01(self) -> Self {
        let one = T::one();
        let zero = T::zero();
        Self { lo: self.lo.max(zero).min(one), hi: self.hi.max(zero).min(one) }
    }

    /// Reciprocal; panics if the interval contains zero.
    #[inline]
    pub fn recip(self) -> Self {
        assert!(!self.contains_zero(), "reciprocal of interval containing zero");
        Self { lo: self.hi.recip(), hi: self.lo.recip() }
    }

    /// Exact range of `sin` over the interval.
    ///
    /// Endpoint values plus the interior critical points `pi/2 + k*pi`;
    /// widths of a full period or more saturate to `[-1, 1]`.
    pub fn sin(self) -> Self {
        self.trig_range(T::sin, T::FRAC_PI_2())
    }

    /// Exact range of `cos` over the interval (critical points `k*pi`).
    pub fn cos(self) -> Self {
        self.trig_range(T::cos, T::zero())
    }

    /// Range of sin-like `f` whose extrema sit at `offset + k*pi` and
    /// alternate between +1 (k even) and -1 (k odd).
    fn trig_range(self, f: impl Fn(T) -> T, offset: T) -> Self {
        let one = T::one();
        let pi = T::PI();
        if self.width() >= pi + pi {
            return Self { lo: -one, hi: one };
        }
        let (mut lo, mut hi) = {
            let (a, b) = (f(self.lo), f(self.hi));
            (a.min(b), a.max(b))
        };
        let k_min = ((self.lo - offset) / pi).ceil();
        let k_max = ((self.hi - offset) / pi).floor();
        let mut k = k_min;
        while k <= k_max {
            // Even multiples carry the maximum, odd ones the minimum.
            if (k / T::lit(2.0)).fract() == T::zero() {
                hi = one;
            } else {
                lo = -one;
            }
            k = k + one;
        }
        Self { lo, hi }
    }
}

impl<T: Scalar> Neg for Interval<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { lo: -self.hi, hi: -self.lo }
    }
}

impl<T: Scalar> Add for Interval<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self { lo: self.lo + rhs.lo, hi: self.hi + rhs.hi }
    }
}

impl<T: Scalar> Sub for Interval<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self { lo: self.lo - rhs.hi, hi: self.hi - rhs.lo }
    }
}

impl<T: Scalar> Mul for Interval<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let p1 = self.lo * rhs.lo;
        let p2 = self.lo * rhs.hi;
        let p3 = self.hi * rhs.lo;
        let p4 = self.hi * rhs.hi;
        Self { lo: p1.min(p2).min(p3).min(p4), hi: p1.max(p2).max(p3).max(p4) }
    }
}

impl<T: Scalar> Div for Interval<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<T: Scalar> Add<T> for Interval<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: T) -> Self {
        Self { lo: self.lo + rhs, hi: self.hi + rhs }
    }
}

impl<T: Scalar> Sub<T> for Interval<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: T) -> Self {
        Self { lo: self.lo - rhs, hi: self.hi - rhs }
    }
}

impl<T: Scalar> Mul<T> for Interval<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: T) -> Self {
        if rhs >= T::zero() {
            Self { lo: self.lo * rhs, hi: self.hi * rhs }
        } else {
            Self { lo: self.hi * rhs, hi: self.lo * rhs }
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Interval<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}, {:?}]", self.lo, self.hi)
    }
}
