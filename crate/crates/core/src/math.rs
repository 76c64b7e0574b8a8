//! Scalar math shims.
//!
//! Under `std` these forward to the inherent float methods; without `std`
//! they fall back to `libm` so the crate stays `no_std`-compatible. All
//! call sites in the crate go through this module so the two builds share
//! one code path.

use crate::tensor::Real;

#[cfg(feature = "std")]
mod imp {
    use super::Real;

    #[inline(always)]
    pub fn exp(x: Real) -> Real {
        x.exp()
    }
    #[inline(always)]
    pub fn ln(x: Real) -> Real {
        x.ln()
    }
    #[inline(always)]
    pub fn sqrt(x: Real) -> Real {
        x.sqrt()
    }
    #[inline(always)]
    pub fn sin(x: Real) -> Real {
        x.sin()
    }
    #[inline(always)]
    pub fn cos(x: Real) -> Real {
        x.cos()
    }
    #[inline(always)]
    pub fn abs(x: Real) -> Real {
        x.abs()
    }
    #[inline(always)]
    pub fn floor(x: Real) -> Real {
        x.floor()
    }
    #[inline(always)]
    pub fn round(x: Real) -> Real {
        x.round()
    }
}

#[cfg(all(not(feature = "std"), not(feature = "single-precision")))]
mod imp {
    pub use libm::{cos, exp, floor, round, sin, sqrt};

    #[inline(always)]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline(always)]
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}

#[cfg(all(not(feature = "std"), feature = "single-precision"))]
mod imp {
    #[inline(always)]
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }
    #[inline(always)]
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }
    #[inline(always)]
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    #[inline(always)]
    pub fn sin(x: f32) -> f32 {
        libm::sinf(x)
    }
    #[inline(always)]
    pub fn cos(x: f32) -> f32 {
        libm::cosf(x)
    }
    #[inline(always)]
    pub fn abs(x: f32) -> f32 {
        libm::fabsf(x)
    }
    #[inline(always)]
    pub fn floor(x: f32) -> f32 {
        libm::floorf(x)
    }
    #[inline(always)]
    pub fn round(x: f32) -> f32 {
        libm::roundf(x)
    }
}

pub use imp::{abs, cos, exp, floor, ln, round, sin, sqrt};

/// Integer power by binary exponentiation.
pub fn powi(x: Real, n: i32) -> Real {
    if n < 0 {
        return 1.0 / powi(x, -n);
    }
    let mut base = x;
    let mut e = n as u32;
    let mut acc = 1.0;
    while e > 0 {
        if e & 1 == 1 {
            acc *= base;
        }
        base *= base;
        e >>= 1;
    }
    acc
}

/// Larger of two reals (prefers `a` when equal; NaN-free inputs assumed).
#[inline(always)]
pub fn maxr(a: Real, b: Real) -> Real {
    if b > a {
        b
    } else {
        a
    }
}

/// Smaller of two reals (prefers `a` when equal; NaN-free inputs assumed).
#[inline(always)]
pub fn minr(a: Real, b: Real) -> Real {
    if b < a {
        b
    } else {
        a
    }
}

/// Clamp `x` into `[lo, hi]`.
#[inline(always)]
pub fn clamp(x: Real, lo: Real, hi: Real) -> Real {
    minr(maxr(x, lo), hi)
}

/// Logistic sigmoid, written in the overflow-safe two-branch form.
///
/// Saturates to exactly `0.0` / `1.0` for very large magnitudes, which the
/// uncertainty entropy relies on (`0 * ln 0 := 0`).
#[inline(always)]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        let e = exp(-x);
        1.0 / (1.0 + e)
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Natural-log entropy of a Bernoulli probability, with `0 ln 0 := 0`.
///
/// Always lands in `[0, ln 2]` for `p ∈ [0, 1]`.
#[inline]
pub fn bernoulli_entropy(p: Real) -> Real {
    let mut u = 0.0;
    if p > 0.0 {
        u -= p * ln(p);
    }
    let q = 1.0 - p;
    if q > 0.0 {
        u -= q * ln(q);
    }
    maxr(u, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_saturates_exactly() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_bounds_and_corners() {
        assert_eq!(bernoulli_entropy(0.0), 0.0);
        assert_eq!(bernoulli_entropy(1.0), 0.0);
        let mid = bernoulli_entropy(0.5);
        assert!((mid - (2.0 as Real).ln()).abs() < 1e-12);
        for i in 0..=100 {
            let p = i as Real / 100.0;
            let u = bernoulli_entropy(p);
            assert!(u >= 0.0 && u <= (2.0 as Real).ln() + 1e-15);
        }
    }
}
