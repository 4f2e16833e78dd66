//! Differentiable rounding and modulo.
//!
//! `smooth_round(x) = round(x) + (x - round(x))^3` with ties to even.
//! The modulo keeps its case split on `x > round(x)` and substitutes the
//! smooth rounding in both branches.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{lit, Float};

fn round_even<T: Float>(v: T) -> T {
    T::from_f64_lossy(v.as_f64().round_ties_even())
}

pub fn smooth_round_scalar(x: f64) -> f64 {
    let r = x.round_ties_even();
    r + (x - r).powi(3)
}

fn unit_smooth_mod(q: f64) -> f64 {
    let r = q - round_even(q);
    let base = r - r.powi(3);
    if r > 0.0 {
        base
    } else {
        base + 1.0
    }
}

pub fn smooth_mod_scalar(x: f64, divisor: f64) -> Result<f64> {
    if !(divisor > 0.0) {
        return Err(Error::Parameter(format!("modulo divisor must be positive, got {divisor}")));
    }
    Ok(divisor * unit_smooth_mod(x / divisor))
}

/// Elementwise smooth rounding; the derivative is `3 (x - round(x))^2`.
pub fn smooth_round<T: Float>(x: &Var<T>) -> Var<T> {
    x.unary(
        |v| {
            let r = round_even(v);
            r + (v - r).powi(3)
        },
        |v, _| {
            let d = v - round_even(v);
            lit::<T>(3.0) * d * d
        },
    )
}

/// Elementwise smooth modulo by `divisor`.
pub fn smooth_mod<T: Float>(x: &Var<T>, divisor: f64) -> Result<Var<T>> {
    if !(divisor > 0.0) {
        return Err(Error::Parameter(format!("modulo divisor must be positive, got {divisor}")));
    }
    let d = lit::<T>(divisor);
    Ok(x.unary(
        move |v| {
            let q = v / d;
            let r = q - round_even(q);
            let base = r - r.powi(3);
            d * if r > T::zero() { base } else { base + T::one() }
        },
        move |v, _| {
            let q = v / d;
            let r = q - round_even(q);
            T::one() - lit::<T>(3.0) * r * r
        },
    ))
}
