//! Colour-space conversions on variables.

use super::smooth::smooth_mod;
use crate::graph::Var;
use crate::tensor::Float;

pub(super) const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

/// D65 reference white.
pub(super) const WHITE: [f64; 3] = [0.950456, 1.0, 1.088754];

pub(super) const RGB_TO_YUV: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.14714119, -0.28886916, 0.43601035],
    [0.61497538, -0.51496512, -0.10001026],
];

const EPS: f64 = 1e-6;

fn map_f64<T: Float>(x: &Var<T>, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var<T> {
    x.unary(
        move |v| T::from_f64_lossy(f(v.as_f64())),
        move |v, _| T::from_f64_lossy(df(v.as_f64())),
    )
}

/// sRGB companding to linear light.
pub(super) fn srgb_decode<T: Float>(x: &Var<T>) -> Var<T> {
    map_f64(
        x,
        |v| if v <= 0.04045 { v / 12.92 } else { ((v + 0.055) / 1.055).powf(2.4) },
        |v| {
            if v <= 0.04045 {
                1.0 / 12.92
            } else {
                2.4 / 1.055 * ((v + 0.055) / 1.055).powf(1.4)
            }
        },
    )
}

/// Linear light back to sRGB; the input must already lie in `[0, 1]`.
pub(super) fn srgb_encode<T: Float>(x: &Var<T>) -> Var<T> {
    map_f64(
        x,
        |v| if v <= 0.0031308 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 },
        |v| {
            if v <= 0.0031308 {
                12.92
            } else {
                1.055 / 2.4 * v.powf(1.0 / 2.4 - 1.0)
            }
        },
    )
}

const DELTA: f64 = 6.0 / 29.0;

pub(super) fn lab_f<T: Float>(x: &Var<T>) -> Var<T> {
    map_f64(
        x,
        |t| {
            if t > DELTA * DELTA * DELTA {
                t.cbrt()
            } else {
                t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
            }
        },
        |t| {
            if t > DELTA * DELTA * DELTA {
                1.0 / (3.0 * t.cbrt() * t.cbrt())
            } else {
                1.0 / (3.0 * DELTA * DELTA)
            }
        },
    )
}

pub(super) fn lab_finv<T: Float>(x: &Var<T>) -> Var<T> {
    map_f64(
        x,
        |s| if s > DELTA { s * s * s } else { 3.0 * DELTA * DELTA * (s - 4.0 / 29.0) },
        |s| if s > DELTA { 3.0 * s * s } else { 3.0 * DELTA * DELTA },
    )
}

/// RGB planes to hue (in `[0, 1)`), saturation and value.
pub(super) fn rgb_to_hsv<T: Float>(r: &Var<T>, g: &Var<T>, b: &Var<T>) -> [Var<T>; 3] {
    let maxv = r.maximum(g).maximum(b);
    let minv = r.minimum(g).minimum(b);
    let chroma = maxv.sub(&minv);
    let denom = chroma.add_scalar(EPS);
    let (rv, gv, bv) = (r.value().data(), g.value().data(), b.value().data());
    let from_r: Vec<bool> = (0..rv.len()).map(|i| rv[i] >= gv[i] && rv[i] >= bv[i]).collect();
    let from_g: Vec<bool> = (0..rv.len()).map(|i| gv[i] >= bv[i]).collect();
    let hr = g.sub(b).div(&denom);
    let hg = b.sub(r).div(&denom).add_scalar(2.0);
    let hb = r.sub(g).div(&denom).add_scalar(4.0);
    let h6 = hr.select(&hg.select(&hb, &from_g), &from_r);
    let hue = smooth_mod(&h6, 6.0).expect("positive divisor").mul_scalar(1.0 / 6.0);
    let sat = chroma.div(&maxv.add_scalar(EPS));
    [hue, sat, maxv]
}

/// Inverse of [`rgb_to_hsv`] via `v - v s clamp(min(k, 4 - k), 0, 1)` with
/// `k = (n + 6h) mod 6`.
pub(super) fn hsv_to_rgb<T: Float>(h: &Var<T>, s: &Var<T>, v: &Var<T>) -> [Var<T>; 3] {
    let vs = v.mul(s);
    let h6 = h.mul_scalar(6.0);
    let chan = |n: f64| {
        let k = smooth_mod(&h6.add_scalar(n), 6.0).expect("positive divisor");
        let t = k.minimum(&k.rsub_scalar(4.0)).clamp(0.0, 1.0);
        v.sub(&vs.mul(&t))
    };
    [chan(5.0), chan(3.0), chan(1.0)]
}

/// Rec. 601 luma of RGB planes.
pub(super) fn luma<T: Float>(r: &Var<T>, g: &Var<T>, b: &Var<T>) -> Var<T> {
    r.mul_scalar(0.299).add(&g.mul_scalar(0.587)).add(&b.mul_scalar(0.114))
}

pub(super) fn split<T: Float>(x: &Var<T>) -> [Var<T>; 3] {
    [x.narrow(0, 0, 1), x.narrow(0, 1, 1), x.narrow(0, 2, 1)]
}

pub(super) fn merge<T: Float>(planes: &[Var<T>; 3]) -> Var<T> {
    Var::concat(planes, 0)
}

