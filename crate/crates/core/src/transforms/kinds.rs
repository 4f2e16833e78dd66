//! Differentiable transform implementations.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::color::{self, RGB_TO_XYZ, RGB_TO_YUV, WHITE};
use super::filters::{filter_map, gather_map, inverse3, mat_vec, pixel_affine, resample_map};
use super::smooth::smooth_round;
use super::{fft, jpeg, TransformKind};
use crate::graph::{SparseMap, Var};
use crate::rng::{self, Rng};
use crate::tensor::{Float, Tensor};

fn dims<T: Float>(x: &Var<T>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

fn linear<T: Float>(x: &Var<T>, map: SparseMap) -> Var<T> {
    x.sparse(&Rc::new(map))
}

fn noise<T: Float>(shape: &[usize], rng: &mut Rng, f: impl Fn(&mut Rng) -> f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| f(rng)).collect();
    Tensor::from_f64(shape, &data)
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform_sym(rng: &mut Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.gen_range(-a..=a)
    } else {
        0.0
    }
}

pub(super) fn apply<T: Float>(kind: TransformKind, x: &Var<T>, alpha: f64, seed: u64) -> Var<T> {
    use TransformKind::*;
    let mut rng = rng::stream(seed, &[]);
    let rng = &mut rng;
    let (c, h, w) = dims(x);
    let out = match kind {
        Identity => return x.clone(),
        Erase => {
            let bh = (alpha * h as f64 * rng.gen_range(0.5..=1.0)).round() as usize;
            let bw = (alpha * w as f64 * rng.gen_range(0.5..=1.0)).round() as usize;
            let y0 = rng.gen_range(0..=h - bh.min(h));
            let x0 = rng.gen_range(0..=w - bw.min(w));
            let mask = Tensor::from_fn(&[c, h, w], |i| {
                let (y, xx) = ((i / w) % h, i % w);
                let inside = y >= y0 && y < y0 + bh && xx >= x0 && xx < x0 + bw;
                if inside {
                    T::zero()
                } else {
                    T::one()
                }
            });
            x.mul_const(&mask)
        }
        GaussianNoise => x.add_const(&noise(x.shape(), rng, |r| alpha * gaussian(r))),
        UniformNoise => x.add_const(&noise(x.shape(), rng, |r| uniform_sym(r, alpha))),
        SpeckleNoise => x.mul_const(&noise(x.shape(), rng, |r| 1.0 + alpha * gaussian(r))),
        PoissonNoise => {
            // Gaussian stand-in for shot noise: variance proportional to intensity.
            let z = noise(x.shape(), rng, |r| alpha * gaussian(r));
            x.add(&x.add_scalar(1e-3).sqrt().mul_const(&z))
        }
        Pepper => x.mul_const(&noise(x.shape(), rng, |r| if r.gen_bool(alpha) { 0.0 } else { 1.0 })),
        Salt => {
            let keep: Tensor<T> = noise(x.shape(), rng, |r| if r.gen_bool(alpha) { 0.0 } else { 1.0 });
            let lift = keep.map(|k| T::one() - k);
            x.mul_const(&keep).add_const(&lift)
        }
        BoxBlur => {
            let r = alpha.round() as usize;
            let k = 2 * r + 1;
            let kern = vec![1.0 / (k * k) as f64; k * k];
            linear(x, filter_map(c, h, w, &kern, k, k))
        }
        GaussianBlur => {
            if alpha < 0.05 {
                x.clone()
            } else {
                let r = (2.0 * alpha).ceil().max(1.0) as usize;
                let k = 2 * r + 1;
                let g: Vec<f64> = (0..k)
                    .map(|i| {
                        let d = i as f64 - r as f64;
                        (-d * d / (2.0 * alpha * alpha)).exp()
                    })
                    .collect();
                let mut kern: Vec<f64> = (0..k * k).map(|i| g[i / k] * g[i % k]).collect();
                let s: f64 = kern.iter().sum();
                kern.iter_mut().for_each(|v| *v /= s);
                linear(x, filter_map(c, h, w, &kern, k, k))
            }
        }
        MedianBlur => median(x, alpha.round() as usize),
        MotionBlur => {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let (kern, k) = motion_kernel(alpha, theta);
            linear(x, filter_map(c, h, w, &kern, k, k))
        }
        Hsv => {
            let [r, g, b] = color::split(x);
            let [hu, s, v] = color::rgb_to_hsv(&r, &g, &b);
            let hu = super::smooth::smooth_mod(&hu.add_scalar(uniform_sym(rng, alpha)), 1.0).expect("positive");
            let s = s.add_scalar(uniform_sym(rng, alpha)).clamp(0.0, 1.0);
            let v = v.add_scalar(uniform_sym(rng, alpha)).clamp(0.0, 1.0);
            color::merge(&color::hsv_to_rgb(&hu, &s, &v))
        }
        Lab => lab(x, [0, 1, 2].map(|_| 100.0 * uniform_sym(rng, alpha))),
        Xyz => {
            let o = [0, 1, 2].map(|_| uniform_sym(rng, alpha));
            let inv = inverse3(RGB_TO_XYZ);
            let lin = color::srgb_decode(x);
            let shifted = linear(&lin, pixel_affine(h, w, identity3(), mat_vec(&inv, o)));
            color::srgb_encode(&shifted.clamp(0.0, 1.0))
        }
        Yuv => {
            let o = [0, 1, 2].map(|_| uniform_sym(rng, alpha));
            let shift = mat_vec(&inverse3(RGB_TO_YUV), o);
            linear(x, pixel_affine(h, w, identity3(), shift))
        }
        GrayMix => {
            let wts = simplex3(rng);
            linear(x, pixel_affine(h, w, [wts; 3], [0.0; 3]))
        }
        GrayPartialMix => {
            let wts = simplex3(rng);
            let mut m = [[0.0; 3]; 3];
            for (ch, row) in m.iter_mut().enumerate() {
                let t: f64 = rng.gen();
                for (k, v) in row.iter_mut().enumerate() {
                    *v = t * wts[k] + if k == ch { 1.0 - t } else { 0.0 };
                }
            }
            linear(x, pixel_affine(h, w, m, [0.0; 3]))
        }
        TwoChannelGray => {
            let (a, b, _) = pick_pair(rng);
            let t: f64 = rng.gen();
            let mut row = [0.0; 3];
            row[a] = t;
            row[b] = 1.0 - t;
            linear(x, pixel_affine(h, w, [row; 3], [0.0; 3]))
        }
        OneChannelPartialGray => {
            let (a, b, rest) = pick_pair(rng);
            let t: f64 = rng.gen();
            let m_mix: f64 = rng.gen();
            let mut gray = [0.0; 3];
            gray[a] = t;
            gray[b] = 1.0 - t;
            let mut m = [gray; 3];
            for (k, v) in m[rest].iter_mut().enumerate() {
                *v = m_mix * gray[k] + if k == rest { 1.0 - m_mix } else { 0.0 };
            }
            linear(x, pixel_affine(h, w, m, [0.0; 3]))
        }
        Laplacian => {
            let kern = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
            linear(x, filter_map(c, h, w, &kern, 3, 3)).abs()
        }
        Sobel => {
            let kx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0].map(|v| v / 4.0);
            let ky = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0].map(|v| v / 4.0);
            let gx = linear(x, filter_map(c, h, w, &kx, 3, 3));
            let gy = linear(x, filter_map(c, h, w, &ky, 3, 3));
            gx.square().add(&gy.square()).add_scalar(1e-8).sqrt()
        }
        Jpeg => jpeg::jpeg(x, alpha),
        ColorPrecision => {
            let steps = alpha - 1.0;
            smooth_round(&x.mul_scalar(steps)).mul_scalar(1.0 / steps)
        }
        FftPerturbation => fft::fft_perturb(x, fft::drop_mask(h, w, alpha, rng)),
        Affine => {
            let rel = alpha / 45.0;
            let theta = uniform_sym(rng, alpha).to_radians();
            let scale = 1.0 + uniform_sym(rng, 0.2 * rel);
            let ty = uniform_sym(rng, 0.15 * rel) * h as f64;
            let tx = uniform_sym(rng, 0.15 * rel) * w as f64;
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (sin, cos) = theta.sin_cos();
            linear(
                x,
                resample_map(c, h, w, |i, j| {
                    let (py, px) = (i - cy - ty, j - cx - tx);
                    let sy = (cos * py - sin * px) / scale + cy;
                    let sx = (sin * py + cos * px) / scale + cx;
                    (sy, sx)
                }),
            )
        }
        Crop => {
            let (ch_, cw_) = (alpha * h as f64, alpha * w as f64);
            let oy = rng.gen_range(0.0..=h as f64 - ch_);
            let ox = rng.gen_range(0.0..=w as f64 - cw_);
            let (fy, fx) = (ch_ / h as f64, cw_ / w as f64);
            linear(
                x,
                resample_map(c, h, w, |i, j| {
                    let sy = (oy + (i + 0.5) * fy - 0.5).clamp(0.0, h as f64 - 1.0);
                    let sx = (ox + (j + 0.5) * fx - 0.5).clamp(0.0, w as f64 - 1.0);
                    (sy, sx)
                }),
            )
        }
        HFlip => linear(x, resample_map(c, h, w, |i, j| (i, w as f64 - 1.0 - j))),
        VFlip => linear(x, resample_map(c, h, w, |i, j| (h as f64 - 1.0 - i, j))),
        Swirl => {
            let cy = (h as f64 - 1.0) / 2.0 + uniform_sym(rng, 0.1) * h as f64;
            let cx = (w as f64 - 1.0) / 2.0 + uniform_sym(rng, 0.1) * w as f64;
            let radius = rng.gen_range(0.5..=1.0) * h.max(w) as f64;
            let rr = 2f64.ln() * radius / 5.0;
            let turn = if rng.gen_bool(0.5) { alpha } else { -alpha };
            linear(
                x,
                resample_map(c, h, w, |i, j| {
                    let (dy, dx) = (i - cy, j - cx);
                    let rho = (dy * dy + dx * dx).sqrt();
                    let ang = dy.atan2(dx) + turn * (-rho / rr).exp();
                    (cy + rho * ang.sin(), cx + rho * ang.cos())
                }),
            )
        }
        ColorJitter => {
            let bright = 1.0 + uniform_sym(rng, alpha);
            let contrast = 1.0 + uniform_sym(rng, alpha);
            let sat = 1.0 + uniform_sym(rng, alpha);
            let y = x.mul_scalar(bright).clamp(0.0, 1.0);
            let [r, g, b] = color::split(&y);
            let mean = color::luma(&r, &g, &b).mean_all().broadcast_scalar(y.shape());
            let y = y.sub(&mean).mul_scalar(contrast).add(&mean).clamp(0.0, 1.0);
            let [r, g, b] = color::split(&y);
            let [hu, s, v] = color::rgb_to_hsv(&r, &g, &b);
            let s = s.mul_scalar(sat).clamp(0.0, 1.0);
            color::merge(&color::hsv_to_rgb(&hu, &s, &v))
        }
        Gamma => {
            let g = uniform_sym(rng, alpha).exp();
            x.add_scalar(1e-4).powf(g)
        }
        Sharpen => {
            let mut kern = [-alpha / 9.0; 9];
            kern[4] += 1.0 + alpha;
            linear(x, filter_map(c, h, w, &kern, 3, 3))
        }
        Solarize => {
            let thr = T::from_f64_lossy(alpha);
            let keep: Vec<bool> = x.value().data().iter().map(|&v| v <= thr).collect();
            x.select(&x.rsub_scalar(1.0), &keep)
        }
        HistogramEqualization | AdaptiveHistogram | ContrastStretching => {
            unreachable!("forward-only kinds are dispatched elsewhere")
        }
    };
    out.clamp(0.0, 1.0)
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Random convex weights over three channels.
fn simplex3(rng: &mut Rng) -> [f64; 3] {
    let u: [f64; 3] = [rng.gen_range(1e-3..1.0), rng.gen_range(1e-3..1.0), rng.gen_range(1e-3..1.0)];
    let s: f64 = u.iter().sum();
    u.map(|v| v / s)
}

fn pick_pair(rng: &mut Rng) -> (usize, usize, usize) {
    let a = rng.gen_range(0..3);
    let b = (a + rng.gen_range(1..3)) % 3;
    (a, b, 3 - a - b)
}

/// Line kernel of length `len` at angle `theta` starting at the centre,
/// rasterised with bilinear splatting.
fn motion_kernel(len: f64, theta: f64) -> (Vec<f64>, usize) {
    if len < 0.5 {
        return (vec![1.0], 1);
    }
    let r = len.ceil() as usize;
    let k = 2 * r + 1;
    let mut kern = vec![0.0; k * k];
    let steps = (len * 4.0).ceil() as usize + 1;
    let (sin, cos) = theta.sin_cos();
    for s in 0..steps {
        let t = len * s as f64 / (steps - 1) as f64;
        let (py, px) = (r as f64 + t * sin, r as f64 + t * cos);
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (y, xx) = (y0 + dy, x0 + dx);
                if y >= 0.0 && xx >= 0.0 && (y as usize) < k && (xx as usize) < k {
                    kern[y as usize * k + xx as usize] += wy * wx;
                }
            }
        }
    }
    let s: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= s);
    (kern, k)
}

/// Median filter as a gather of the per-window median element, so the
/// gradient flows to the selected pixel.
fn median<T: Float>(x: &Var<T>, r: usize) -> Var<T> {
    if r == 0 {
        return x.clone();
    }
    let (c, h, w) = dims(x);
    let v = x.value().data();
    let mut src = Vec::with_capacity(c * h * w);
    let mut window: Vec<usize> = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    let r = r as isize;
    for ch in 0..c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let y = (i + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (j + dx).clamp(0, w as isize - 1) as usize;
                        window.push((ch * h + y) * w + xx);
                    }
                }
                let mid = window.len() / 2;
                window.select_nth_unstable_by(mid, |&a, &b| {
                    v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
                });
                src.push(window[mid]);
            }
        }
    }
    linear(x, gather_map(c * h * w, &[c, h, w], &src))
}

fn lab<T: Float>(x: &Var<T>, offsets: [f64; 3]) -> Var<T> {
    let (_, h, w) = dims(x);
    let lin = color::srgb_decode(x);
    let mut to_xyz = RGB_TO_XYZ;
    for (row, wt) in to_xyz.iter_mut().zip(WHITE) {
        row.iter_mut().for_each(|v| *v /= wt);
    }
    let xyz = linear(&lin, pixel_affine(h, w, to_xyz, [0.0; 3]));
    let f = color::lab_f(&xyz);
    // L = 116 fy - 16, a = 500 (fx - fy), b = 200 (fy - fz)
    let to_lab = [[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]];
    let lab = linear(&f, pixel_affine(h, w, to_lab, [-16.0 + offsets[0], offsets[1], offsets[2]]));
    let back_f = linear(&lab, pixel_affine(h, w, inverse3(to_lab), mat_vec(&inverse3(to_lab), [16.0, 0.0, 0.0])));
    let xyz = color::lab_finv(&back_f);
    let lin = linear(&xyz, pixel_affine(h, w, inverse3(to_xyz), [0.0; 3]));
    color::srgb_encode(&lin.clamp(0.0, 1.0))
}
