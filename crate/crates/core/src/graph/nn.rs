//! Convolution, normalisation and pooling on `[N, C, H, W]` tensors.

use super::Var;
use crate::tensor::{lit, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Per-channel batch statistics produced by training-mode normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

fn im2col<T: Float>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut col = vec![T::zero(); g.rows() * cols];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut col[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let dst = &mut row[n * plane + oi * g.ow..n * plane + (oi + 1) * g.ow];
                        let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Float>(col: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &col[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src = &row[n * plane + oi * g.ow..n * plane + (oi + 1) * g.ow];
                        for (oj, &v) in src.iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                x[base + ii as usize * g.w + jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, N*P]` -> `[N, O, P]`
fn split_batch<T: Float>(m: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p]
                .copy_from_slice(&m[oc * n * p + b * p..oc * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`
fn merge_batch<T: Float>(t: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); o * n * p];
    for oc in 0..o {
        for b in 0..n {
            out[oc * n * p + b * p..oc * n * p + (b + 1) * p]
                .copy_from_slice(&t[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}

impl<T: Float> Var<T> {
    /// 2-D cross-correlation of `[N, C, H, W]` input with `[O, C, kh, kw]`
    /// weights, zero padding.
    pub fn conv2d(&self, weight: &Var<T>, spec: Conv2dSpec) -> Var<T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d expects NCHW input");
        assert_eq!(ws.len(), 4, "conv2d expects OCHW weights");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (h, w) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let g = Geometry {
            n: xs[0],
            c: xs[1],
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
        };
        let o = ws[0];
        let col = im2col(self.value().data(), &g);
        let (rows, cols) = (g.rows(), g.cols());
        let out_m = crate::tensor::matmul_raw(weight.value().data(), false, &col, false, o, rows, cols);
        let value = Tensor::new(&[g.n, o, oh, ow], split_batch(&out_m, o, g.n, oh * ow));
        Var::from_op(value, vec![self.clone(), weight.clone()], move |grad, p, _| {
            let gm = merge_batch(grad.data(), o, g.n, g.oh * g.ow);
            let gw = p[1].requires_grad().then(|| {
                let d = crate::tensor::matmul_raw(&gm, false, &col, true, o, cols, rows);
                Tensor::new(p[1].shape(), d)
            });
            let gx = p[0].requires_grad().then(|| {
                let dcol =
                    crate::tensor::matmul_raw(p[1].value().data(), true, &gm, false, rows, o, cols);
                Tensor::new(p[0].shape(), col2im(&dcol, &g))
            });
            vec![gx, gw]
        })
    }

    /// Per-channel `x * scale[c] + shift[c]` on `[N, C, H, W]`.
    pub fn channel_affine(&self, scale: &Var<T>, shift: &Var<T>) -> Var<T> {
        let s = self.shape().to_vec();
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(scale.shape(), &[c]);
        assert_eq!(shift.shape(), &[c]);
        let mut data = self.value().data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let (a, sh) = (scale.value().data()[ch], shift.value().data()[ch]);
                for v in &mut data[(b * c + ch) * p..(b * c + ch + 1) * p] {
                    *v = *v * a + sh;
                }
            }
        }
        let value = Tensor::new(&s, data);
        Var::from_op(
            value,
            vec![self.clone(), scale.clone(), shift.clone()],
            move |g, ps, _| {
                let x = ps[0].value().data();
                let gd = g.data();
                let gx = ps[0].requires_grad().then(|| {
                    let mut d = gd.to_vec();
                    for b in 0..n {
                        for ch in 0..c {
                            let a = ps[1].value().data()[ch];
                            for v in &mut d[(b * c + ch) * p..(b * c + ch + 1) * p] {
                                *v *= a;
                            }
                        }
                    }
                    Tensor::new(&s, d)
                });
                let (mut ga, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
                if ps[1].requires_grad() || ps[2].requires_grad() {
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                            for (&gv, &xv) in gd[r.clone()].iter().zip(&x[r]) {
                                ga[ch] += gv * xv;
                                gb[ch] += gv;
                            }
                        }
                    }
                }
                vec![
                    gx,
                    ps[1].requires_grad().then(|| Tensor::new(&[c], ga)),
                    ps[2].requires_grad().then(|| Tensor::new(&[c], gb)),
                ]
            },
        )
    }

    /// Training-mode batch normalisation over `(N, H, W)` per channel
    /// followed by the learned affine map.
    pub fn batch_norm_train(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> (Var<T>, BatchStats) {
        let s = self.shape().to_vec();
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let m = (n * p) as f64;
        let x = self.value().data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                for &v in &x[(b * c + ch) * p..(b * c + ch + 1) * p] {
                    mean[ch] += v.as_f64();
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for b in 0..n {
            for ch in 0..c {
                for &v in &x[(b * c + ch) * p..(b * c + ch + 1) * p] {
                    let d = v.as_f64() - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                let (mu, is) = (lit::<T>(mean[ch]), lit::<T>(inv_std[ch]));
                for (o, &v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                    *o = (v - mu) * is;
                }
            }
        }
        let xhat = Tensor::new(&s, xhat);
        let xhat_c = xhat.clone();
        let normed = Var::from_op(xhat, vec![self.clone()], move |g, _, _| {
            // dx = inv_std/m * (m*g - sum(g) - xhat*sum(g*xhat))
            let gd = g.data();
            let xh = xhat_c.data();
            let mut sg = vec![0.0f64; c];
            let mut sgx = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                    for (&gv, &xv) in gd[r.clone()].iter().zip(&xh[r]) {
                        sg[ch] += gv.as_f64();
                        sgx[ch] += gv.as_f64() * xv.as_f64();
                    }
                }
            }
            let mut dx = vec![T::zero(); gd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                    let k = inv_std[ch] / m;
                    for ((o, &gv), &xv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xh[r]) {
                        *o = lit(k * (m * gv.as_f64() - sg[ch] - xv.as_f64() * sgx[ch]));
                    }
                }
            }
            vec![Some(Tensor::new(&s, dx))]
        });
        (normed.channel_affine(gamma, beta), BatchStats { mean, var })
    }

    /// `[N, C, H, W]` -> `[N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Var<T> {
        let s = self.shape().to_vec();
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let inv = lit::<T>(1.0 / p as f64);
        let data = self
            .value()
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut d = Vec::with_capacity(n * c * p);
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv * inv).take(p));
            }
            vec![Some(Tensor::new(&s, d))]
        })
    }
}
