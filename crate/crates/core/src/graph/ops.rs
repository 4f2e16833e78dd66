//! Elementwise, shape and reduction operations.

use super::Var;
use crate::tensor::{lit, Float, Tensor};


impl<T: Float> Var<T> {
    /// Elementwise map with a derivative expressed in terms of input and output.
    pub fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let value = self.value().map(f);
        Var::from_op(value, vec![self.clone()], move |g, p, out| {
            let x = p[0].value();
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    fn binary(
        &self,
        other: &Var<T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "binary op shape mismatch");
        let value = self.value().zip_map(other.value(), f);
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let ga = p[0].requires_grad().then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&a, &b))| g * da(a, b))
                    .collect();
                Tensor::new(g.shape(), d)
            });
            let gb = p[1].requires_grad().then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&a, &b))| g * db(a, b))
                    .collect();
                Tensor::new(g.shape(), d)
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var<T>) -> Var<T> {
        self.binary(
            other,
            |a, b| if a >= b { a } else { b },
            |a, b| if a >= b { T::one() } else { T::zero() },
            |a, b| if a >= b { T::zero() } else { T::one() },
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var<T>) -> Var<T> {
        self.binary(
            other,
            |a, b| if a <= b { a } else { b },
            |a, b| if a <= b { T::one() } else { T::zero() },
            |a, b| if a <= b { T::zero() } else { T::one() },
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = lit::<T>(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<T> {
        let c = lit::<T>(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64) -> Var<T> {
        let c = lit::<T>(c);
        self.unary(move |x| c - x, |_, _| -T::one())
    }

    pub fn square(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|x| x.sqrt(), |_, y| lit::<T>(0.5) / y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&self, p: f64) -> Var<T> {
        let pt = lit::<T>(p);
        self.unary(
            move |x| x.powf(pt),
            move |x, _| pt * x.powf(pt - T::one()),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside or
    /// at the boundary when the input already sits there.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (lit::<T>(lo), lit::<T>(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Rectifier. With `linear_backward` the derivative is taken as 1
    /// everywhere (the forward value is unchanged).
    pub fn relu(&self, linear_backward: bool) -> Var<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            move |x, _| {
                if linear_backward || x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Elementwise `x + c` with a constant tensor.
    pub fn add_const(&self, c: &Tensor<T>) -> Var<T> {
        let value = self.value().zip_map(c, |a, b| a + b);
        Var::from_op(value, vec![self.clone()], |g, _, _| vec![Some(g.clone())])
    }

    /// Elementwise `x * c` with a constant tensor.
    pub fn mul_const(&self, c: &Tensor<T>) -> Var<T> {
        let value = self.value().zip_map(c, |a, b| a * b);
        let c = c.clone();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.zip_map(&c, |g, c| g * c))]
        })
    }

    /// `mask ? self : other` elementwise with a constant mask.
    pub fn select(&self, other: &Var<T>, mask: &[bool]) -> Var<T> {
        assert_eq!(self.shape(), other.shape());
        assert_eq!(mask.len(), self.value().len());
        let data = mask
            .iter()
            .zip(self.value().data().iter().zip(other.value().data()))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect();
        let value = Tensor::new(self.shape(), data);
        let mask = mask.to_vec();
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, p, _| {
            let ga = p[0].requires_grad().then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { T::zero() })
                    .collect();
                Tensor::new(g.shape(), d)
            });
            let gb = p[1].requires_grad().then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { T::zero() } else { g })
                    .collect();
                Tensor::new(g.shape(), d)
            });
            vec![ga, gb]
        })
    }

    /// Identity forward; backward multiplies the cotangent by `scale`.
    pub fn grad_scale(&self, scale: f64) -> Var<T> {
        let s = lit::<T>(scale);
        Var::from_op(self.value().clone(), vec![self.clone()], move |g, _, _| {
            vec![Some(g.scale(s))]
        })
    }

    /// Forward value `value`, backward routed unchanged into `self`.
    /// This is the straight-through substitution used for BPDA and identity
    /// gradient routing.
    pub fn with_forward_value(&self, value: Tensor<T>) -> Var<T> {
        assert_eq!(value.shape(), self.shape(), "substituted value shape mismatch");
        Var::from_op(value, vec![self.clone()], |g, _, _| vec![Some(g.clone())])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let value = Tensor::new(&out_shape, data);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut full = vec![T::zero(); outer * dim * inner];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                full[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, full))]
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let dims: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().len(), base.len());
                for (i, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                    assert!(i == axis || a == b, "concat shape mismatch");
                }
                p.shape()[axis]
            })
            .collect();
        let total: usize = dims.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                let src = p.value().data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let value = Tensor::new(&out_shape, data);
        Var::from_op(value, parts.to_vec(), move |g, ps, _| {
            let mut offset = 0;
            ps.iter()
                .zip(&dims)
                .map(|(p, &d)| {
                    let off = offset;
                    offset += d;
                    p.requires_grad().then(|| {
                        let mut buf = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let s = o * total * inner + off * inner;
                            buf.extend_from_slice(&g.data()[s..s + d * inner]);
                        }
                        Tensor::new(p.shape(), buf)
                    })
                })
                .collect()
        })
    }

    /// Stack equally shaped variables along a new leading axis.
    pub fn stack(parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let inner = parts[0].shape().to_vec();
        let reshaped: Vec<Var<T>> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape(), &inner[..], "stack shape mismatch");
                let mut s = vec![1];
                s.extend_from_slice(&inner);
                p.reshape(&s)
            })
            .collect();
        Var::concat(&reshaped, 0)
    }

    /// Broadcast a single-element variable to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var<T> {
        assert_eq!(self.value().len(), 1, "broadcast_scalar needs one element");
        let value = Tensor::full(shape, self.value().data()[0]);
        let own = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(Tensor::full(&own, g.sum()))]
        })
    }

    /// Element `i` of the leading axis, with that axis removed.
    pub fn index0(&self, i: usize) -> Var<T> {
        let inner = self.shape()[1..].to_vec();
        self.narrow(0, i, 1).reshape(&inner)
    }

    pub fn sum_all(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Weighted sum `sum_i w_i x_i` with constant weights, as a scalar.
    pub fn dot_const(&self, w: &Tensor<T>) -> Var<T> {
        self.mul_const(w).sum_all()
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_axis0(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let inv = lit::<T>(1.0 / n as f64);
        let src = self.value().data();
        let mut acc = vec![T::zero(); inner];
        for r in 0..n {
            for (a, &v) in acc.iter_mut().zip(&src[r * inner..(r + 1) * inner]) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
        let value = Tensor::new(&shape[1..], acc);
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut full = Vec::with_capacity(n * inner);
            for _ in 0..n {
                full.extend(g.data().iter().map(|&v| v * inv));
            }
            vec![Some(Tensor::new(&shape, full))]
        })
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax_rows(&self) -> Var<T> {
        assert_eq!(self.shape().len(), 2);
        let cols = self.shape()[1];
        let mut data = self.value().data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(self.shape(), data);
        Var::from_op(value, vec![self.clone()], move |g, _, out| {
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(cols).zip(out.data().chunks(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
            }
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    /// Row-wise log-softmax of a `[rows, cols]` matrix.
    pub fn log_softmax_rows(&self) -> Var<T> {
        assert_eq!(self.shape().len(), 2);
        let cols = self.shape()[1];
        let mut data = self.value().data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(self.shape(), data);
        Var::from_op(value, vec![self.clone()], move |g, _, out| {
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(cols).zip(out.data().chunks(cols)) {
                let gs: T = gr.iter().copied().sum();
                d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * gs));
            }
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    /// Picks `x[r, cols[r]]` from a `[rows, cols]` matrix, giving `[rows]`.
    pub fn pick_rows(&self, cols_idx: &[usize]) -> Var<T> {
        assert_eq!(self.shape().len(), 2);
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        assert_eq!(cols_idx.len(), rows);
        let src = self.value().data();
        let value = Tensor::new(
            &[rows],
            cols_idx
                .iter()
                .enumerate()
                .map(|(r, &c)| src[r * cols + c])
                .collect(),
        );
        let idx = cols_idx.to_vec();
        let shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            let mut d = vec![T::zero(); rows * cols];
            for (r, &c) in idx.iter().enumerate() {
                d[r * cols + c] = g.data()[r];
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// Matrix product `[n, k] x [k, m]`.
    pub fn matmul(&self, w: &Var<T>) -> Var<T> {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(w.shape()[0], k, "matmul inner dimension mismatch");
        let m = w.shape()[1];
        let value = Tensor::new(
            &[n, m],
            crate::tensor::matmul_raw(self.value().data(), false, w.value().data(), false, n, k, m),
        );
        Var::from_op(value, vec![self.clone(), w.clone()], move |g, p, _| {
            let gx = p[0].requires_grad().then(|| {
                Tensor::new(
                    &[n, k],
                    crate::tensor::matmul_raw(g.data(), false, p[1].value().data(), true, n, m, k),
                )
            });
            let gw = p[1].requires_grad().then(|| {
                Tensor::new(
                    &[k, m],
                    crate::tensor::matmul_raw(p[0].value().data(), true, g.data(), false, k, n, m),
                )
            });
            vec![gx, gw]
        })
    }

    /// Adds a `[m]` bias to every row of a `[n, m]` matrix.
    pub fn add_row_bias(&self, b: &Var<T>) -> Var<T> {
        let (n, m) = (self.shape()[0], self.shape()[1]);
        assert_eq!(b.shape(), &[m]);
        let mut data = self.value().data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, &bb) in row.iter_mut().zip(b.value().data()) {
                *v += bb;
            }
        }
        let value = Tensor::new(&[n, m], data);
        Var::from_op(value, vec![self.clone(), b.clone()], move |g, p, _| {
            let gb = p[1].requires_grad().then(|| {
                let mut acc = vec![T::zero(); m];
                for row in g.data().chunks(m) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(&[m], acc)
            });
            vec![Some(g.clone()), gb]
        })
    }
}
