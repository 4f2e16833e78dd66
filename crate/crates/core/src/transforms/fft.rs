//! Frequency-domain perturbation: drop random Fourier components.
//!
//! The mask is symmetric under `k -> -k` and always keeps the DC term, so
//! the filtered image is real and the operator is self-adjoint; the
//! backward pass applies the same filter to the cotangent.

use std::rc::Rc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::graph::Var;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub(super) fn drop_mask(h: usize, w: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    let mut keep = vec![true; h * w];
    for u in 0..h {
        for v in 0..w {
            let (cu, cv) = ((h - u) % h, (w - v) % w);
            let idx = u * w + v;
            let partner = cu * w + cv;
            if idx == 0 || partner < idx {
                continue;
            }
            let drop = rng.gen_bool(p);
            keep[idx] = !drop;
            keep[partner] = !drop;
        }
    }
    keep
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            tmp[r] = buf[r * w + c];
        }
        col.process(&mut tmp);
        for r in 0..h {
            buf[r * w + c] = tmp[r];
        }
    }
}

fn filter<T: Float>(x: &Tensor<T>, keep: &[bool]) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut planner = FftPlanner::new();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for (b, v) in buf.iter_mut().zip(&x.data()[ch * h * w..(ch + 1) * h * w]) {
            *b = Complex::new(v.as_f64(), 0.0);
        }
        fft2(&mut buf, h, w, false, &mut planner);
        for (b, &k) in buf.iter_mut().zip(keep) {
            if !k {
                *b = Complex::new(0.0, 0.0);
            }
        }
        fft2(&mut buf, h, w, true, &mut planner);
        out.extend(buf.iter().map(|b| T::from_f64_lossy(b.re * norm)));
    }
    Tensor::new(x.shape(), out)
}

pub(super) fn fft_perturb<T: Float>(x: &Var<T>, keep: Vec<bool>) -> Var<T> {
    let keep = Rc::new(keep);
    let value = filter(x.value(), &keep);
    Var::from_op(value, vec![x.clone()], move |g, _, _| vec![Some(filter(g, &keep))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn keeping_everything_is_identity() {
        let x: Tensor<f64> = Tensor::from_fn(&[2, 5, 6], |i| (i as f64 * 0.37).sin());
        let y = filter(&x, &vec![true; 30]);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_is_symmetric_and_keeps_dc() {
        let mut rng = Rng::seed_from_u64(3);
        let (h, w) = (6, 7);
        let keep = drop_mask(h, w, 0.5, &mut rng);
        assert!(keep[0]);
        for u in 0..h {
            for v in 0..w {
                assert_eq!(keep[u * w + v], keep[((h - u) % h) * w + (w - v) % w]);
            }
        }
    }

    #[test]
    fn filter_is_self_adjoint() {
        let mut rng = Rng::seed_from_u64(9);
        let keep = drop_mask(4, 6, 0.5, &mut rng);
        let a: Tensor<f64> = Tensor::from_fn(&[1, 4, 6], |i| ((i * 31) % 17) as f64);
        let b: Tensor<f64> = Tensor::from_fn(&[1, 4, 6], |i| ((i * 13) % 7) as f64);
        let lhs = filter(&a, &keep).dot(&b);
        let rhs = a.dot(&filter(&b, &keep));
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
