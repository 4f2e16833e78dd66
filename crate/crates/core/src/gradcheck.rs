//! Central finite-difference checks of reverse-mode gradients.
//!
//! The scalar probe is `L(x) = sum_i w_i f(x)_i` with fixed pseudo-random
//! weights. The reported error is `|g_an - g_fd| / max(|g_fd|, |g_an|, tiny)`
//! over the whole input gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Var;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

fn probe_weights(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn probe<U: Float>(f: &dyn Fn(&Var<U>) -> Var<U>, x: &Tensor<f64>, w: &[f64]) -> f64 {
    let out = f(&Var::constant(x.cast::<U>()));
    out.value()
        .data()
        .iter()
        .zip(w)
        .map(|(v, w)| v.as_f64() * w)
        .sum()
}

/// Analytic gradient at precision `A` against a central difference
/// evaluated at precision `N` (normally `f64`).
pub fn check<A: Float, N: Float>(
    f_analytic: &dyn Fn(&Var<A>) -> Var<A>,
    f_numeric: &dyn Fn(&Var<N>) -> Var<N>,
    x: &Tensor<f64>,
    h: f64,
    seed: u64,
) -> GradCheck {
    let xv = Var::leaf(x.cast::<A>());
    let out = f_analytic(&xv);
    let w = probe_weights(out.value().len(), seed);
    let wt = Tensor::from_f64(out.shape(), &w);
    let analytic = out.dot_const(&wt).backward().wrt(&xv).to_f64_vec();

    let mut numeric = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let base = x.data()[i];
        xp.data_mut()[i] = base + h;
        let up = probe(f_numeric, &xp, &w);
        xp.data_mut()[i] = base - h;
        let down = probe(f_numeric, &xp, &w);
        xp.data_mut()[i] = base;
        numeric.push((up - down) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    GradCheck {
        analytic,
        numeric,
        rel_error: diff / na.max(nn).max(1e-12),
    }
}

/// Convenience wrapper: analytic and numeric passes both in `f64`.
pub fn check_f64(f: &dyn Fn(&Var<f64>) -> Var<f64>, x: &Tensor<f64>, h: f64, seed: u64) -> GradCheck {
    check::<f64, f64>(f, f, x, h, seed)
}
