//! Spread of single-sample gradient estimates: dimension-normalised
//! variance, cosine similarity to the mean and sign agreement.
//!
//! The samples are signed single-draw gradients; all reductions run in
//! `f64` in sample order.

use serde::{Deserialize, Serialize};

use crate::attack::{objective_grads, AttackConfig, GradContext};
use crate::backbone::Classifier;
use crate::bpda::SurrogateSet;
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    #[serde(skip)]
    pub mean_grad: Vec<f64>,
    pub variance: f64,
    /// `None` when the mean gradient is zero.
    pub cosine: Option<f64>,
    pub sign_match: f64,
    pub n: usize,
    pub d: usize,
}

fn check<T: Float>(samples: &[Tensor<T>], min: usize) -> Result<usize> {
    if samples.len() < min {
        return Err(Error::Parameter(format!("need at least {min} gradient samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Parameter("gradient samples differ in size".into()));
    }
    Ok(d)
}

/// Elementwise mean of the samples.
pub fn mean_grad<T: Float>(samples: &[Tensor<T>]) -> Result<Vec<f64>> {
    let d = check(samples, 1)?;
    // Running mean: identical samples give their value back exactly.
    let mut acc = vec![0.0; d];
    for (k, s) in samples.iter().enumerate() {
        let w = (k + 1) as f64;
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += (v.as_f64() - *a) / w;
        }
    }
    Ok(acc)
}

/// `(1/d) (1/(n-1)) sum_j ||mu - g_j||^2`.
pub fn grad_variance<T: Float>(samples: &[Tensor<T>]) -> Result<f64> {
    let d = check(samples, 2)?;
    let mu = mean_grad(samples)?;
    let mut total = 0.0;
    for s in samples {
        total += s.data().iter().zip(&mu).map(|(v, m)| (m - v.as_f64()).powi(2)).sum::<f64>();
    }
    Ok(total / (d as f64 * (samples.len() - 1) as f64))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cosine similarity between each sample and the mean gradient.
pub fn cosine_sim<T: Float>(samples: &[Tensor<T>]) -> Result<f64> {
    check(samples, 1)?;
    let mu = mean_grad(samples)?;
    let mu_norm = norm(mu.iter().copied());
    if mu_norm == 0.0 {
        return Err(Error::Undefined("cosine similarity with a zero mean gradient".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        let sn = norm(s.data().iter().map(|v| v.as_f64()));
        if sn > 0.0 {
            let dot: f64 = s.data().iter().zip(&mu).map(|(v, m)| v.as_f64() * m).sum();
            acc += dot / (sn * mu_norm);
        }
    }
    Ok((acc / samples.len() as f64).clamp(-1.0, 1.0))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Mean fraction of coordinates whose sign agrees with the mean gradient's
/// (zero agrees only with zero).
pub fn sign_match<T: Float>(samples: &[Tensor<T>]) -> Result<f64> {
    let d = check(samples, 1)?;
    let mu: Vec<i8> = mean_grad(samples)?.into_iter().map(sign).collect();
    let mut acc = 0.0;
    for s in samples {
        let hits = s.data().iter().zip(&mu).filter(|(v, &m)| sign(v.as_f64()) == m).count();
        acc += hits as f64 / d as f64;
    }
    Ok(acc / samples.len() as f64)
}

pub fn gradient_stats<T: Float>(samples: &[Tensor<T>]) -> Result<GradientStats> {
    let d = check(samples, 2)?;
    let cosine = match cosine_sim(samples) {
        Ok(c) => Some(c),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(GradientStats {
        mean_grad: mean_grad(samples)?,
        variance: grad_variance(samples)?,
        cosine,
        sign_match: sign_match(samples)?,
        n: samples.len(),
        d,
    })
}

/// Signed single-sample gradients of the attack objective at `x`, with
/// `cfg.n_attack` samples drawn from `(seed, tag)`.
pub fn signed_samples(
    model: &(impl Classifier + ?Sized),
    xs: &Tensor<f32>,
    ys: &[usize],
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    seed: u64,
    surrogates: Option<&SurrogateSet>,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    cfg.validate()?;
    let ctx = GradContext::from_config(cfg, surrogates);
    let mut out = Vec::with_capacity(ys.len());
    let chunk = (128 / cfg.n_attack).max(1);
    let idx: Vec<usize> = (0..ys.len()).collect();
    for part in idx.chunks(chunk) {
        let x: Vec<Tensor<f32>> = part.iter().map(|&i| xs.index0(i)).collect();
        let params = part
            .iter()
            .map(|&i| defense.sample(&mut rng::stream(seed, &[i as u64]), cfg.n_attack, cfg.fixed_perm))
            .collect::<Result<Vec<_>>>()?;
        let y: Vec<usize> = part.iter().map(|&i| ys[i]).collect();
        let grads = objective_grads(model, &x, &y, &params, &vec![cfg.target; part.len()], &ctx)?;
        out.extend(grads.into_iter().map(|g| g.per_sample.into_iter().map(|s| s.signum()).collect()));
    }
    Ok(out)
}

/// Gradient statistics for every input of a batch.
pub fn diagnose_batch(
    model: &(impl Classifier + ?Sized),
    xs: &Tensor<f32>,
    ys: &[usize],
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    seed: u64,
    surrogates: Option<&SurrogateSet>,
) -> Result<Vec<GradientStats>> {
    signed_samples(model, xs, ys, defense, cfg, seed, surrogates)?
        .iter()
        .map(|s| gradient_stats(s))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec())
    }

    #[test]
    fn mean_examples() {
        let g = t(&[1.0, -2.0, 0.5]);
        assert_eq!(mean_grad(&[g.clone(), g.clone()]).unwrap(), g.data());
        assert_eq!(mean_grad(&[t(&[1.0; 4]), t(&[-1.0; 4])]).unwrap(), vec![0.0; 4]);
        assert!(mean_grad::<f64>(&[]).is_err());
    }

    #[test]
    fn variance_examples() {
        let g = t(&[0.3, -0.7]);
        assert_eq!(grad_variance(&[g.clone(), g.clone(), g]).unwrap(), 0.0);
        for d in [1, 7, 100] {
            assert_eq!(grad_variance(&[t(&vec![1.0; d]), t(&vec![-1.0; d])]).unwrap(), 2.0);
        }
        assert!(grad_variance(&[t(&[1.0])]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let g = t(&[0.3, -0.7]);
        assert!((cosine_sim(&[g.clone(), g]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[t(&[1.0, 2.0]), t(&[-1.0, -2.0])]), Err(Error::Undefined(_))));
        let c = cosine_sim(&[t(&[1.0, 0.0]), t(&[0.0, 1.0])]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn sign_match_examples() {
        let g = t(&[0.3, -0.7]);
        assert_eq!(sign_match(&[g.clone(), g]).unwrap(), 1.0);
        assert_eq!(sign_match(&[t(&[1.0, 1.0]), t(&[1.0, -1.0])]).unwrap(), 0.5);
        // A sample pointing against a mean with no zero entries.
        let s = [t(&[1.0, 1.0]), t(&[1.0, 1.0]), t(&[-1.0, -1.0])];
        let mu = mean_grad(&s).unwrap();
        let anti = s[2].data().iter().zip(&mu).filter(|(v, m)| sign(**v) == sign(**m)).count();
        assert_eq!(anti, 0);
    }

    proptest! {
        #[test]
        fn variance_matches_textbook_estimator(
            n in 2usize..8,
            d in 1usize..12,
            seed in any::<u64>(),
        ) {
            use rand::{Rng as _, SeedableRng};
            let mut r = crate::rng::Rng::seed_from_u64(seed);
            let samples: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::from_fn(&[d], |_| r.gen_range(-3.0..3.0))).collect();
            let mut total = 0.0;
            for k in 0..d {
                let col: Vec<f64> = samples.iter().map(|s| s.data()[k]).collect();
                let m = col.iter().sum::<f64>() / n as f64;
                total += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            }
            let got = grad_variance(&samples).unwrap();
            prop_assert!((got - total / d as f64).abs() < 1e-10);
            prop_assert!(got >= 0.0);
            let sm = sign_match(&samples).unwrap();
            prop_assert!((0.0..=1.0).contains(&sm));
            if let Ok(c) = cosine_sim(&samples) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
