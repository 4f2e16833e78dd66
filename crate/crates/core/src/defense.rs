//! The randomized-transformation prediction wrapper and its decision rules.
//!
//! `g_n(x)` draws `n` transform chains, classifies every transformed copy and
//! aggregates the per-sample outputs. Aggregation happens in `f64` over the
//! `f32` per-sample values, so averaging identical samples is exact.

use serde::{Deserialize, Serialize};

use crate::backbone::Classifier;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{argmax, Tensor};
use crate::transforms::{self, TransformKind, TransformParams, TransformSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    #[default]
    SoftmaxMean,
    LogitsMean,
    MajorityVote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub specs: Vec<TransformSpec>,
    /// Chain length.
    pub s: usize,
    #[serde(default = "default_n_infer")]
    pub n_infer: usize,
    #[serde(default)]
    pub rule: DecisionRule,
}

fn default_n_infer() -> usize {
    10
}

impl DefenseConfig {
    pub fn new(specs: Vec<TransformSpec>, s: usize) -> Self {
        DefenseConfig { specs, s, n_infer: default_n_infer(), rule: DecisionRule::SoftmaxMean }
    }

    /// A defense that never transforms: one identity kind with p=0, n=1.
    pub fn none() -> Self {
        let mut spec = TransformSpec::default_for(TransformKind::Identity);
        spec.apply_prob = 0.0;
        DefenseConfig { specs: vec![spec], s: 1, n_infer: 1, rule: DecisionRule::SoftmaxMean }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.specs.len();
        if self.s == 0 || self.s > k {
            return Err(Error::Config(format!("defense chain length S={} must lie in [1, K={k}]", self.s)));
        }
        if self.n_infer == 0 {
            return Err(Error::Config("defense n_infer must be at least 1".into()));
        }
        self.specs.iter().try_for_each(TransformSpec::validate)
    }

    pub fn k(&self) -> usize {
        self.specs.len()
    }

    pub fn sample(&self, rng: &mut Rng, n: usize, fixed_perm: bool) -> Result<Vec<TransformParams>> {
        transforms::sample_params(&self.specs, self.s, rng, n, fixed_perm)
    }

    /// Whether every kind can sit on a differentiable path.
    pub fn is_differentiable(&self) -> bool {
        self.specs.iter().all(|s| s.kind.is_differentiable())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutcome {
    pub scores: Vec<f64>,
    pub label: usize,
    /// Raw per-sample logits, `[n, C]`.
    pub samples: Option<Tensor<f32>>,
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Plain softmax of one logit row, in the precision the defense uses.
pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    softmax(row).into_iter().map(f64::from).collect()
}

/// Aggregates `[n, C]` per-sample logits under `rule`.
pub fn aggregate(logits: &Tensor<f32>, rule: DecisionRule) -> Vec<f64> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut acc = vec![0.0f64; c];
    for row in logits.data().chunks(c) {
        match rule {
            DecisionRule::SoftmaxMean => {
                for (a, p) in acc.iter_mut().zip(softmax(row)) {
                    *a += p as f64;
                }
            }
            DecisionRule::LogitsMean => {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            DecisionRule::MajorityVote => acc[argmax(row)] += 1.0,
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Applies each chain to `x` (forward only) and stacks the copies.
pub fn transformed_copies(x: &Tensor<f32>, params: &[TransformParams]) -> Result<Tensor<f32>> {
    let copies = params
        .iter()
        .map(|p| transforms::apply_chain_value(x, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&copies))
}

pub fn predict_scores(
    model: &(impl Classifier + ?Sized),
    x: &Tensor<f32>,
    cfg: &DefenseConfig,
    rng: &mut Rng,
) -> Result<PredictionOutcome> {
    cfg.validate()?;
    model.check_input(x.shape())?;
    let params = cfg.sample(rng, cfg.n_infer, false)?;
    let logits = model.predict(&transformed_copies(x, &params)?);
    let scores = aggregate(&logits, cfg.rule);
    Ok(PredictionOutcome { label: argmax(&scores), scores, samples: Some(logits) })
}

pub fn predict_label(model: &(impl Classifier + ?Sized), x: &Tensor<f32>, cfg: &DefenseConfig, rng: &mut Rng) -> Result<usize> {
    Ok(predict_scores(model, x, cfg, rng)?.label)
}

/// Labels for every image of a `[B, C, H, W]` batch. Image `i` draws its
/// chains from `stream(seed, [i])`, so the result does not depend on how
/// the batch is chunked.
pub fn predict_batch(model: &(impl Classifier + ?Sized), xs: &Tensor<f32>, cfg: &DefenseConfig, seed: u64) -> Result<Vec<usize>> {
    cfg.validate()?;
    const CHUNK: usize = 256;
    let b = xs.shape()[0];
    let per_chunk = (CHUNK / cfg.n_infer).max(1);
    let mut labels = Vec::with_capacity(b);
    let mut start = 0;
    while start < b {
        let end = (start + per_chunk).min(b);
        let mut copies = Vec::with_capacity((end - start) * cfg.n_infer);
        for i in start..end {
            let mut rng = rng::stream(seed, &[i as u64]);
            let x = xs.index0(i);
            for p in cfg.sample(&mut rng, cfg.n_infer, false)? {
                copies.push(transforms::apply_chain_value(&x, &p)?);
            }
        }
        let logits = model.predict(&Tensor::stack(&copies));
        let c = logits.shape()[1];
        for rows in logits.data().chunks(cfg.n_infer * c) {
            let t = Tensor::new(&[cfg.n_infer, c], rows.to_vec());
            labels.push(argmax(&aggregate(&t, cfg.rule)));
        }
        start = end;
    }
    Ok(labels)
}

/// Fraction of `labels` matched by the defense's predictions.
pub fn accuracy(model: &(impl Classifier + ?Sized), xs: &Tensor<f32>, labels: &[usize], cfg: &DefenseConfig, seed: u64) -> Result<f64> {
    let pred = predict_batch(model, xs, cfg, seed)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
