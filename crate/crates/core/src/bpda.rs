//! BPDA surrogates and the gradient-substitution modes for transform chains.
//!
//! A surrogate is a small fully convolutional network trained to imitate one
//! transform. Attacks keep the true transform on the forward pass and route
//! the backward pass through the surrogate (or through the identity).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Var};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::transforms::{self, TransformKind, TransformParams, TransformSpec};

pub const BPDA_MAGIC: &[u8] = b"RTGAUNTLET-BPDA-v1\n";

/// Kernel sizes of the six layers; the receptive-field radius is the sum of
/// their half-widths.
const KERNELS: [usize; 6] = [5, 5, 5, 5, 5, 3];

pub const RECEPTIVE_RADIUS: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// True transform gradients; non-differentiable kinds are an error.
    #[default]
    Exact,
    /// Surrogate gradients for every applied transform.
    Bpda,
    /// Every transform is treated as the identity on the backward pass.
    Identity,
    /// Exact where differentiable, surrogate elsewhere.
    Combo,
}

impl GradientMode {
    pub fn name(self) -> &'static str {
        match self {
            GradientMode::Exact => "exact",
            GradientMode::Bpda => "bpda",
            GradientMode::Identity => "identity",
            GradientMode::Combo => "combo",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Surrogate {
    Net(BpdaNet),
    /// Explicit identity stand-in for kinds no local network can imitate.
    Identity,
}

pub type SurrogateSet = BTreeMap<TransformKind, Surrogate>;

/// Applies one chain under `mode`. The forward value always equals the true
/// chain output.
pub fn apply_chain_mode(
    x: &Var<f32>,
    params: &TransformParams,
    mode: GradientMode,
    surrogates: Option<&SurrogateSet>,
) -> Result<Var<f32>> {
    let mut cur = x.clone();
    for (kind, alpha, seed) in params.applied() {
        let exact = match mode {
            GradientMode::Exact => true,
            GradientMode::Combo => kind.is_differentiable(),
            GradientMode::Bpda | GradientMode::Identity => false,
        };
        cur = if exact {
            transforms::apply_transform(kind, &cur, alpha, seed)?
        } else {
            let value = transforms::forward_value(kind, cur.value(), alpha, seed)?;
            let path = if mode == GradientMode::Identity {
                cur.clone()
            } else {
                match surrogates.and_then(|s| s.get(&kind)) {
                    Some(Surrogate::Net(net)) => net.apply(&cur, alpha)?,
                    Some(Surrogate::Identity) => cur.clone(),
                    None => return Err(Error::MissingSurrogate(kind)),
                }
            };
            path.with_forward_value(value)
        };
    }
    Ok(cur)
}

/// Kinds in `specs` that `mode` needs a surrogate for.
pub fn required_surrogates(specs: &[TransformSpec], mode: GradientMode) -> Vec<TransformKind> {
    specs
        .iter()
        .map(|s| s.kind)
        .filter(|k| match mode {
            GradientMode::Bpda => true,
            GradientMode::Combo => !k.is_differentiable(),
            _ => false,
        })
        .collect()
}

pub fn check_surrogates(specs: &[TransformSpec], mode: GradientMode, surrogates: Option<&SurrogateSet>) -> Result<()> {
    for kind in required_surrogates(specs, mode) {
        if !surrogates.is_some_and(|s| s.contains_key(&kind)) {
            return Err(Error::MissingSurrogate(kind));
        }
    }
    Ok(())
}

/// Six-layer convolutional surrogate. Input planes: RGB, two coordinate
/// planes in `[0, 1]` and one plane per strength parameter. The input stack
/// is concatenated into layers two to five, and the output is added to the
/// image so the identity is the zero network.
#[derive(Clone, Debug)]
pub struct BpdaNet {
    pub kind: TransformKind,
    pub hidden: usize,
    params: Vec<Tensor<f32>>,
}

impl BpdaNet {
    pub fn new(kind: TransformKind, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("bpda-init")]);
        let params = Self::layout(kind, hidden)
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
                    Tensor::from_fn(&shape, |_| d.sample(&mut rng) as f32)
                }
            })
            .collect::<Vec<_>>();
        let mut net = BpdaNet { kind, hidden, params };
        // Start from the identity map.
        let last = net.params.len() - 2;
        net.params[last] = Tensor::zeros(net.params[last].shape());
        net
    }

    fn param_planes(kind: TransformKind) -> usize {
        usize::from(kind.strength_axis().is_some())
    }

    fn in_planes(kind: TransformKind) -> usize {
        3 + 2 + Self::param_planes(kind)
    }

    fn layout(kind: TransformKind, hidden: usize) -> Vec<Vec<usize>> {
        let inp = Self::in_planes(kind);
        let mut out = Vec::new();
        for (i, &k) in KERNELS.iter().enumerate() {
            let (o, c) = match i {
                0 => (hidden, inp),
                5 => (3, hidden),
                _ => (hidden, hidden + inp),
            };
            out.push(vec![o, c, k, k]);
            out.push(vec![o]);
        }
        out
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    fn input_stack<T: Float>(&self, x: &Var<T>, alphas: &[f64]) -> Var<T> {
        let s = x.shape().to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        let coords = Tensor::<T>::from_fn(&[n, 2, h, w], |i| {
            let plane = (i / (h * w)) % 2;
            let (r, c) = ((i % (h * w)) / w, i % w);
            let v = if plane == 0 { c as f64 / (w.max(2) - 1) as f64 } else { r as f64 / (h.max(2) - 1) as f64 };
            T::from_f64_lossy(v)
        });
        let mut parts = vec![x.clone(), Var::constant(coords)];
        if let Some(axis) = self.kind.strength_axis() {
            let plane = Tensor::<T>::from_fn(&[n, 1, h, w], |i| T::from_f64_lossy(axis.to_unit(alphas[i / (h * w)])));
            parts.push(Var::constant(plane));
        }
        Var::concat(&parts, 1)
    }

    /// `[N, 3, H, W]` -> `[N, 3, H, W]` with per-sample strengths.
    pub fn forward_with<T: Float>(&self, x: &Var<T>, alphas: &[f64], params: &[Var<T>]) -> Var<T> {
        let inp = self.input_stack(x, alphas);
        let c_out = |h: &Var<T>, i: usize| {
            let k = KERNELS[i];
            let y = h.conv2d(&params[2 * i], Conv2dSpec { stride: 1, padding: k / 2 });
            let ones = Var::constant(Tensor::full(&[params[2 * i + 1].shape()[0]], T::one()));
            y.channel_affine(&ones, &params[2 * i + 1])
        };
        let mut h = c_out(&inp, 0).relu(false);
        for i in 1..5 {
            h = c_out(&Var::concat(&[h, inp.clone()], 1), i).relu(false);
        }
        x.add(&c_out(&h, 5))
    }

    /// Surrogate applied to one `[3, H, W]` image inside a chain.
    pub fn apply(&self, x: &Var<f32>, alpha: f64) -> Result<Var<f32>> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Input(format!("surrogate expects a [3, H, W] image, got {s:?}")));
        }
        let params: Vec<Var<f32>> = self.params.iter().map(|p| Var::constant(p.clone())).collect();
        let y = self.forward_with(&x.reshape(&[1, s[0], s[1], s[2]]), &[alpha], &params);
        Ok(y.reshape(&s))
    }

    /// Forward-only prediction for a batch.
    pub fn predict(&self, xs: &Tensor<f32>, alphas: &[f64]) -> Tensor<f32> {
        let params: Vec<Var<f32>> = self.params.iter().map(|p| Var::constant(p.clone())).collect();
        self.forward_with(&Var::constant(xs.clone()), alphas, &params).value().clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&BpdaHeader { kind: self.kind, hidden: self.hidden })?;
        let mut buf = Vec::from(BPDA_MAGIC);
        buf.write_u64::<LittleEndian>(header.len() as u64)?;
        buf.extend_from_slice(&header);
        for p in &self.params {
            for &v in p.data() {
                buf.write_f32::<LittleEndian>(v)?;
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Artifact { path: path.to_path_buf(), reason: reason.to_string() };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = bytes.strip_prefix(BPDA_MAGIC).ok_or_else(|| bad("not a surrogate checkpoint (bad magic header)"))?;
        let n = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if n > r.len() {
            return Err(bad("truncated header"));
        }
        let header: BpdaHeader = serde_json::from_slice(&r[..n])?;
        r = &r[n..];
        let mut net = BpdaNet::new(header.kind, header.hidden, 0);
        for p in net.params.iter_mut() {
            for v in p.data_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated weights"))?;
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct BpdaHeader {
    kind: TransformKind,
    hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpdaTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// Images drawn from the training set; 0 uses all of them.
    pub max_images: usize,
}

impl Default for BpdaTrainConfig {
    fn default() -> Self {
        BpdaTrainConfig { learning_rate: 0.001, epochs: 10, batch_size: 32, hidden: 16, max_images: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BpdaHistory {
    /// Mean per-pixel squared error of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Best-so-far training loss after each epoch.
    pub best_loss: Vec<f64>,
}

/// Fits a surrogate for `spec.kind` on untransformed images with Adam,
/// resampling the transform parameters for every batch. The weights of the
/// best epoch are returned.
pub fn train_bpda(spec: &TransformSpec, data: &Dataset, cfg: &BpdaTrainConfig, seed: u64) -> Result<(BpdaNet, BpdaHistory)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("surrogate training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!("invalid surrogate training config {cfg:?}")));
    }
    let kind = spec.kind;
    let mut net = BpdaNet::new(kind, cfg.hidden, seed);
    let n_img = if cfg.max_images == 0 { data.len() } else { cfg.max_images.min(data.len()) };
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let mut m: Vec<Tensor<f32>> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut v = m.clone();
    let mut step = 0i32;
    let mut history = BpdaHistory::default();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("bpda-epoch"), epoch as u64]));
        order.truncate(n_img);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut r = rng::stream(seed, &[rng::tag("bpda-theta"), epoch as u64, bi as u64]);
            let xs = data.batch(idx);
            let mut alphas = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for j in 0..idx.len() {
                let alpha = spec.strength.as_ref().map_or(0.0, |d| d.sample(&mut r));
                let tseed = rand::Rng::gen::<u64>(&mut r);
                targets.push(transforms::forward_value(kind, &xs.index0(j), alpha, tseed)?);
                alphas.push(alpha);
            }
            let target = Tensor::stack(&targets);
            let params: Vec<Var<f32>> = net.params.iter().map(|p| Var::leaf(p.clone())).collect();
            let out = net.forward_with(&Var::constant(xs), &alphas, &params);
            let loss = out.add_const(&target.scale(-1.0)).square().mean_all();
            let lv = loss.value().data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("surrogate loss {lv} for {kind} at epoch {epoch}")));
            }
            sum += lv * idx.len() as f64;
            count += idx.len();
            let mut grads = loss.backward();
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            let lr = cfg.learning_rate as f32;
            for (((p, var), mm), vv) in net.params.iter_mut().zip(&params).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = grads.take(var);
                for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(mm.data_mut()).zip(vv.data_mut()) {
                    *mi = b1 * *mi + (1.0 - b1) * gv;
                    *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        let epoch_loss = sum / count.max(1) as f64;
        history.epoch_loss.push(epoch_loss);
        if best.as_ref().map_or(true, |(b, _)| epoch_loss < *b) {
            best = Some((epoch_loss, net.params.clone()));
        }
        history.best_loss.push(best.as_ref().expect("set above").0);
        log::info!("bpda {kind} epoch {epoch}: mse {epoch_loss:.5}");
    }
    if let Some((_, p)) = best {
        net.params = p;
    }
    Ok((net, history))
}

/// Per-pixel MSE of the surrogate against the true transform on `data`,
/// with strengths drawn from `spec`.
pub fn surrogate_mse(net: &BpdaNet, spec: &TransformSpec, data: &Dataset, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, &[rng::tag("bpda-eval")]);
    let (mut sum, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let xs = data.batch(chunk);
        let mut alphas = Vec::new();
        let mut targets = Vec::new();
        for j in 0..chunk.len() {
            let alpha = spec.strength.as_ref().map_or(0.0, |d| d.sample(&mut r));
            let tseed = rand::Rng::gen::<u64>(&mut r);
            targets.push(transforms::forward_value(spec.kind, &xs.index0(j), alpha, tseed)?);
            alphas.push(alpha);
        }
        let pred = net.predict(&xs, &alphas);
        for (a, b) in pred.data().iter().zip(Tensor::stack(&targets).data()) {
            sum += ((a - b) as f64).powi(2);
        }
        count += pred.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Conventional per-kind file name inside a surrogate directory.
pub fn surrogate_file(kind: TransformKind) -> String {
    format!("bpda-{}.bin", kind.name())
}

/// Loads every `bpda-<kind>.bin` present in `dir`.
pub fn load_surrogates(dir: &Path, kinds: &[TransformKind]) -> Result<SurrogateSet> {
    let mut set = SurrogateSet::new();
    for &kind in kinds {
        let path = dir.join(surrogate_file(kind));
        if path.exists() {
            set.insert(kind, Surrogate::Net(BpdaNet::load(&path)?));
        }
    }
    Ok(set)
}
