//! Pre-activation residual classifier, its training loops and checkpoints.
//!
//! Every block computes `shortcut(x) + branch(x)` with the branch kept as a
//! separate node, so the skip-gradient method can rescale the branch's
//! backward contribution and linear backprop can replace rectifier
//! derivatives inside the final stage's branches.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::Dataset;
use crate::defense::{self, DefenseConfig};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Conv2dSpec, Var};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::transforms;

pub const CHECKPOINT_MAGIC: &[u8] = b"RTGAUNTLET-CKPT-v1\n";
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneArch {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
}

fn default_channels() -> usize {
    3
}

impl Default for BackboneArch {
    fn default() -> Self {
        BackboneArch { widths: vec![16, 32, 64], blocks_per_stage: 2, classes: 4, image_size: 32, in_channels: 3 }
    }
}

impl BackboneArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be non-empty and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.classes < 2 || self.image_size == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid backbone architecture {self:?}")));
        }
        Ok(())
    }

    /// Parameter names and shapes in forward order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let w = &self.widths;
        out.push(("stem.w".to_string(), vec![w[0], self.in_channels, 3, 3]));
        let mut in_c = w[0];
        for (s, &out_c) in w.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let p = format!("s{s}.b{b}");
                out.push((format!("{p}.bn1.g"), vec![in_c]));
                out.push((format!("{p}.bn1.b"), vec![in_c]));
                out.push((format!("{p}.conv1.w"), vec![out_c, in_c, 3, 3]));
                out.push((format!("{p}.bn2.g"), vec![out_c]));
                out.push((format!("{p}.bn2.b"), vec![out_c]));
                out.push((format!("{p}.conv2.w"), vec![out_c, out_c, 3, 3]));
                if needs_projection(s, b, in_c, out_c) {
                    out.push((format!("{p}.short.w"), vec![out_c, in_c, 1, 1]));
                }
                in_c = out_c;
            }
        }
        out.push(("final.bn.g".to_string(), vec![in_c]));
        out.push(("final.bn.b".to_string(), vec![in_c]));
        out.push(("fc.w".to_string(), vec![in_c, self.classes]));
        out.push(("fc.b".to_string(), vec![self.classes]));
        out
    }
}

fn stride_of(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

fn needs_projection(stage: usize, block: usize, in_c: usize, out_c: usize) -> bool {
    stride_of(stage, block) != 1 || in_c != out_c
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Backward-pass modifications and normalisation mode for one forward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOpts {
    /// Batch statistics instead of running statistics.
    pub train: bool,
    /// Scale applied to residual-branch cotangents; `None` leaves the
    /// backward pass untouched.
    pub sgm_scale: Option<f64>,
    /// Linear backward through the final stage's branch rectifiers.
    pub linbp: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts::default()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub arch: BackboneArch,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    running: Vec<RunningStats>,
    pub config_digest: String,
    pub rng_state: u64,
    pub trained_epochs: usize,
}

struct Cursor<'a, T: Float> {
    params: &'a [Var<T>],
    next: usize,
}

impl<'a, T: Float> Cursor<'a, T> {
    fn take(&mut self) -> &'a Var<T> {
        let p = &self.params[self.next];
        self.next += 1;
        p
    }
}

impl Backbone {
    /// He-initialised network.
    pub fn new(arch: BackboneArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag("init")]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in arch.layout() {
            let len: usize = shape.iter().product();
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0f32)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name == "fc.w" {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let d = Normal::new(0.0, bound).expect("finite");
                Tensor::from_fn(&shape, |_| d.sample(&mut rng) as f32)
            } else {
                let fan_in = len / shape[0];
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
                Tensor::from_fn(&shape, |_| d.sample(&mut rng) as f32)
            };
            names.push(name);
            params.push(t);
        }
        let running = names
            .iter()
            .zip(&params)
            .filter(|(n, _)| n.ends_with(".g"))
            .map(|(_, p)| RunningStats { mean: vec![0.0; p.len()], var: vec![1.0; p.len()] })
            .collect();
        Ok(Backbone {
            arch,
            names,
            params,
            running,
            config_digest: String::new(),
            rng_state: seed,
            trained_epochs: 0,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Accepts `[C, H, W]` or `[B, C, H, W]` of the architecture's size.
    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        let tail = match shape.len() {
            3 => shape,
            4 => &shape[1..],
            _ => return Err(Error::Input(format!("expected an image or image batch, got shape {shape:?}"))),
        };
        if tail != [a.in_channels, a.image_size, a.image_size] {
            return Err(Error::Input(format!(
                "image shape {tail:?} does not match the architecture ({}x{}x{})",
                a.in_channels, a.image_size, a.image_size
            )));
        }
        Ok(())
    }

    /// Parameters as graph leaves (`trainable`) or constants.
    pub fn param_vars<T: Float>(&self, trainable: bool) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|p| if trainable { Var::leaf(p.cast()) } else { Var::constant(p.cast()) })
            .collect()
    }

    /// Logits for an `[N, C, H, W]` input. In training mode the batch
    /// statistics of every normalisation layer are returned as well.
    pub fn forward_with<T: Float>(
        &self,
        x: &Var<T>,
        params: &[Var<T>],
        opts: ForwardOpts,
    ) -> Result<(Var<T>, Vec<BatchStats>)> {
        self.check_image(x.shape())?;
        if x.shape().len() != 4 {
            return Err(Error::Input("forward expects a batch".into()));
        }
        let mut cur = Cursor { params, next: 0 };
        let mut stats = Vec::new();
        let mut bn_index = 0;
        let mut bn = |h: &Var<T>, cur: &mut Cursor<'_, T>, stats: &mut Vec<BatchStats>| {
            let (g, b) = (cur.take(), cur.take());
            let i = bn_index;
            bn_index += 1;
            if opts.train {
                let (y, s) = h.batch_norm_train(g, b, BN_EPS);
                stats.push(s);
                y
            } else {
                let rs = &self.running[i];
                let inv: Vec<f64> = rs.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let c = inv.len();
                let scale_t = Tensor::<T>::from_f64(&[c], &inv);
                let shift_t = Tensor::<T>::from_f64(
                    &[c],
                    &rs.mean.iter().zip(&inv).map(|(m, s)| -m * s).collect::<Vec<_>>(),
                );
                // (x - mean) / std * gamma + beta, with gamma/beta kept
                // differentiable when they are leaves.
                let normed = h.channel_affine(&Var::constant(scale_t), &Var::constant(shift_t));
                normed.channel_affine(g, b)
            }
        };
        let conv3 = |h: &Var<T>, w: &Var<T>, stride: usize| h.conv2d(w, Conv2dSpec { stride, padding: 1 });

        let mut h = conv3(x, cur.take(), 1);
        let stages = self.arch.widths.len();
        let mut in_c = self.arch.widths[0];
        for (s, &out_c) in self.arch.widths.iter().enumerate() {
            let linear = opts.linbp && s + 1 == stages;
            for b in 0..self.arch.blocks_per_stage {
                let stride = stride_of(s, b);
                let pre = bn(&h, &mut cur, &mut stats).relu(false);
                let w1 = cur.take();
                let mid = bn(&conv3(&pre, w1, stride), &mut cur, &mut stats).relu(linear);
                let branch = conv3(&mid, cur.take(), 1);
                let skip = if needs_projection(s, b, in_c, out_c) {
                    pre.conv2d(cur.take(), Conv2dSpec { stride, padding: 0 })
                } else {
                    h.clone()
                };
                let branch = match opts.sgm_scale {
                    Some(g) => branch.grad_scale(g),
                    None => branch,
                };
                h = skip.add(&branch);
                in_c = out_c;
            }
        }
        let feat = bn(&h, &mut cur, &mut stats).relu(false).global_avg_pool();
        let logits = feat.matmul(cur.take()).add_row_bias(cur.take());
        debug_assert_eq!(cur.next, params.len());
        Ok((logits, stats))
    }

    /// Evaluation-mode logits with constant parameters.
    pub fn logits<T: Float>(&self, x: &Var<T>, opts: ForwardOpts) -> Result<Var<T>> {
        let params = self.param_vars::<T>(false);
        Ok(self.forward_with(x, &params, ForwardOpts { train: false, ..opts })?.0)
    }

    /// Plain evaluation logits `[B, classes]`, computed in chunks.
    pub fn predict(&self, xs: &Tensor<f32>) -> Tensor<f32> {
        const CHUNK: usize = 256;
        let xs = if xs.ndim() == 3 { xs.clone().reshape(&[1, xs.shape()[0], xs.shape()[1], xs.shape()[2]]) } else { xs.clone() };
        let b = xs.shape()[0];
        let per: usize = xs.shape()[1..].iter().product();
        let params = self.param_vars::<f32>(false);
        let mut out = Vec::with_capacity(b * self.arch.classes);
        for start in (0..b).step_by(CHUNK) {
            let end = (start + CHUNK).min(b);
            let mut shape = xs.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, xs.data()[start * per..end * per].to_vec());
            let (l, _) = self
                .forward_with(&Var::constant(chunk), &params, ForwardOpts::eval())
                .expect("shape checked by caller");
            out.extend_from_slice(l.value().data());
        }
        Tensor::new(&[b, self.arch.classes], out)
    }

    /// Plain (undefended) accuracy.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let pred = self.predict(&data.images).argmax_rows();
        let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
        hits as f64 / data.len().max(1) as f64
    }

    /// Exponential moving average of batch statistics. The population
    /// variance is used as is; batches hold thousands of values per channel.
    fn update_running(&mut self, stats: &[BatchStats]) {
        for (rs, s) in self.running.iter_mut().zip(stats) {
            for (r, m) in rs.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in rs.var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            config_digest: self.config_digest.clone(),
            rng_state: self.rng_state,
            trained_epochs: self.trained_epochs,
            params: self.names.iter().zip(&self.params).map(|(n, p)| (n.clone(), p.shape().to_vec())).collect(),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let json = serde_json::to_vec(&header)?;
        buf.write_u64::<LittleEndian>(json.len() as u64)?;
        buf.extend_from_slice(&json);
        for p in &self.params {
            for &v in p.data() {
                buf.write_f32::<LittleEndian>(v)?;
            }
        }
        for rs in &self.running {
            for &v in rs.mean.iter().chain(&rs.var) {
                buf.write_f64::<LittleEndian>(v)?;
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
        let mut r = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| bad("not a backbone checkpoint (bad magic header)"))?;
        let n = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if n > r.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..n])?;
        r = &r[n..];
        let mut model = Backbone::new(header.arch.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = header.arch.layout();
        if expected != header.params {
            return Err(bad("parameter layout does not match the architecture"));
        }
        for p in model.params.iter_mut() {
            for v in p.data_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated weights"))?;
            }
        }
        for rs in model.running.iter_mut() {
            for v in rs.mean.iter_mut().chain(rs.var.iter_mut()) {
                *v = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated statistics"))?;
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        model.config_digest = header.config_digest;
        model.rng_state = header.rng_state;
        model.trained_epochs = header.trained_epochs;
        Ok(model)
    }
}

/// Anything the defense and the attacks can query: eval-mode logits with
/// optional backward modifications.
pub trait Classifier {
    fn classes(&self) -> usize;
    fn check_input(&self, shape: &[usize]) -> Result<()>;
    /// Logits of an `[N, C, H, W]` batch; differentiable in the input.
    fn logits_var(&self, x: &Var<f32>, opts: ForwardOpts) -> Result<Var<f32>>;
    /// Plain logits `[N, classes]`.
    fn predict(&self, xs: &Tensor<f32>) -> Tensor<f32>;
}

impl Classifier for Backbone {
    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.check_image(shape)
    }

    fn logits_var(&self, x: &Var<f32>, opts: ForwardOpts) -> Result<Var<f32>> {
        self.logits(x, opts)
    }

    fn predict(&self, xs: &Tensor<f32>) -> Tensor<f32> {
        Backbone::predict(self, xs)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: BackboneArch,
    config_digest: String,
    rng_state: u64,
    trained_epochs: usize,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Length of the first cosine cycle, in epochs.
    pub period: f64,
    pub doubling: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { period: 10.0, doubling: true }
    }
}

impl LrSchedule {
    /// Cosine annealing with warm restarts at fractional epoch `t`.
    pub fn factor(&self, t: f64) -> f64 {
        let (mut start, mut len) = (0.0, self.period);
        while t >= start + len {
            start += len;
            if self.doubling {
                len *= 2.0;
            }
        }
        0.5 * (1.0 + (std::f64::consts::PI * (t - start) / len).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainConfig {
    pub attack: AttackConfig,
    #[serde(default = "yes")]
    pub pretrain_clean: bool,
    /// Clean epochs run first when the model is untrained.
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
}

fn yes() -> bool {
    true
}

fn default_pretrain_epochs() -> usize {
    20
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig { attack: AttackConfig::training(), pretrain_clean: true, pretrain_epochs: default_pretrain_epochs() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Transform chains drawn per input (through the defense's pipeline).
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// Route training inputs through the defense's transforms.
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    #[serde(default)]
    pub adv: Option<AdvTrainConfig>,
}

fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    128
}
fn default_wd() -> f64 {
    5e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    20
}
fn default_n_train() -> usize {
    1
}
fn default_val() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            weight_decay: default_wd(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            lr_schedule: LrSchedule::default(),
            n_train: default_n_train(),
            augment: true,
            val_fraction: default_val(),
            adv: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.batch_size >= 1
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.n_train >= 1
            && self.lr_schedule.period > 0.0
            && (0.0..1.0).contains(&self.val_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        if let Some(adv) = &self.adv {
            adv.attack.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Mean cross-entropy of `[N, C]` logits.
pub fn cross_entropy<T: Float>(logits: &Var<T>, labels: &[usize]) -> Var<T> {
    logits.log_softmax_rows().pick_rows(labels).mean_all().neg()
}

/// Clean training: every input passes through `n_train` sampled transform
/// chains of `defense` (when given and `augment` is set). The weights with
/// the best held-out validation accuracy are kept.
pub fn train_clean(
    model: &mut Backbone,
    data: &Dataset,
    cfg: &TrainConfig,
    defense: Option<&DefenseConfig>,
    seed: u64,
) -> Result<TrainHistory> {
    fit(model, data, cfg, defense, seed, None)
}

/// Adversarial training of the RT model: each minibatch is replaced by
/// adversarial examples crafted against the current model and defense.
pub fn adv_train(
    model: &mut Backbone,
    data: &Dataset,
    cfg: &TrainConfig,
    defense: Option<&DefenseConfig>,
    seed: u64,
) -> Result<TrainHistory> {
    let adv = cfg
        .adv
        .as_ref()
        .ok_or_else(|| Error::Config("adv_train needs an `adv` block in the training config".into()))?;
    if adv.attack.epsilon <= 0.0 {
        return Err(Error::Config("adversarial training needs epsilon > 0".into()));
    }
    if adv.pretrain_clean && model.trained_epochs == 0 {
        let pre = TrainConfig { epochs: adv.pretrain_epochs, adv: None, ..cfg.clone() };
        fit(model, data, &pre, defense, rng::derive(seed, &[rng::tag("pretrain")]), None)?;
    }
    fit(model, data, cfg, defense, seed, Some(&adv.attack))
}

fn fit(
    model: &mut Backbone,
    data: &Dataset,
    cfg: &TrainConfig,
    defense: Option<&DefenseConfig>,
    seed: u64,
    adv: Option<&AttackConfig>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    model.check_image(data.images.shape())?;
    if let Some(d) = defense {
        d.validate()?;
    }
    let augment = defense.filter(|_| cfg.augment);
    let (train, val) = data.split(cfg.val_fraction, &mut rng::stream(seed, &[rng::tag("val-split")]));
    if train.is_empty() {
        return Err(Error::Data("no training images left after the validation split".into()));
    }
    let val_defense = defense.map(|d| DefenseConfig { n_infer: 1, ..d.clone() });
    let no_defense = DefenseConfig::none();
    let attack_defense = defense.unwrap_or(&no_defense);
    let val_seed = rng::derive(seed, &[rng::tag("val")]);
    let validate = |m: &Backbone| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        match &val_defense {
            Some(d) => defense::accuracy(m, &val.images, &val.labels, d, val_seed),
            None => Ok(m.accuracy(&val)),
        }
    };

    let mut velocity: Vec<Tensor<f32>> = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let batches = train.len().div_ceil(cfg.batch_size);
    let mut history = TrainHistory::default();
    let mut best: Option<(Vec<Tensor<f32>>, Vec<RunningStats>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("epoch"), epoch as u64]));
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = cfg.learning_rate;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let t = epoch as f64 + bi as f64 / batches as f64;
            lr = cfg.learning_rate * cfg.lr_schedule.factor(t);
            let mut xs = train.batch(idx);
            let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            if let Some(acfg) = adv {
                let aseed = rng::derive(seed, &[rng::tag("adv"), epoch as u64, bi as u64]);
                xs = attack::pgd_batch(model, &xs, &ys, attack_defense, acfg, aseed)?;
            }
            let (inputs, labels) = match augment {
                Some(d) => {
                    let mut copies = Vec::with_capacity(idx.len() * cfg.n_train);
                    let mut labels = Vec::with_capacity(idx.len() * cfg.n_train);
                    for (j, &i) in idx.iter().enumerate() {
                        let x = xs.index0(j);
                        let mut r = rng::stream(seed, &[rng::tag("aug"), epoch as u64, i as u64]);
                        for p in d.sample(&mut r, cfg.n_train, false)? {
                            copies.push(transforms::apply_chain_value(&x, &p)?);
                            labels.push(ys[j]);
                        }
                    }
                    (Tensor::stack(&copies), labels)
                }
                None => (xs, ys),
            };
            let params = model.param_vars::<f32>(true);
            let (logits, stats) =
                model.forward_with(&Var::constant(inputs), &params, ForwardOpts { train: true, ..Default::default() })?;
            let loss = cross_entropy(&logits, &labels);
            let lv = loss.value().data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("loss {lv} at epoch {epoch}, batch {bi}")));
            }
            loss_sum += lv * labels.len() as f64;
            seen += labels.len();
            hits += logits.value().argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
            let mut grads = loss.backward();
            let (lr32, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
            for ((p, v), var) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&params) {
                let g = grads.take(var);
                for ((w, vel), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = mu * *vel + gv + wd * *w;
                    *w -= lr32 * *vel;
                }
            }
            model.update_running(&stats);
        }
        model.trained_epochs += 1;
        let val_acc = validate(model)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            val_acc,
        });
        if best.is_none() || val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best = Some((model.params.clone(), model.running.clone()));
        }
        log::info!("epoch {epoch}: loss {:.4} val {:.3}", loss_sum / seen.max(1) as f64, val_acc);
    }
    if let Some((p, r)) = best {
        model.params = p;
        model.running = r;
    }
    model.rng_state = rng::derive(seed, &[cfg.epochs as u64]);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::gradcheck;

    fn tiny() -> BackboneArch {
        BackboneArch { widths: vec![4, 8], blocks_per_stage: 1, classes: 3, image_size: 8, in_channels: 3 }
    }

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        synthetic(n, 8, 3, seed).images
    }

    fn input_grad(m: &Backbone, x: &Tensor<f32>, opts: ForwardOpts) -> (Tensor<f32>, Vec<Tensor<f32>>) {
        let xv = Var::leaf(x.clone());
        let params = m.param_vars::<f32>(true);
        let (logits, _) = m.forward_with(&xv, &params, opts).unwrap();
        let g = logits.sum_all().backward();
        (g.wrt(&xv), params.iter().map(|p| g.wrt(p)).collect())
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let mut m = Backbone::new(tiny(), 1).unwrap();
        m.param_mut("fc.w").unwrap().data_mut().fill(0.0);
        m.param_mut("fc.b").unwrap().data_mut().fill(0.0);
        assert!(m.predict(&batch(5, 2)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_follow_batch_order() {
        let m = Backbone::new(tiny(), 1).unwrap();
        let xs = batch(4, 3);
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::stack(&perm.iter().map(|&i| xs.index0(i)).collect::<Vec<_>>());
        let (a, b) = (m.predict(&xs), m.predict(&permuted));
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.data()[k * 3 + c] - a.data()[i * 3 + c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = Backbone::new(tiny(), 1).unwrap();
        assert!(matches!(m.check_image(&[2, 3, 16, 16]), Err(Error::Input(_))));
        assert!(matches!(m.check_image(&[8, 8]), Err(Error::Input(_))));
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 1, 8, 8]));
        assert!(m.logits(&x, ForwardOpts::eval()).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Backbone::new(tiny(), 4).unwrap();
        let params = m.param_vars::<f64>(false);
        let x = batch(2, 5).cast::<f64>();
        let f = |v: &Var<f64>| m.forward_with(v, &params, ForwardOpts::eval()).unwrap().0;
        let c = gradcheck::check_f64(&f, &x, 1e-6, 9);
        assert!(c.rel_error < 1e-3, "relative error {}", c.rel_error);
    }

    #[test]
    fn unit_skip_scale_leaves_gradients_untouched() {
        let m = Backbone::new(tiny(), 6).unwrap();
        let x = batch(3, 7);
        let (gx, gp) = input_grad(&m, &x, ForwardOpts::eval());
        let (hx, hp) = input_grad(&m, &x, ForwardOpts { sgm_scale: Some(1.0), ..ForwardOpts::eval() });
        assert_eq!(gx.data(), hx.data());
        for (a, b) in gp.iter().zip(&hp) {
            assert_eq!(a.data(), b.data());
        }
        let (sx, _) = input_grad(&m, &x, ForwardOpts { sgm_scale: Some(0.5), ..ForwardOpts::eval() });
        assert_ne!(gx.data(), sx.data());
    }

    #[test]
    fn branch_scale_on_a_toy_residual() {
        // y = x + w x with the branch scaled by 0.5 gives dy/dx = 1 + 0.5 w.
        let x = Var::leaf(Tensor::new(&[3], vec![0.5f64, -1.0, 2.0]));
        let w = Var::constant(Tensor::new(&[3], vec![3.0, -2.0, 0.25]));
        let y = x.add(&x.mul(&w).grad_scale(0.5));
        assert_eq!(y.value().data(), &[2.0, 1.0, 2.5]);
        let g = y.sum_all().backward().wrt(&x);
        assert_eq!(g.data(), &[2.5, 0.0, 1.125]);
    }

    #[test]
    fn linear_backprop_changes_only_the_backward_pass() {
        let m = Backbone::new(tiny(), 8).unwrap();
        let x = batch(2, 9);
        let a = m.logits(&Var::constant(x.clone()), ForwardOpts::eval()).unwrap();
        let b = m.logits(&Var::constant(x.clone()), ForwardOpts { linbp: true, ..ForwardOpts::eval() }).unwrap();
        assert_eq!(a.value().data(), b.value().data());
        let (gx, _) = input_grad(&m, &x, ForwardOpts::eval());
        let (lx, _) = input_grad(&m, &x, ForwardOpts { linbp: true, ..ForwardOpts::eval() });
        assert_ne!(gx.data(), lx.data());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = Backbone::new(tiny(), 10).unwrap();
        let data = synthetic(40, 8, 3, 11);
        train_clean(&mut m, &data, &TrainConfig { epochs: 1, batch_size: 8, ..Default::default() }, None, 12).unwrap();
        m.config_digest = "abc".into();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(CHECKPOINT_MAGIC));
        let back = Backbone::load(&path).unwrap();
        let xs = batch(6, 13);
        assert_eq!(m.predict(&xs).data(), back.predict(&xs).data());
        assert_eq!(back.config_digest, "abc");
        assert_eq!(back.trained_epochs, 1);
        assert_eq!(back.rng_state, m.rng_state);
        assert_eq!(back.running_stats(), m.running_stats());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(Backbone::load(&path).is_err());
    }

    #[test]
    fn training_is_deterministic_and_records_every_epoch() {
        let data = synthetic(48, 8, 3, 14);
        let cfg = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
        let run = || {
            let mut m = Backbone::new(tiny(), 15).unwrap();
            let h = train_clean(&mut m, &data, &cfg, None, 16).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha.epochs.len(), 3);
        assert_eq!(ha.epochs, hb.epochs);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = synthetic(24, 8, 3, 17);
        let mut m = Backbone::new(tiny(), 18).unwrap();
        let before = m.params().to_vec();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 0.0, ..Default::default() };
        train_clean(&mut m, &data, &cfg, None, 19).unwrap();
        for (p, q) in before.iter().zip(m.params()) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn training_rejects_empty_data_and_missing_adv_block() {
        let data = synthetic(8, 8, 3, 20);
        let empty = data.subset(&[]);
        let mut m = Backbone::new(tiny(), 21).unwrap();
        assert!(matches!(train_clean(&mut m, &empty, &TrainConfig::default(), None, 0), Err(Error::Data(_))));
        assert!(matches!(adv_train(&mut m, &data, &TrainConfig::default(), None, 0), Err(Error::Config(_))));
        let mut cfg = TrainConfig { adv: Some(AdvTrainConfig::default()), ..Default::default() };
        cfg.adv.as_mut().unwrap().attack.epsilon = 0.0;
        assert!(matches!(adv_train(&mut m, &data, &cfg, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_schedule_restarts_with_doubling_periods() {
        let s = LrSchedule { period: 2.0, doubling: true };
        assert_eq!(s.factor(0.0), 1.0);
        assert!((s.factor(1.0) - 0.5).abs() < 1e-12);
        assert_eq!(s.factor(2.0), 1.0);
        assert!((s.factor(4.0) - 0.5).abs() < 1e-12);
        assert_eq!(s.factor(6.0), 1.0);
    }
}
