//! Gradient attacks on randomized-transformation defenses.
//!
//! One PGD loop covers the baselines and the strong attack: the objective,
//! the backward modifications (skip-gradient scaling, linear backprop), the
//! optimizer and momentum boosting are all configuration. Gradients are
//! taken through separate input leaves per Monte Carlo sample, which gives
//! the per-sample gradients for diagnostics at no extra cost.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Classifier, ForwardOpts};
use crate::bpda::{self, GradientMode, SurrogateSet};
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::rng::{self, Rng};
use crate::tensor::{Float, Tensor};
use crate::transforms::TransformParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean over samples of the cross-entropy.
    EotCe,
    /// Cross-entropy of the mean softmax.
    SoftmaxCe,
    /// Cross-entropy of the softmax of mean logits.
    LogitsCe,
    /// Largest wrong-class mean logit minus the true-class mean logit.
    #[default]
    Linear,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::EotCe, Objective::SoftmaxCe, Objective::LogitsCe, Objective::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Objective::EotCe => "eot_ce",
            Objective::SoftmaxCe => "softmax_ce",
            Objective::LogitsCe => "logits_ce",
            Objective::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Heavy-ball momentum; `momentum = 0` is plain (signed) PGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
    /// Aggregated momentum with one velocity per damping constant.
    Aggmo { dampings: Vec<f64> },
}

impl Optimizer {
    /// `mu_b = 1 - 0.1^(b-1)` for `b = 1..=B`.
    pub fn aggmo(b: usize) -> Self {
        Optimizer::Aggmo { dampings: (0..b).map(|i| 1.0 - 0.1f64.powi(i as i32)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(momentum) => {
                Err(Error::Config(format!("sgd momentum {momentum} outside [0, 1)")))
            }
            Optimizer::Adam { beta1, beta2 } if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) => {
                Err(Error::Config("adam betas must lie in [0, 1)".into()))
            }
            Optimizer::Aggmo { dampings } => {
                if dampings.is_empty() || dampings.iter().any(|m| !(0.0..1.0).contains(m)) {
                    return Err(Error::Config("aggmo needs damping constants in [0, 1)".into()));
                }
                for (i, a) in dampings.iter().enumerate() {
                    if dampings[i + 1..].contains(a) {
                        return Err(Error::Config("aggmo damping constants must be distinct".into()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn buffers(&self) -> usize {
        match self {
            Optimizer::Sgd { .. } => 1,
            Optimizer::Adam { .. } => 2,
            Optimizer::Aggmo { dampings } => dampings.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    #[default]
    Constant,
    /// Multiply the step by `factor` at each milestone (fractions of `T`).
    Piecewise { milestones: Vec<f64>, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Base step size; `None` means `epsilon / 4`.
    pub step_size: Option<f64>,
    pub schedule: StepSchedule,
    pub n_attack: usize,
    pub objective: Objective,
    /// Targeted linear loss against the strongest wrong class at the
    /// random start (or `target` when set).
    pub targeted: bool,
    pub target: Option<usize>,
    /// Residual-branch gradient scale in `(0, 1]`.
    pub sgm_scale: f64,
    pub linbp: bool,
    pub optimizer: Optimizer,
    pub momentum_boosting: bool,
    pub mb_decay: f64,
    pub fixed_perm: bool,
    pub signed: bool,
    pub gradient_mode: GradientMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::strong(8.0 / 255.0)
    }
}

impl AttackConfig {
    /// Linear loss, skip-gradient scale 0.5, AggMo with six velocities,
    /// fixed permutation, signed steps.
    pub fn strong(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            steps: 200,
            step_size: None,
            schedule: StepSchedule::Constant,
            n_attack: 10,
            objective: Objective::Linear,
            targeted: false,
            target: None,
            sgm_scale: 0.5,
            linbp: false,
            optimizer: Optimizer::aggmo(6),
            momentum_boosting: false,
            mb_decay: 1.0,
            fixed_perm: true,
            signed: true,
            gradient_mode: GradientMode::Exact,
        }
    }

    /// Expectation over transformation with cross-entropy and plain signed
    /// PGD, each sample drawing its own ordering.
    pub fn eot_baseline(epsilon: f64) -> Self {
        AttackConfig {
            objective: Objective::EotCe,
            sgm_scale: 1.0,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            fixed_perm: false,
            ..AttackConfig::strong(epsilon)
        }
    }

    /// Attack used inside adversarial training: 50 steps of size `epsilon / 8`.
    pub fn training() -> Self {
        let eps = 8.0 / 255.0;
        AttackConfig { steps: 50, step_size: Some(eps / 8.0), ..AttackConfig::strong(eps) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.n_attack == 0 {
            return Err(Error::Config("n_attack must be at least 1".into()));
        }
        if !(self.sgm_scale > 0.0 && self.sgm_scale <= 1.0) {
            return Err(Error::Config(format!("sgm_scale {} outside (0, 1]", self.sgm_scale)));
        }
        if (self.targeted || self.target.is_some()) && self.objective != Objective::Linear {
            return Err(Error::Config("targeted attacks use the linear objective".into()));
        }
        if self.step_size.is_some_and(|s| !(s >= 0.0)) || self.mb_decay < 0.0 {
            return Err(Error::Config("step size and momentum-boosting decay must be non-negative".into()));
        }
        if let StepSchedule::Piecewise { milestones, factor } = &self.schedule {
            if milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(*factor > 0.0) {
                return Err(Error::Config("piecewise schedule needs milestones in [0, 1] and a positive factor".into()));
            }
        }
        self.optimizer.validate()
    }

    /// Step size at iteration `t` (0-based).
    pub fn step_at(&self, t: usize) -> f64 {
        let base = self.step_size.unwrap_or(self.epsilon / 4.0);
        match &self.schedule {
            StepSchedule::Constant => base,
            StepSchedule::Piecewise { milestones, factor } => {
                let frac = t as f64 / self.steps.max(1) as f64;
                let passed = milestones.iter().filter(|&&m| frac >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }

    fn forward_opts(&self) -> ForwardOpts {
        ForwardOpts {
            train: false,
            sgm_scale: (self.sgm_scale != 1.0).then_some(self.sgm_scale),
            linbp: self.linbp,
        }
    }

    /// Short label for the enabled transfer modifiers, e.g. `sgm+aggmo`.
    pub fn modifier_label(&self) -> String {
        let mut parts = Vec::new();
        if self.sgm_scale != 1.0 {
            parts.push("sgm".to_string());
        }
        if self.linbp {
            parts.push("linbp".into());
        }
        if self.targeted || self.target.is_some() {
            parts.push("tg".into());
        }
        if self.momentum_boosting {
            parts.push("mb".into());
        }
        match &self.optimizer {
            Optimizer::Aggmo { dampings } => parts.push(format!("aggmo{}", dampings.len())),
            Optimizer::Adam { .. } => parts.push("adam".into()),
            Optimizer::Sgd { momentum } if *momentum > 0.0 => parts.push(format!("mom{momentum}")),
            Optimizer::Sgd { .. } => {}
        }
        if !self.fixed_perm {
            parts.push("randperm".into());
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Strongest wrong class of a mean-logit row.
pub fn competitor(mean_logits: &[f64], y: usize) -> usize {
    let mut best = None;
    for (j, &v) in mean_logits.iter().enumerate() {
        if j != y && best.map_or(true, |(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j).expect("at least two classes")
}

fn mean_rows<T: Float>(m: &Tensor<T>) -> Vec<f64> {
    let (n, c) = (m.shape()[0], m.shape()[1]);
    let mut acc = vec![0.0; c];
    for row in m.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(|a| a / n as f64).collect()
}

/// Objective on `[n, C]` per-sample logits. For the linear loss `j` is the
/// competitor class; `None` picks the strongest wrong class of the mean.
pub fn objective_var<T: Float>(logits: &Var<T>, y: usize, objective: Objective, j: Option<usize>) -> Result<Var<T>> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if y >= c {
        return Err(Error::Input(format!("label {y} out of range for {c} classes")));
    }
    if j.is_some_and(|j| j >= c || j == y) {
        return Err(Error::Input(format!("competitor class {j:?} invalid for label {y}")));
    }
    Ok(match objective {
        Objective::EotCe => logits.log_softmax_rows().pick_rows(&vec![y; n]).mean_all().neg(),
        Objective::SoftmaxCe => {
            // -log mean_i p_i[y], via log-sum-exp of the per-sample log-probs.
            let lp = logits.log_softmax_rows().pick_rows(&vec![y; n]).reshape(&[1, n]);
            let lse = lp.pick_rows(&[0]).sub(&lp.log_softmax_rows().pick_rows(&[0]));
            lse.add_scalar(-(n as f64).ln()).sum_all().neg()
        }
        Objective::LogitsCe => logits.mean_axis0().reshape(&[1, c]).log_softmax_rows().pick_rows(&[y]).sum_all().neg(),
        Objective::Linear => {
            let mean = logits.mean_axis0();
            let j = j.unwrap_or_else(|| competitor(&mean_rows(logits.value()), y));
            let mut w = Tensor::zeros(&[c]);
            w.data_mut()[j] = T::one();
            w.data_mut()[y] = -T::one();
            mean.dot_const(&w)
        }
    })
}

/// Objective value of `[n, C]` logit samples (the attacker maximizes it).
pub fn objective_value(logits: &Tensor<f64>, y: usize, objective: Objective, target: Option<usize>) -> Result<f64> {
    if logits.ndim() != 2 || logits.shape()[0] == 0 {
        return Err(Error::Input("objective needs a non-empty [n, C] logit matrix".into()));
    }
    Ok(objective_var(&Var::constant(logits.clone()), y, objective, target)?.value().data()[0])
}

/// `mu * prev + g / ||g||_1`; a zero gradient leaves `mu * prev`.
pub fn momentum_boost(prev: &Tensor<f32>, grad: &Tensor<f32>, mu: f64) -> Tensor<f32> {
    let l1: f64 = grad.data().iter().map(|v| v.abs() as f64).sum();
    let mu = mu as f32;
    if l1 == 0.0 {
        return prev.scale(mu);
    }
    let inv = (1.0 / l1) as f32;
    prev.zip_map(grad, |p, g| mu * p + g * inv)
}

/// Bounds `[lo, hi]` in `f32` that never leave the exact `epsilon` ball
/// around `x` or the unit interval.
fn ball_bounds(x: f32, eps: f64) -> (f32, f32) {
    let xd = x as f64;
    let mut lo = (xd - eps) as f32;
    if (lo as f64) < xd - eps {
        lo = next_toward(lo, f32::INFINITY);
    }
    let mut hi = (xd + eps) as f32;
    if (hi as f64) > xd + eps {
        hi = next_toward(hi, f32::NEG_INFINITY);
    }
    (lo.max(0.0), hi.min(1.0))
}

fn next_toward(v: f32, dir: f32) -> f32 {
    if v == 0.0 {
        let tiny = f32::from_bits(1);
        return if dir > 0.0 { tiny } else { -tiny };
    }
    let bits = v.to_bits();
    let up = (dir > v) == (v > 0.0);
    f32::from_bits(if up { bits + 1 } else { bits - 1 })
}

/// Clamp `x_adv - x` to `[-epsilon, epsilon]`, then into `[0, 1]`.
pub fn project(x_adv: &Tensor<f32>, x: &Tensor<f32>, epsilon: f64) -> Tensor<f32> {
    x_adv.zip_map(x, |a, xv| {
        let (lo, hi) = ball_bounds(xv, epsilon);
        if hi < lo {
            // Only when x itself lies outside [0, 1].
            return xv.clamp(0.0, 1.0);
        }
        a.clamp(lo, hi)
    })
}

/// Per-input optimizer state.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub x: Tensor<f32>,
    pub x_adv: Tensor<f32>,
    pub velocities: Vec<Tensor<f32>>,
    pub mb_accum: Tensor<f32>,
    pub step_index: usize,
}

impl AttackState {
    pub fn new(x: Tensor<f32>, x_adv: Tensor<f32>, optimizer: &Optimizer) -> Self {
        let zeros = Tensor::zeros(x.shape());
        AttackState {
            velocities: vec![zeros.clone(); optimizer.buffers()],
            mb_accum: zeros,
            x,
            x_adv,
            step_index: 0,
        }
    }

    /// Random start `clip(x + U[-eps, eps], 0, 1)`.
    pub fn random_start(x: Tensor<f32>, epsilon: f64, optimizer: &Optimizer, rng: &mut Rng) -> Self {
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.gen_range(-epsilon..=epsilon) as f32).collect();
        let noisy = x.zip_map(&Tensor::new(x.shape(), noise), |v, u| v + u);
        let x_adv = project(&noisy, &x, epsilon);
        AttackState::new(x, x_adv, optimizer)
    }

    pub fn delta(&self) -> Tensor<f32> {
        self.x_adv.zip_map(&self.x, |a, b| a - b)
    }
}

/// One AggMo update: `v_b <- mu_b v_b + g`, `x <- x + gamma / B * sum_b v_b`.
pub fn aggmo_step(state: &mut AttackState, g: &Tensor<f32>, gamma: f64, dampings: &[f64]) {
    for (v, &mu) in state.velocities.iter_mut().zip(dampings) {
        let mu = mu as f32;
        *v = v.zip_map(g, |vv, gv| mu * vv + gv);
    }
    let scale = (gamma / dampings.len() as f64) as f32;
    let mut sum = Tensor::zeros(g.shape());
    for v in &state.velocities {
        sum.add_assign(v);
    }
    state.x_adv = state.x_adv.zip_map(&sum, |x, s| x + scale * s);
    state.step_index += 1;
}

/// Heavy-ball update `v <- mu v + g`, `x <- x + gamma v`.
pub fn momentum_step(state: &mut AttackState, g: &Tensor<f32>, gamma: f64, mu: f64) {
    let (mu, gamma) = (mu as f32, gamma as f32);
    state.velocities[0] = state.velocities[0].zip_map(g, |v, gv| mu * v + gv);
    state.x_adv = state.x_adv.zip_map(&state.velocities[0], |x, v| x + gamma * v);
    state.step_index += 1;
}

fn adam_step(state: &mut AttackState, g: &Tensor<f32>, gamma: f64, b1: f64, b2: f64) {
    let t = state.step_index as i32 + 1;
    let (c1, c2) = ((1.0 - b1.powi(t)) as f32, (1.0 - b2.powi(t)) as f32);
    let (b1, b2, gamma) = (b1 as f32, b2 as f32, gamma as f32);
    state.velocities[0] = state.velocities[0].zip_map(g, |m, gv| b1 * m + (1.0 - b1) * gv);
    state.velocities[1] = state.velocities[1].zip_map(g, |v, gv| b2 * v + (1.0 - b2) * gv * gv);
    let step = state.velocities[0].zip_map(&state.velocities[1], |m, v| (m / c1) / ((v / c2).sqrt() + 1e-8));
    state.x_adv = state.x_adv.zip_map(&step, |x, s| x + gamma * s);
    state.step_index += 1;
}

/// Applies one optimizer step with the (possibly signed / boosted)
/// gradient, then projects.
pub fn optimizer_step(state: &mut AttackState, grad: &Tensor<f32>, cfg: &AttackConfig) {
    let mut g = grad.clone();
    if cfg.momentum_boosting {
        state.mb_accum = momentum_boost(&state.mb_accum, &g, cfg.mb_decay);
        g = state.mb_accum.clone();
    }
    if cfg.signed {
        g = g.signum();
    }
    let gamma = cfg.step_at(state.step_index);
    match &cfg.optimizer {
        Optimizer::Sgd { momentum } => momentum_step(state, &g, gamma, *momentum),
        Optimizer::Adam { beta1, beta2 } => adam_step(state, &g, gamma, *beta1, *beta2),
        Optimizer::Aggmo { dampings } => aggmo_step(state, &g, gamma, dampings),
    }
    state.x_adv = project(&state.x_adv, &state.x, cfg.epsilon);
}

/// Everything that shapes a gradient besides the input.
#[derive(Clone, Copy)]
pub struct GradContext<'a> {
    pub objective: Objective,
    pub opts: ForwardOpts,
    pub mode: GradientMode,
    pub surrogates: Option<&'a SurrogateSet>,
}

impl<'a> GradContext<'a> {
    pub fn from_config(cfg: &AttackConfig, surrogates: Option<&'a SurrogateSet>) -> Self {
        GradContext { objective: cfg.objective, opts: cfg.forward_opts(), mode: cfg.gradient_mode, surrogates }
    }

    pub fn plain(objective: Objective) -> Self {
        GradContext { objective, opts: ForwardOpts::eval(), mode: GradientMode::Exact, surrogates: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradOutput {
    /// Gradient of the objective (unsigned).
    pub grad: Tensor<f32>,
    /// Single-sample gradients whose mean is `grad`.
    pub per_sample: Vec<Tensor<f32>>,
    pub loss: f64,
    /// `[n, C]` per-sample logits.
    pub logits: Tensor<f32>,
    /// Competitor class used by the linear objective.
    pub competitor: Option<usize>,
}

/// Gradients of the objective for several inputs at once. Input `i` is
/// evaluated under the chains `params[i]`; every sample gets its own input
/// leaf, so `n * dL/dx_ij` is the single-sample gradient of sample `j`.
pub fn objective_grads(
    model: &(impl Classifier + ?Sized),
    xs: &[Tensor<f32>],
    ys: &[usize],
    params: &[Vec<TransformParams>],
    competitors: &[Option<usize>],
    ctx: &GradContext<'_>,
) -> Result<Vec<GradOutput>> {
    assert!(xs.len() == ys.len() && xs.len() == params.len() && xs.len() == competitors.len());
    let mut leaves = Vec::with_capacity(xs.len());
    let mut chains = Vec::new();
    for (x, ps) in xs.iter().zip(params) {
        model.check_input(x.shape())?;
        if ps.is_empty() {
            return Err(Error::Parameter("at least one transform sample per input".into()));
        }
        let mut own = Vec::with_capacity(ps.len());
        for p in ps {
            let leaf = Var::leaf(x.clone());
            chains.push(bpda::apply_chain_mode(&leaf, p, ctx.mode, ctx.surrogates)?);
            own.push(leaf);
        }
        leaves.push(own);
    }
    let logits = model.logits_var(&Var::stack(&chains), ctx.opts)?;
    let mut total: Option<Var<f32>> = None;
    let mut parts = Vec::with_capacity(xs.len());
    let mut row = 0;
    for (i, ps) in params.iter().enumerate() {
        let n = ps.len();
        let li = logits.narrow(0, row, n);
        row += n;
        let j = match (ctx.objective, competitors[i]) {
            (Objective::Linear, None) => Some(competitor(&mean_rows(li.value()), ys[i])),
            (Objective::Linear, j) => j,
            _ => None,
        };
        let loss = objective_var(&li, ys[i], ctx.objective, j)?;
        parts.push((loss.value().data()[0] as f64, li.value().clone(), j));
        total = Some(match total {
            Some(t) => t.add(&loss),
            None => loss,
        });
    }
    let grads = total.expect("non-empty batch").backward();
    Ok(leaves
        .iter()
        .zip(parts)
        .map(|(own, (loss, logits, competitor))| {
            let n = own.len() as f32;
            let per: Vec<Tensor<f32>> = own.iter().map(|l| grads.wrt(l)).collect();
            let mut grad = Tensor::zeros(per[0].shape());
            for g in &per {
                grad.add_assign(g);
            }
            GradOutput { grad, per_sample: per.iter().map(|g| g.scale(n)).collect(), loss, logits, competitor }
        })
        .collect())
}

/// Gradient estimate for one input: draws `n_attack` chains from `rng`
/// and differentiates the configured objective.
pub fn grad_estimate(
    model: &(impl Classifier + ?Sized),
    x: &Tensor<f32>,
    y: usize,
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    rng: &mut Rng,
    surrogates: Option<&SurrogateSet>,
) -> Result<GradOutput> {
    cfg.validate()?;
    let params = defense.sample(rng, cfg.n_attack, cfg.fixed_perm)?;
    let mut out = objective_grads(
        model,
        std::slice::from_ref(x),
        &[y],
        &[params],
        &[cfg.target],
        &GradContext::from_config(cfg, surrogates),
    )?;
    let mut o = out.pop().expect("one input");
    if cfg.signed {
        o.grad = o.grad.signum();
    }
    Ok(o)
}

/// Extra knobs for a PGD run.
#[derive(Clone, Default)]
pub struct RunOptions<'a> {
    pub surrogates: Option<&'a SurrogateSet>,
    /// Steps after which the iterate is recorded (0 = random start).
    pub snapshot_steps: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub x_adv: Tensor<f32>,
    /// `(step, [B, C, H, W])` iterates for each requested snapshot.
    pub snapshots: Vec<(usize, Tensor<f32>)>,
}

fn pick_target(
    model: &(impl Classifier + ?Sized),
    x_adv: &Tensor<f32>,
    y: usize,
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<usize> {
    let params = defense.sample(rng, cfg.n_attack, cfg.fixed_perm)?;
    let logits = model.predict(&crate::defense::transformed_copies(x_adv, &params)?);
    Ok(competitor(&mean_rows(&logits), y))
}

/// PGD with random start over a `[B, C, H, W]` batch. Input `i` uses the
/// stream `(seed, i)`, so results do not depend on internal chunking.
pub fn pgd_run(
    model: &(impl Classifier + ?Sized),
    xs: &Tensor<f32>,
    ys: &[usize],
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    seed: u64,
    opts: &RunOptions<'_>,
) -> Result<AttackRun> {
    cfg.validate()?;
    defense.validate()?;
    model.check_input(xs.shape())?;
    if xs.ndim() != 4 || xs.shape()[0] != ys.len() {
        return Err(Error::Input(format!("{} labels for image batch {:?}", ys.len(), xs.shape())));
    }
    if cfg.gradient_mode != GradientMode::Exact || !defense.is_differentiable() {
        bpda::check_surrogates(&defense.specs, cfg.gradient_mode, opts.surrogates)?;
    }
    let b = ys.len();
    let chunk = (128 / cfg.n_attack).max(1);
    let ctx = GradContext::from_config(cfg, opts.surrogates);
    let mut out: Vec<Tensor<f32>> = Vec::with_capacity(b);
    let mut snaps: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(b); opts.snapshot_steps.len()];
    let mut start = 0;
    while start < b {
        let end = (start + chunk).min(b);
        let mut rngs: Vec<Rng> = (start..end).map(|i| rng::stream(seed, &[i as u64])).collect();
        let mut states: Vec<AttackState> = (start..end)
            .zip(rngs.iter_mut())
            .map(|(i, r)| AttackState::random_start(xs.index0(i), cfg.epsilon, &cfg.optimizer, r))
            .collect();
        let mut targets: Vec<Option<usize>> = vec![cfg.target; end - start];
        if cfg.targeted && cfg.target.is_none() {
            for (k, st) in states.iter().enumerate() {
                let mut r = rng::stream(seed, &[(start + k) as u64, rng::tag("target")]);
                targets[k] = Some(pick_target(model, &st.x_adv, ys[start + k], defense, cfg, &mut r)?);
            }
        }
        let record = |t: usize, states: &[AttackState], snaps: &mut Vec<Vec<Tensor<f32>>>| {
            for (s, &step) in opts.snapshot_steps.iter().enumerate() {
                if step == t {
                    snaps[s].extend(states.iter().map(|st| st.x_adv.clone()));
                }
            }
        };
        record(0, &states, &mut snaps);
        for t in 0..cfg.steps {
            let params = rngs
                .iter_mut()
                .map(|r| defense.sample(r, cfg.n_attack, cfg.fixed_perm))
                .collect::<Result<Vec<_>>>()?;
            let x_advs: Vec<Tensor<f32>> = states.iter().map(|s| s.x_adv.clone()).collect();
            let grads = objective_grads(model, &x_advs, &ys[start..end], &params, &targets, &ctx)?;
            for (st, g) in states.iter_mut().zip(&grads) {
                optimizer_step(st, &g.grad, cfg);
            }
            record(t + 1, &states, &mut snaps);
        }
        out.extend(states.into_iter().map(|s| s.x_adv));
        start = end;
    }
    let snapshots = opts
        .snapshot_steps
        .iter()
        .zip(snaps)
        .filter(|(_, v)| v.len() == b)
        .map(|(&s, v)| (s, Tensor::stack(&v)))
        .collect();
    Ok(AttackRun { x_adv: Tensor::stack(&out), snapshots })
}

/// Adversarial examples for a batch; see [`pgd_run`].
pub fn pgd_batch(
    model: &(impl Classifier + ?Sized),
    xs: &Tensor<f32>,
    ys: &[usize],
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    Ok(pgd_run(model, xs, ys, defense, cfg, seed, &RunOptions::default())?.x_adv)
}

/// Single-input PGD drawing all randomness from `rng`.
pub fn pgd_attack(
    model: &(impl Classifier + ?Sized),
    x: &Tensor<f32>,
    y: usize,
    defense: &DefenseConfig,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let seed = rng.gen::<u64>();
    let xs = Tensor::stack(std::slice::from_ref(x));
    Ok(pgd_batch(model, &xs, &[y], defense, cfg, seed)?.index0(0))
}
