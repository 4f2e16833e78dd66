//! Acceptance suite. Every criterion prints one PASS/FAIL line with the
//! measured numbers; the process exits non-zero if any criterion fails.
//!
//! Models are trained once per process and shared between criteria.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use rtgauntlet::attack::{self, aggmo_step, momentum_step, objective_grads, GradContext, RunOptions};
use rtgauntlet::backbone::{adv_train, train_clean, ForwardOpts};
use rtgauntlet::bpda::{self, BpdaTrainConfig, Surrogate, SurrogateSet, RECEPTIVE_RADIUS};
use rtgauntlet::data::synthetic;
use rtgauntlet::defense::{self, softmax_f64};
use rtgauntlet::diagnostics::{self, diagnose_batch, median};
use rtgauntlet::gradcheck;
use rtgauntlet::harness::{evaluate_with_ci, Stage};
use rtgauntlet::rng::Rng;
use rtgauntlet::transforms::{apply_chain, apply_transform, transform_catalog, TransformKind as K};
use rtgauntlet::tuner::{tune, TrialPoint, TunerConfig, TunerState};
use rtgauntlet::{
    AdvTrainConfig, AttackConfig, AttackState, Backbone, BackboneArch, Dataset, DefenseConfig, EvalResult,
    Experiment, ExperimentConfig, GradientMode, Objective, Optimizer, Tensor, TrainConfig, TransformSpec, Var,
};

const EPS: f64 = 8.0 / 255.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Shared desk setup

const SIZE: usize = 16;
const CLASSES: usize = 4;

fn desk_arch() -> BackboneArch {
    BackboneArch { widths: vec![8, 16, 32], blocks_per_stage: 2, classes: CLASSES, image_size: SIZE, in_channels: 3 }
}

fn desk_train() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| synthetic(2000, SIZE, CLASSES, 1))
}

fn desk_test() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| synthetic(500, SIZE, CLASSES, 2))
}

fn specs(kinds: &[K]) -> Vec<TransformSpec> {
    kinds.iter().map(|&k| TransformSpec::default_for(k)).collect()
}

/// The main desk defense: fourteen differentiable kinds from five groups.
fn rt_defense() -> DefenseConfig {
    DefenseConfig::new(
        specs(&[
            K::GaussianNoise,
            K::UniformNoise,
            K::SpeckleNoise,
            K::GaussianBlur,
            K::BoxBlur,
            K::ColorJitter,
            K::Gamma,
            K::Hsv,
            K::GrayMix,
            K::Affine,
            K::Crop,
            K::HFlip,
            K::VFlip,
            K::Swirl,
        ]),
        6,
    )
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, ..TrainConfig::default() }
}

fn fit(defense: &DefenseConfig, epochs: usize, seed: u64) -> Backbone {
    let t = Instant::now();
    let mut m = Backbone::new(desk_arch(), seed).expect("arch");
    train_clean(&mut m, desk_train(), &train_cfg(epochs), Some(defense), seed + 1).expect("training");
    eprintln!("  trained model (seed {seed}) in {:.0?}", t.elapsed());
    m
}

fn rt_model() -> &'static Backbone {
    static M: OnceLock<Backbone> = OnceLock::new();
    M.get_or_init(|| fit(&rt_defense(), 20, 0))
}

/// First `n` test images.
fn inputs(n: usize) -> (Tensor<f32>, Vec<usize>) {
    let d = desk_test();
    let idx: Vec<usize> = (0..n).collect();
    (d.batch(&idx), d.labels[..n].to_vec())
}

fn clean_rt_accuracy(model: &Backbone, defense: &DefenseConfig) -> f64 {
    let d = desk_test();
    defense::accuracy(model, &d.images, &d.labels, defense, 77).expect("accuracy")
}

fn attacked(model: &Backbone, defense: &DefenseConfig, cfg: &AttackConfig, n: usize, surrogates: Option<&SurrogateSet>) -> EvalResult {
    let (xs, ys) = inputs(n);
    let t = Instant::now();
    let opts = RunOptions { surrogates, snapshot_steps: Vec::new() };
    let adv = attack::pgd_run(model, &xs, &ys, defense, cfg, 9, &opts).expect("attack").x_adv;
    let r = evaluate_with_ci(model, defense, &adv, &ys, 10, 100).expect("evaluation");
    eprintln!("  attack {} ({} steps) in {:.0?}: {:.3}", label(cfg), cfg.steps, t.elapsed(), r.mean);
    r
}

fn label(cfg: &AttackConfig) -> String {
    format!("{:?}[{}{}]", cfg.objective, cfg.modifier_label(), if cfg.fixed_perm { ",fixed" } else { "" })
}

fn ci(r: &EvalResult) -> String {
    format!("{:.3}±{:.3}", r.mean, r.ci_half_width.unwrap_or(f64::NAN))
}

/// EoT baseline with cross-entropy, 200 steps, n=10.
fn eot_cfg() -> AttackConfig {
    AttackConfig::eot_baseline(EPS)
}

/// Linear loss, SGM and AggMo, 200 steps, n=10.
fn best_cfg() -> AttackConfig {
    AttackConfig::strong(EPS)
}

const ATTACK_INPUTS: usize = 100;

fn eot_result() -> &'static EvalResult {
    static R: OnceLock<EvalResult> = OnceLock::new();
    R.get_or_init(|| attacked(rt_model(), &rt_defense(), &eot_cfg(), ATTACK_INPUTS, None))
}

fn best_result() -> &'static EvalResult {
    static R: OnceLock<EvalResult> = OnceLock::new();
    R.get_or_init(|| attacked(rt_model(), &rt_defense(), &best_cfg(), ATTACK_INPUTS, None))
}

// ---------------------------------------------------------------------------
// 1. Transform gradients

fn c01_transform_gradients() -> Outcome {
    let mut rng = Rng::seed_from_u64(11);
    let mut worst = (0.0f64, String::new());
    let mut kinds = 0;
    for spec in transform_catalog().into_iter().filter(|s| s.differentiable) {
        kinds += 1;
        for trial in 0..20u64 {
            let x = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
            let alpha = spec.strength.map_or(0.0, |d| d.sample(&mut rng));
            let seed: u64 = rng.gen();
            let kind = spec.kind;
            let f32_path = move |v: &Var<f32>| apply_transform(kind, v, alpha, seed).unwrap();
            let f64_path = move |v: &Var<f64>| apply_transform(kind, v, alpha, seed).unwrap();
            let r = gradcheck::check::<f32, f64>(&f32_path, &f64_path, &x, 1e-6, trial);
            if !(r.rel_error <= worst.0) {
                worst = (r.rel_error, format!("{kind} alpha={alpha:.3}"));
            }
        }
    }
    outcome(worst.0 < 1e-3, format!("{kinds} kinds x 20 inputs, worst rel error {:.2e} ({})", worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// 2. Exact-equivalence oracles

fn tiny_arch() -> BackboneArch {
    BackboneArch { widths: vec![4, 8], blocks_per_stage: 1, classes: 3, image_size: 8, in_channels: 3 }
}

fn c02_exact_equivalences() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // (a) AggMo with one buffer against heavy-ball momentum.
    let mut r = Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[3, 8, 8], |_| r.gen_range(0.0f32..1.0));
    let mut a = AttackState::new(x.clone(), x.clone(), &Optimizer::Aggmo { dampings: vec![0.9] });
    let mut b = AttackState::new(x.clone(), x.clone(), &Optimizer::Sgd { momentum: 0.9 });
    let mut same = true;
    for _ in 0..50 {
        let g = Tensor::from_fn(x.shape(), |_| r.gen_range(-1.0f32..1.0)).signum();
        aggmo_step(&mut a, &g, EPS / 8.0, &[0.9]);
        momentum_step(&mut b, &g, EPS / 8.0, 0.9);
        same &= a.x_adv.data().iter().zip(b.x_adv.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    pass &= same;
    notes.push(format!("aggmo(B=1)==heavy-ball: {same}"));

    // (b) All-p=0 chain: the RT scores are the plain softmax.
    let model = Backbone::new(tiny_arch(), 3).expect("arch");
    let mut d = DefenseConfig::new(specs(&[K::GaussianNoise, K::GaussianBlur, K::HFlip]), 2);
    d.specs.iter_mut().for_each(|s| s.apply_prob = 0.0);
    let mut exact = true;
    for i in 0..10u64 {
        let mut rx = Rng::seed_from_u64(100 + i);
        let img = Tensor::from_fn(&[3, 8, 8], |_| rx.gen_range(0.0f32..1.0));
        let plain = model.predict(&img);
        for n in [1, 3, 10] {
            d.n_infer = n;
            let out = defense::predict_scores(&model, &img, &d, &mut Rng::seed_from_u64(i)).expect("predict");
            exact &= out.scores == softmax_f64(plain.data());
        }
    }
    pass &= exact;
    notes.push(format!("identity chain==softmax: {exact}"));

    // (c) Variance against the brute-force estimator.
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rs = Rng::seed_from_u64(seed);
        let n = rs.gen_range(2..12);
        let dim = rs.gen_range(1..200);
        let samples: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::from_fn(&[dim], |_| rs.gen_range(-2.0..2.0))).collect();
        let mut mu = vec![0.0; dim];
        for s in &samples {
            for (m, v) in mu.iter_mut().zip(s.data()) {
                *m += v / n as f64;
            }
        }
        let brute: f64 = samples
            .iter()
            .map(|s| s.data().iter().zip(&mu).map(|(v, m)| (m - v) * (m - v)).sum::<f64>())
            .sum::<f64>()
            / (dim as f64 * (n - 1) as f64);
        worst = worst.max((diagnostics::grad_variance(&samples).unwrap() - brute).abs());
    }
    pass &= worst < 1e-10;
    notes.push(format!("variance vs brute force max diff {worst:.1e}"));

    // (d) Opposite unit signs.
    let v = diagnostics::grad_variance(&[Tensor::full(&[48], 1.0f32), Tensor::full(&[48], -1.0f32)]).unwrap();
    pass &= v == 2.0;
    notes.push(format!("{{+1,-1}} variance {v}"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 3. Feasibility

fn c03_feasibility() -> Outcome {
    let model = Backbone::new(tiny_arch(), 5).expect("arch");
    let data = synthetic(1000, 8, 3, 21);
    let d = DefenseConfig::new(specs(&[K::GaussianNoise, K::GaussianBlur, K::Affine, K::HFlip]), 2);
    let mut notes = Vec::new();
    let mut pass = true;
    for eps in [8.0 / 255.0, 16.0 / 255.0] {
        let cfg = AttackConfig { steps: 5, n_attack: 2, ..AttackConfig::strong(eps) };
        let adv = attack::pgd_batch(&model, &data.images, &data.labels, &d, &cfg, 3).expect("attack");
        let mut max_dev = 0.0f64;
        let mut in_box = true;
        for (a, x) in adv.data().iter().zip(data.images.data()) {
            max_dev = max_dev.max((*a as f64 - *x as f64).abs());
            in_box &= (0.0..=1.0).contains(a);
        }
        let ok = max_dev <= eps && in_box;
        pass &= ok;
        notes.push(format!("eps {:.0}/255: max |d| - eps = {:.1e}, in [0,1]: {in_box}", eps * 255.0, max_dev - eps));
    }
    outcome(pass, format!("1000 inputs; {}", notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 4. Linear-loss unbiasedness

fn c04_linear_unbiased() -> Outcome {
    let model = Backbone::new(tiny_arch(), 8).expect("arch");
    let d = DefenseConfig::new(specs(&[K::GaussianNoise, K::GaussianBlur, K::ColorJitter, K::Affine]), 3);
    let mut worst_f64 = 0.0f64;
    let mut worst_lib = 0.0f64;
    for i in 0..10u64 {
        let mut r = Rng::seed_from_u64(40 + i);
        let x = Tensor::from_fn(&[3, 8, 8], |_| r.gen_range(0.0f32..1.0));
        let (y, j) = (0usize, 1 + (i as usize % 2));
        let params = d.sample(&mut r, 10, false).expect("sample");

        // Oracle in f64: gradient of F_j - F_y on the mean logits ...
        let leaf = Var::leaf(x.cast::<f64>());
        let copies: Vec<Var<f64>> = params.iter().map(|p| apply_chain(&leaf, p).unwrap()).collect();
        let mean = model.logits(&Var::stack(&copies), ForwardOpts::eval()).unwrap().mean_axis0();
        let mut w = Tensor::zeros(&[3]);
        w.data_mut()[j] = 1.0;
        w.data_mut()[y] = -1.0;
        let joint = mean.dot_const(&w).backward().wrt(&leaf);
        // ... against the mean of separately computed single-sample gradients.
        let mut avg = Tensor::<f64>::zeros(x.shape());
        for p in &params {
            let l = Var::leaf(x.cast::<f64>());
            let logit = model.logits(&Var::stack(&[apply_chain(&l, p).unwrap()]), ForwardOpts::eval()).unwrap();
            avg.add_assign(&logit.mean_axis0().dot_const(&w).backward().wrt(&l).scale(0.1));
        }
        let err = avg.zip_map(&joint, |a, b| a - b).norm2() / joint.norm2();
        worst_f64 = worst_f64.max(err);

        // The library estimate with the competitor held fixed.
        let out = objective_grads(&model, &[x.clone()], &[y], &[params], &[Some(j)], &GradContext::plain(Objective::Linear))
            .unwrap()
            .remove(0);
        let mut mean_ps = Tensor::<f32>::zeros(x.shape());
        for g in &out.per_sample {
            mean_ps.add_assign(&g.scale(0.1));
        }
        let lib = mean_ps.zip_map(&out.grad, |a, b| a - b).norm2() / out.grad.norm2();
        worst_lib = worst_lib.max(lib);
    }
    outcome(
        worst_f64 < 1e-6 && worst_lib < 1e-6,
        format!("10 inputs, n=10: f64 oracle rel err {worst_f64:.1e}, library rel err {worst_lib:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Attack ordering

fn c05_attack_ordering() -> Outcome {
    let clean = clean_rt_accuracy(rt_model(), &rt_defense());
    let (eot, best) = (eot_result(), best_result());
    let gap = eot.mean - best.mean;
    outcome(
        clean >= 0.9 && gap >= 0.10 && eot.separated_from(best),
        format!(
            "clean RT {clean:.3}; {ATTACK_INPUTS} inputs, 200 steps, n=10: eot_ce {} vs linear+sgm+aggmo {} (gap {:.1} pts, CIs separated: {})",
            ci(eot),
            ci(best),
            100.0 * gap,
            eot.separated_from(best)
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Variance ordering

fn diag_medians(cfg: &AttackConfig, n_inputs: usize) -> (f64, f64, f64) {
    let (xs, ys) = inputs(n_inputs);
    let stats = diagnose_batch(rt_model(), &xs, &ys, &rt_defense(), cfg, 31, None).expect("diagnose");
    let var: Vec<f64> = stats.iter().map(|s| s.variance).collect();
    let cos: Vec<f64> = stats.iter().map(|s| s.cosine.unwrap_or(f64::NAN)).collect();
    let sm: Vec<f64> = stats.iter().map(|s| s.sign_match).collect();
    (median(&var), median(&cos), median(&sm))
}

fn c06_variance_ordering() -> Outcome {
    let n = 100;
    let eot = diag_medians(&eot_cfg(), n);
    let lin = diag_medians(&AttackConfig { objective: Objective::Linear, ..eot_cfg() }, n);
    outcome(
        lin.0 < eot.0 && lin.1 > eot.1 && lin.2 > eot.2,
        format!(
            "{n} inputs, medians (variance, cosine, sign-match): linear ({:.4}, {:.4}, {:.4}) vs eot_ce ({:.4}, {:.4}, {:.4})",
            lin.0, lin.1, lin.2, eot.0, eot.1, eot.2
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Fixed permutation

fn c07_fixed_permutation() -> Outcome {
    let fixed_cfg = AttackConfig { fixed_perm: true, ..eot_cfg() };
    let fixed = attacked(rt_model(), &rt_defense(), &fixed_cfg, ATTACK_INPUTS, None);
    let random = eot_result();
    let v_fixed = diag_medians(&fixed_cfg, 100).0;
    let v_random = diag_medians(&eot_cfg(), 100).0;
    outcome(
        fixed.mean < random.mean && v_fixed < v_random,
        format!(
            "eot_ce adv acc fixed {} vs random {}; median variance fixed {v_fixed:.4} vs random {v_random:.4}",
            ci(&fixed),
            ci(random)
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. BPDA surrogates

fn surrogate_cfg() -> BpdaTrainConfig {
    BpdaTrainConfig { epochs: 10, max_images: 1000, ..BpdaTrainConfig::default() }
}

fn surrogate(kind: K) -> &'static rtgauntlet::BpdaNet {
    use std::collections::BTreeMap;
    use std::sync::Mutex;
    static NETS: OnceLock<Mutex<BTreeMap<K, &'static rtgauntlet::BpdaNet>>> = OnceLock::new();
    let map = NETS.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = map.lock().unwrap();
    *guard.entry(kind).or_insert_with(|| {
        let t = Instant::now();
        let (net, _) = bpda::train_bpda(&TransformSpec::default_for(kind), desk_train(), &surrogate_cfg(), 5).expect("bpda");
        eprintln!("  surrogate {kind} trained in {:.0?}", t.elapsed());
        Box::leak(Box::new(net))
    })
}

fn surrogate_set(kinds: &[K]) -> SurrogateSet {
    kinds.iter().map(|&k| (k, Surrogate::Net(surrogate(k).clone()))).collect()
}

/// Largest Chebyshev distance from `(pr, pc)` with a non-zero input
/// gradient of output pixel `(pr, pc)`.
fn support_radius(net: &rtgauntlet::BpdaNet, x: &Tensor<f32>, pr: usize, pc: usize) -> usize {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let leaf = Var::leaf(x.index0(0));
    let y = net.apply(&leaf, net_alpha(net.kind)).unwrap();
    let mut seed = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        seed.data_mut()[(c * h + pr) * w + pc] = 1.0;
    }
    let g = y.backward_with(seed).wrt(&leaf);
    let mut reach = 0;
    for c in 0..3 {
        for r in 0..h {
            for cc in 0..w {
                if g.data()[(c * h + r) * w + cc] != 0.0 {
                    reach = reach.max(r.abs_diff(pr).max(cc.abs_diff(pc)));
                }
            }
        }
    }
    reach
}

fn net_alpha(kind: K) -> f64 {
    kind.strength_axis().map_or(0.0, |a| a.strong)
}

fn c08_bpda_surrogates() -> Outcome {
    let kinds = [K::GaussianBlur, K::BoxBlur, K::GaussianNoise, K::UniformNoise];
    let big = synthetic(1, 40, CLASSES, 8).images;
    let held_out = synthetic(200, SIZE, CLASSES, 9);
    let mut pass = true;
    let mut notes = Vec::new();
    for kind in kinds {
        let net = surrogate(kind);
        let spec = TransformSpec::default_for(kind);
        let mse = bpda::surrogate_mse(net, &spec, &held_out, 3).expect("mse");
        let identity = bpda::surrogate_mse(&rtgauntlet::BpdaNet::new(kind, 16, 0), &spec, &held_out, 3).expect("mse");
        let reach = [(20, 20), (5, 33), (0, 0), (39, 12)].iter().map(|&(r, c)| support_radius(net, &big, r, c)).max().unwrap();
        pass &= mse < 0.01 && reach <= RECEPTIVE_RADIUS;
        notes.push(format!("{kind}: mse {mse:.4} (identity {identity:.4}), support radius {reach}"));
    }
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 9. Gradient modes

const C9_INPUTS: usize = 100;

fn c09_gradient_modes() -> Outcome {
    let base = AttackConfig { steps: 50, ..AttackConfig::strong(EPS) };

    let nondiff_kinds = [K::GaussianNoise, K::GaussianBlur, K::ColorJitter, K::HistogramEqualization, K::ContrastStretching];
    let d_nd = DefenseConfig::new(specs(&nondiff_kinds), 3);
    let m_nd = fit(&d_nd, 12, 20);
    let set = surrogate_set(&nondiff_kinds);
    let run = |m: &Backbone, d: &DefenseConfig, mode: GradientMode| {
        attacked(m, d, &AttackConfig { gradient_mode: mode, ..base.clone() }, C9_INPUTS, Some(&set))
    };
    let combo = run(&m_nd, &d_nd, GradientMode::Combo);
    let identity = run(&m_nd, &d_nd, GradientMode::Identity);
    let bpda = run(&m_nd, &d_nd, GradientMode::Bpda);

    let diff_kinds = [K::GaussianNoise, K::GaussianBlur, K::ColorJitter];
    let d_diff = DefenseConfig::new(specs(&diff_kinds), 2);
    let m_diff = fit(&d_diff, 12, 30);
    let exact = run(&m_diff, &d_diff, GradientMode::Exact);
    let bpda_diff = run(&m_diff, &d_diff, GradientMode::Bpda);

    outcome(
        combo.mean < identity.mean && identity.mean < bpda.mean && exact.mean < bpda_diff.mean,
        format!(
            "with 2 non-differentiable kinds: combo {} < identity {} < bpda {}; differentiable-only: exact {} < bpda {}",
            ci(&combo),
            ci(&identity),
            ci(&bpda),
            ci(&exact),
            ci(&bpda_diff)
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Tuner

fn c10_tuner() -> Outcome {
    let target = [0.3, 0.7, 0.55, 0.2];
    let quad = move |v: &[f64]| -> f64 { -v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() };
    // Grid-search oracle on a 0.05 lattice.
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let mut oracle = (f64::NEG_INFINITY, vec![0.0; 4]);
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                for &d in &grid {
                    let v = [a, b, c, d];
                    let q = quad(&v);
                    if q > oracle.0 {
                        oracle = (q, v.to_vec());
                    }
                }
            }
        }
    }
    let cfg = TunerConfig { budget: 60, patience: 60, min_trials: 60, ..TunerConfig::default() };
    let state = tune(4, &cfg, |v| Ok(quad(v)), 7, None, None).expect("tune");
    let best = state.best().expect("a finished trial").values.clone();
    let dist = best.iter().zip(&oracle.1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Stopping rules on scripted objective sequences.
    let scripted = |objs: &[f64], cfg: &TunerConfig| {
        let mut s = TunerState::new(1, cfg);
        let mut i = 0;
        while !s.should_stop() {
            s.record(TrialPoint { trial_id: i, values: vec![0.0], objective: Some(objs[i]), wall_time: 0.0 });
            i += 1;
        }
        i
    };
    let rules = TunerConfig { budget: 50, patience: 5, min_trials: 20, ..TunerConfig::default() };
    let mut late = vec![0.0; 100];
    late[18] = 1.0;
    let rising: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let counts = (scripted(&[1.0; 100], &rules), scripted(&late, &rules), scripted(&rising, &rules));
    outcome(
        state.history.len() <= 60 && dist <= 0.1 && counts == (20, 24, 50),
        format!(
            "{} trials, best {:?} vs grid optimum {:?} (max coordinate error {dist:.3}); stop counts {counts:?} (expected (20, 24, 50))",
            state.history.len(),
            best.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            oracle.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Adversarial training

fn c11_adv_training() -> Outcome {
    let d = rt_defense();
    let mut adv_model = rt_model().clone();
    let inner = AttackConfig { steps: 5, n_attack: 1, step_size: Some(EPS / 2.0), ..AttackConfig::training() };
    let cfg = TrainConfig {
        adv: Some(AdvTrainConfig { attack: inner, pretrain_clean: false, pretrain_epochs: 0 }),
        learning_rate: 0.02,
        ..train_cfg(6)
    };
    let t = Instant::now();
    adv_train(&mut adv_model, desk_train(), &cfg, Some(&d), 40).expect("adversarial training");
    eprintln!("  adversarial training in {:.0?}", t.elapsed());
    let clean_rt = clean_rt_accuracy(rt_model(), &d);
    let clean_adv = clean_rt_accuracy(&adv_model, &d);
    let rt_adv = best_result();
    let advrt_adv = attacked(&adv_model, &d, &best_cfg(), ATTACK_INPUTS, None);
    let gain = advrt_adv.mean - rt_adv.mean;
    outcome(
        gain >= 0.05 && (clean_rt - clean_adv).abs() <= 0.05,
        format!(
            "strong 200-step attack: AdvRT {} vs RT {} (gain {:.1} pts); clean AdvRT {clean_adv:.3} vs RT {clean_rt:.3}",
            ci(&advrt_adv),
            ci(rt_adv),
            100.0 * gain
        ),
    )
}

// ---------------------------------------------------------------------------
// 12. Determinism of the staged pipeline

fn results_without_timestamp(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("results.csv")).expect("results.csv");
    let mut lines = text.lines();
    let comment = lines.next().unwrap_or_default();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let ts = header.iter().position(|&h| h == "timestamp").expect("timestamp column");
    let strip = |line: &str| {
        line.split(',').enumerate().filter(|(i, _)| *i != ts).map(|(_, c)| c).collect::<Vec<_>>().join(",")
    };
    let mut out = vec![comment.to_string(), strip(&header.join(","))];
    out.extend(lines.map(strip));
    out.join("\n")
}

fn c12_determinism() -> Outcome {
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let overrides: Vec<String> = [
        "tuner.budget=2",
        "tuner.min_trials=2",
        "tuner.initial_random=2",
        "tuner.trial_epochs=1",
        "tuner.trial_attack_steps=2",
        "tuner.trial_attack_n=1",
        "tuner.val_samples=6",
        "tuner.finalize=false",
        "bpda.epochs=1",
        "bpda.max_images=16",
        "train.adv.attack.steps=2",
        "train.adv.attack.n_attack=1",
        "train.adv.pretrain_epochs=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut tables = Vec::new();
    for dir in &dirs {
        let cfg = ExperimentConfig::load(&cfg_path, &overrides).expect("config");
        let exp = Experiment::new(cfg, dir.path()).expect("experiment");
        for stage in Stage::ALL {
            if let Err(e) = exp.run(stage) {
                return outcome(false, format!("stage {stage} failed: {e}"));
            }
        }
        tables.push(results_without_timestamp(dir.path()));
    }
    let rows = tables[0].lines().count().saturating_sub(2);
    outcome(
        tables[0] == tables[1] && rows > 0,
        format!("all {} stages run twice; {rows} result rows, identical without timestamps: {}", Stage::ALL.len(), tables[0] == tables[1]),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 12] = [
        ("c01", "transform gradients", c01_transform_gradients),
        ("c02", "exact-equivalence oracles", c02_exact_equivalences),
        ("c03", "feasibility", c03_feasibility),
        ("c04", "linear-loss unbiasedness", c04_linear_unbiased),
        ("c05", "attack ordering", c05_attack_ordering),
        ("c06", "variance ordering", c06_variance_ordering),
        ("c07", "fixed permutation", c07_fixed_permutation),
        ("c08", "bpda surrogates", c08_bpda_surrogates),
        ("c09", "gradient modes", c09_gradient_modes),
        ("c10", "tuner", c10_tuner),
        ("c11", "adversarial training", c11_adv_training),
        ("c12", "determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {id} {name} ({:.0?}): {}", t.elapsed(), o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
