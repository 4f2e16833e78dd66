use super::*;
use crate::graph::Var;
use crate::backbone::ForwardOpts;
use rand::{Rng as _, SeedableRng};

/// Reads the class off the first pixel: image `i` of class `c` has every
/// value equal to `(c + 0.5) / classes`.
struct PixelOracle {
    classes: usize,
}

impl Classifier for PixelOracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn check_input(&self, _: &[usize]) -> Result<()> {
        Ok(())
    }

    fn logits_var(&self, x: &Var<f32>, _: ForwardOpts) -> Result<Var<f32>> {
        Ok(Var::constant(self.predict(x.value())))
    }

    fn predict(&self, xs: &Tensor<f32>) -> Tensor<f32> {
        let n = xs.shape()[0];
        let per = xs.len() / n;
        let c = self.classes;
        let mut out = vec![0f32; n * c];
        for i in 0..n {
            let v = xs.data()[i * per];
            let k = ((v * c as f32) as usize).min(c - 1);
            out[i * c + k] = 1.0;
        }
        Tensor::new(&[n, c], out)
    }
}

fn oracle_inputs(n: usize, classes: usize) -> (Tensor<f32>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let per = 3 * 4 * 4;
    let data = labels.iter().flat_map(|&y| vec![(y as f32 + 0.5) / classes as f32; per]).collect();
    (Tensor::new(&[n, 3, 4, 4], data), labels)
}

fn noisy_defense(std: f64) -> DefenseConfig {
    let mut spec = TransformSpec::default_for(TransformKind::GaussianNoise);
    spec.strength = Some(crate::transforms::StrengthDist::Uniform { lo: std, hi: std });
    DefenseConfig { n_infer: 1, ..DefenseConfig::new(vec![spec], 1) }
}

#[test]
fn overrides_set_nested_keys() {
    let mut v: toml::Value = toml::from_str("[attack]\nsteps = 10\n").unwrap();
    apply_override(&mut v, "attack.steps=200").unwrap();
    apply_override(&mut v, "eval.model=adv").unwrap();
    apply_override(&mut v, "attack.epsilon = 0.0313").unwrap();
    assert_eq!(v["attack"]["steps"].as_integer(), Some(200));
    assert_eq!(v["eval"]["model"].as_str(), Some("adv"));
    assert_eq!(v["attack"]["epsilon"].as_float(), Some(0.0313));
    assert!(apply_override(&mut v, "attack.steps").is_err());
    assert!(apply_override(&mut v, "attack..steps=1").is_err());
    assert!(apply_override(&mut v, "attack.steps.x=1").is_err());
}

#[test]
fn config_round_trips_and_digests_track_changes() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml_with(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    let changed = ExperimentConfig::from_toml_with(&cfg.to_toml(), &["attack.steps=7".into()]).unwrap();
    assert_eq!(changed.attack.steps, 7);
    assert_ne!(changed.digest(), cfg.digest());
    // The attack does not change what the model is.
    assert_eq!(changed.model_digest(ModelChoice::Clean), cfg.model_digest(ModelChoice::Clean));
    assert_ne!(cfg.model_digest(ModelChoice::Clean), cfg.model_digest(ModelChoice::Adv));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(ExperimentConfig::from_toml_with("", &["attack.bogus=1".into()]).is_err());
    assert!(ExperimentConfig::from_toml_with("", &["eval.n_runs=0".into()]).is_err());
    assert!(ExperimentConfig::from_toml_with("", &["arch.image_size=16".into()]).is_err());
    assert!(ExperimentConfig::from_toml_with("seed = ", &[]).is_err());
    let defaults = ExperimentConfig::from_toml_with("", &[]).unwrap();
    assert_eq!(defaults.eval.n_runs, 10);
    assert_eq!(defaults.eval.test_size, 500);
}

#[test]
fn ci_from_runs() {
    let r = EvalResult::from_runs(vec![0.5; 10], String::new());
    assert_eq!(r.mean, 0.5);
    assert_eq!(r.ci_half_width, Some(0.0));
    assert_eq!(EvalResult::from_runs(vec![0.4], String::new()).ci_half_width, None);
    let r = EvalResult::from_runs(vec![0.2, 0.4], String::new());
    let expected = 1.96 * (0.02f64).sqrt() / 2f64.sqrt();
    assert!((r.ci_half_width.unwrap() - expected).abs() < 1e-12);
    let a = EvalResult::from_runs(vec![0.1, 0.12], String::new());
    assert!(a.separated_from(&EvalResult::from_runs(vec![0.5, 0.52], String::new())));
    assert!(!a.separated_from(&EvalResult::from_runs(vec![0.1, 0.13], String::new())));
}

#[test]
fn deterministic_model_has_zero_width_interval() {
    let (xs, ys) = oracle_inputs(12, 4);
    let r = evaluate_with_ci(&PixelOracle { classes: 4 }, &DefenseConfig::none(), &xs, &ys, 10, 3).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.ci_half_width, Some(0.0));
    assert_eq!(r.runs.len(), 10);
}

#[test]
fn interval_covers_a_bernoulli_predictor() {
    // Each input is independently correct with probability 0.7 per run.
    let mut rng = crate::rng::Rng::seed_from_u64(42);
    let mut covered = 0;
    for _ in 0..100 {
        let runs: Vec<f64> = (0..10)
            .map(|_| (0..200).filter(|_| rng.gen_bool(0.7)).count() as f64 / 200.0)
            .collect();
        let r = EvalResult::from_runs(runs, String::new());
        let (lo, hi) = r.interval();
        if lo <= 0.7 && 0.7 <= hi {
            covered += 1;
        }
        assert!((r.mean - 0.7).abs() < 0.05);
    }
    assert!(covered >= 90, "coverage {covered}/100");
}

#[test]
fn at_least_once_accuracy() {
    let oracle = PixelOracle { classes: 4 };
    let (xs, ys) = oracle_inputs(40, 4);
    for m in [1, 5, 20] {
        assert_eq!(at_least_once_eval(&oracle, &DefenseConfig::none(), &xs, &ys, m, 1).unwrap(), 1.0);
    }
    let d = noisy_defense(0.15);
    let single = defense::accuracy(&oracle, &xs, &ys, &d, rng::derive(8, &[0])).unwrap();
    assert_eq!(at_least_once_eval(&oracle, &d, &xs, &ys, 1, 8).unwrap(), single);
    let accs: Vec<f64> = [1, 2, 4, 8, 16].iter().map(|&m| at_least_once_eval(&oracle, &d, &xs, &ys, m, 8).unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[1] <= w[0]), "{accs:?}");
    assert!(accs[4] < accs[0]);
    assert!(at_least_once_eval(&oracle, &d, &xs, &ys, 0, 8).is_err());
}

#[test]
fn preset_variants() {
    let mut cfg = ExperimentConfig { preset: Some(Preset::Table2Desk), ..Default::default() };
    cfg.attack.steps = 17;
    let v = variants(&cfg);
    let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, ["eot_ce", "linear", "linear+sgm+aggmo"]);
    assert!(v.iter().all(|v| v.attack.steps == 17));
    assert_eq!(v[0].attack.objective, Objective::EotCe);
    assert_eq!(v[1].attack.sgm_scale, 1.0);
    assert_eq!(v[2].attack.sgm_scale, 0.5);

    cfg.preset = Some(Preset::SSweep);
    let s: Vec<usize> = variants(&cfg).iter().map(|v| v.defense.s).collect();
    assert_eq!(s, [2, 6, 8]);
    cfg.preset = Some(Preset::Rules);
    assert_eq!(variants(&cfg).len(), 3);
    cfg.preset = Some(Preset::Groups);
    for v in variants(&cfg) {
        v.defense.validate().unwrap();
        assert!(v.defense.specs.iter().all(|s| s.group.name() == v.name));
    }
    cfg.preset = None;
    assert_eq!(variants(&cfg).len(), 1);
}

#[test]
fn archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.adv");
    let a = AdvArchive {
        variant: "main".into(),
        ids: vec!["x0".into(), "x1".into()],
        labels: vec![1, 0],
        seed: 99,
        config_digest: "cfg".into(),
        model_digest: "model".into(),
        images: Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32 / 24.0),
    };
    a.save(&path).unwrap();
    assert_eq!(AdvArchive::load(&path).unwrap(), a);
    std::fs::write(&path, b"junk").unwrap();
    assert!(AdvArchive::load(&path).is_err());
}

#[test]
fn tuned_defense_maps_values() {
    let base = desk_defense();
    let zeros = tuned_defense(&base, &vec![0.0; base.k()]).unwrap();
    for (s, b) in zeros.specs.iter().zip(&base.specs) {
        assert!((s.tuned_value() - 0.0).abs() < 1e-9, "{}", b.kind);
    }
    assert!(tuned_defense(&base, &[0.5]).is_err());
    assert!(tuned_defense(&base, &vec![1.5; base.k()]).is_err());
}

#[test]
fn quantiles_interpolate() {
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    assert!(quantile(&[], 0.5).is_nan());
}
