use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use crate::rng::Rng;

use super::*;
use crate::gradcheck;

fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
}

fn params_for(kind: TransformKind, alpha: f64, seed: u64) -> TransformParams {
    TransformParams {
        perm: vec![kind],
        apply_flags: vec![true],
        strengths: vec![alpha],
        seeds: vec![seed],
    }
}

fn default_alpha(kind: TransformKind, rng: &mut Rng) -> f64 {
    TransformSpec::default_for(kind).strength.map(|d| d.sample(rng)).unwrap_or(0.0)
}

#[test]
fn smooth_round_oracles() {
    assert_eq!(smooth_round_scalar(2.0), 2.0);
    assert_eq!(smooth_round_scalar(0.25), 0.015625);
    // ties go to even: round(0.5) = 0, round(1.5) = 2
    assert_eq!(smooth_round_scalar(0.5), 0.125);
    assert_eq!(smooth_round_scalar(1.5), 2.0 - 0.125);

    let h = 1e-6;
    let fd = (smooth_round_scalar(0.25 + h) - smooth_round_scalar(0.25 - h)) / (2.0 * h);
    let x: Var<f64> = Var::leaf(Tensor::from_f64(&[1], &[0.25]));
    let g = smooth_round(&x).sum_all().backward().wrt(&x).data()[0];
    assert!((fd - 0.1875).abs() < 1e-8);
    assert!((g - fd).abs() < 1e-8);
}

#[test]
fn smooth_round_max_deviation_on_unit_interval() {
    let worst = (0..100_000)
        .map(|i| i as f64 / 100_000.0)
        .map(|x| (smooth_round_scalar(x) - x.round_ties_even()).abs())
        .fold(0.0, f64::max);
    assert_eq!(worst, 0.125);
}

#[test]
fn smooth_mod_oracles() {
    // exact reference: fractional part and its period
    let exact = |x: f64| x - x.floor();
    assert_eq!(exact(1.25), 0.25);
    assert_eq!(exact(2.25), exact(1.25));
    // round(1.25) = 1, r = 0.25 > 0 so the first branch: r - r^3
    assert_eq!(smooth_mod_scalar(1.25, 1.0).unwrap(), 0.25 - 0.015625);
    // r = -0.25 takes the second branch: r - r^3 + 1
    assert_eq!(smooth_mod_scalar(0.75, 1.0).unwrap(), -0.25 + 0.015625 + 1.0);
    assert_eq!(smooth_mod_scalar(7.5, 6.0).unwrap(), 6.0 * (0.25 - 0.015625));
    for k in -5..=5 {
        assert_eq!(smooth_round_scalar(k as f64), k as f64);
    }
    assert!(matches!(smooth_mod_scalar(1.0, 0.0), Err(Error::Parameter(_))));
    let x: Var<f64> = Var::leaf(Tensor::from_f64(&[1], &[0.3]));
    assert!(smooth_mod(&x, -1.0).is_err());
}

#[test]
fn smooth_mod_gradient_matches_finite_difference() {
    let x = Tensor::from_f64(&[5], &[0.3, 1.1, -0.7, 2.9, 4.2]);
    let r = gradcheck::check_f64(&|v| smooth_mod(v, 1.7).unwrap(), &x, 1e-6, 1);
    assert!(r.rel_error < 1e-6, "{}", r.rel_error);
}

#[test]
fn catalog_covers_seven_groups() {
    let cat = transform_catalog();
    assert!(cat.len() >= 33);
    let differentiable = cat.iter().filter(|s| s.differentiable).count();
    assert_eq!(differentiable, 33);
    assert_eq!(cat.len() - differentiable, 3);
    let mut per_group: HashMap<Group, usize> = HashMap::new();
    for s in cat.iter().filter(|s| s.differentiable) {
        *per_group.entry(s.group).or_default() += 1;
        s.validate().unwrap();
    }
    let expect = [
        (Group::Noise, 7),
        (Group::Blur, 4),
        (Group::Color, 8),
        (Group::Edge, 2),
        (Group::Compression, 3),
        (Group::Geometric, 5),
        (Group::Stylization, 4),
    ];
    for (g, n) in expect {
        assert_eq!(per_group[&g], n, "{}", g.name());
    }
    assert!(!cat.iter().any(|s| s.kind == TransformKind::Identity));
}

#[test]
fn kind_names_round_trip() {
    for &k in TransformKind::ALL {
        assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
    }
    assert!("seam-carving".parse::<TransformKind>().is_err());
}

#[test]
fn every_differentiable_kind_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(11);
    for spec in transform_catalog().iter().filter(|s| s.differentiable) {
        for trial in 0..2 {
            let alpha = default_alpha(spec.kind, &mut rng);
            let seed: u64 = rng.gen();
            let x = image(100 + trial, 8, 8);
            let kind = spec.kind;
            let f = move |v: &Var<f64>| apply_transform(kind, v, alpha, seed).unwrap();
            let r = gradcheck::check_f64(&f, &x, 1e-6, trial);
            assert!(r.rel_error < 1e-5, "{kind} alpha={alpha}: rel error {}", r.rel_error);
            let f32_path = move |v: &Var<f32>| apply_transform(kind, v, alpha, seed).unwrap();
            let r32 = gradcheck::check::<f32, f64>(&f32_path, &f, &x, 1e-6, trial);
            assert!(r32.rel_error < 1e-3, "{kind} (f32) alpha={alpha}: rel error {}", r32.rel_error);
        }
    }
}

#[test]
fn outputs_stay_in_range_with_shape() {
    let mut rng = Rng::seed_from_u64(5);
    for spec in transform_catalog() {
        for i in 0..100 {
            let (h, w) = (4 + i % 9, 5 + (i * 7) % 11);
            let x = image(i as u64, h, w);
            let alpha = default_alpha(spec.kind, &mut rng);
            let y = forward_value(spec.kind, &x, alpha, rng.gen()).unwrap();
            assert_eq!(y.shape(), x.shape(), "{}", spec.kind);
            assert!(
                y.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "{} left the unit range",
                spec.kind
            );
        }
    }
}

#[test]
fn extreme_strengths_stay_in_range() {
    for spec in transform_catalog() {
        if let Some(axis) = spec.kind.strength_axis() {
            for alpha in [axis.valid.0, axis.valid.1] {
                let y = forward_value(spec.kind, &image(3, 9, 10), alpha, 17).unwrap();
                assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", spec.kind);
            }
        }
    }
}

#[test]
fn sample_params_degenerate_cases() {
    let mut rng = Rng::seed_from_u64(0);
    let mut spec = TransformSpec::default_for(TransformKind::GaussianNoise);
    spec.apply_prob = 1.0;
    let p = sample_params(std::slice::from_ref(&spec), 1, &mut rng, 4, false).unwrap();
    for q in &p {
        assert_eq!(q.perm, vec![TransformKind::GaussianNoise]);
        assert_eq!(q.apply_flags, vec![true]);
        assert!((0.0..=0.15).contains(&q.strengths[0]));
    }

    let specs: Vec<TransformSpec> = transform_catalog()
        .into_iter()
        .take(6)
        .map(|mut s| {
            s.apply_prob = 0.0;
            s
        })
        .collect();
    let x = Var::constant(image(1, 8, 8));
    for q in sample_params(&specs, 4, &mut rng, 20, false).unwrap() {
        assert!(q.apply_flags.iter().all(|f| !f));
        assert_eq!(apply_chain(&x, &q).unwrap().value(), x.value());
    }
    assert!(matches!(sample_params(&specs, 7, &mut rng, 1, false), Err(Error::Config(_))));
    assert!(sample_params(&specs, 0, &mut rng, 1, false).is_err());
}

fn five_specs() -> Vec<TransformSpec> {
    [
        TransformKind::HFlip,
        TransformKind::VFlip,
        TransformKind::GaussianNoise,
        TransformKind::Gamma,
        TransformKind::Sobel,
    ]
    .into_iter()
    .map(TransformSpec::default_for)
    .collect()
}

#[test]
fn permutation_membership_frequency() {
    let specs = five_specs();
    let mut rng = Rng::seed_from_u64(42);
    let draws = sample_params(&specs, 3, &mut rng, 100_000, false).unwrap();
    for s in &specs {
        let hits = draws.iter().filter(|p| p.perm.contains(&s.kind)).count();
        let freq = hits as f64 / draws.len() as f64;
        assert!((freq - 0.6).abs() < 0.01, "{}: {freq}", s.kind);
    }
}

#[test]
fn random_permutations_are_uniform() {
    let specs = five_specs();
    let mut rng = Rng::seed_from_u64(7);
    let draws = sample_params(&specs, 3, &mut rng, 10_000, false).unwrap();
    let mut counts: HashMap<Vec<TransformKind>, usize> = HashMap::new();
    for p in &draws {
        let mut seen = p.perm.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 3, "perm entries must be distinct");
        *counts.entry(p.perm.clone()).or_default() += 1;
    }
    // |Perm(5, 3)| = 60 ordered arrangements
    assert_eq!(counts.len(), 60);
    let expected = draws.len() as f64 / 60.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 1% point of chi-square with 59 degrees of freedom
    assert!(chi2 < 87.166, "chi2 = {chi2}");
}

#[test]
fn fixed_permutation_is_shared_but_flags_vary() {
    let mut specs = five_specs();
    for s in specs.iter_mut() {
        s.apply_prob = 0.5;
    }
    let mut rng = Rng::seed_from_u64(3);
    let draws = sample_params(&specs, 3, &mut rng, 50, true).unwrap();
    assert!(draws.iter().all(|p| p.perm == draws[0].perm));
    assert!(draws.iter().any(|p| p.apply_flags != draws[0].apply_flags));
    let strengths: Vec<f64> = draws
        .iter()
        .filter_map(|p| p.perm.iter().position(|&k| k == TransformKind::GaussianNoise).map(|i| p.strengths[i]))
        .collect();
    if strengths.len() > 1 {
        assert!(strengths.iter().any(|&s| s != strengths[0]));
    }
}

#[test]
fn hflip_is_an_involution() {
    let x = Var::constant(image(2, 7, 9));
    let p = params_for(TransformKind::HFlip, 0.0, 0);
    let once = apply_chain(&x, &p).unwrap();
    assert_ne!(once.value(), x.value());
    assert_eq!(apply_chain(&once, &p).unwrap().value(), x.value());
}

#[test]
fn erase_and_flip_do_not_commute() {
    let (h, w) = (8, 8);
    let x = image(4, h, w);
    let flip = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| {
        let (c, y, xx) = (i / (h * w), (i / w) % h, i % w);
        t.data()[(c * h + y) * w + (w - 1 - xx)]
    });
    // pick an erase draw whose box is not mirror symmetric
    let (seed, mask) = (0u64..)
        .map(|s| {
            let ones = Tensor::full(&[3, h, w], 1.0);
            (s, forward_value(TransformKind::Erase, &ones, 0.4, s).unwrap())
        })
        .find(|(_, m)| flip(m) != *m && m.data().contains(&0.0))
        .unwrap();
    let erase_then_flip = flip(&x.zip_map(&mask, |a, m| a * m));
    let flip_then_erase = flip(&x).zip_map(&mask, |a, m| a * m);

    let chain = |first, second: TransformKind| TransformParams {
        perm: vec![first, second],
        apply_flags: vec![true, true],
        strengths: vec![if first == TransformKind::Erase { 0.4 } else { 0.0 }, if second == TransformKind::Erase { 0.4 } else { 0.0 }],
        seeds: vec![seed, seed],
    };
    let a = apply_chain_value(&x, &chain(TransformKind::Erase, TransformKind::HFlip)).unwrap();
    let b = apply_chain_value(&x, &chain(TransformKind::HFlip, TransformKind::Erase)).unwrap();
    assert_eq!(a, erase_then_flip);
    assert_eq!(b, flip_then_erase);
    assert_ne!(a, b);
}

#[test]
fn solarize_at_one_is_identity() {
    let x = image(8, 6, 6);
    assert_eq!(forward_value(TransformKind::Solarize, &x, 1.0, 0).unwrap(), x);
}

#[test]
fn weak_end_of_strength_axis_is_near_identity() {
    let x = image(9, 8, 8);
    for kind in [
        TransformKind::GaussianNoise,
        TransformKind::BoxBlur,
        TransformKind::GaussianBlur,
        TransformKind::MedianBlur,
        TransformKind::MotionBlur,
        TransformKind::Affine,
        TransformKind::Crop,
        TransformKind::Swirl,
        TransformKind::Sharpen,
        TransformKind::Gamma,
        TransformKind::FftPerturbation,
        TransformKind::Yuv,
        TransformKind::Erase,
    ] {
        let weak = kind.strength_axis().unwrap().weak;
        let y = forward_value(kind, &x, weak, 123).unwrap();
        let err = y.zip_map(&x, |a, b| a - b).max_abs();
        assert!(err < 1e-3, "{kind}: {err}");
    }
}

#[test]
fn non_differentiable_kinds_refuse_gradients() {
    let x = image(1, 8, 8);
    for kind in [
        TransformKind::HistogramEqualization,
        TransformKind::AdaptiveHistogram,
        TransformKind::ContrastStretching,
    ] {
        let leaf = Var::leaf(x.clone());
        match apply_transform(kind, &leaf, kind.strength_axis().unwrap().strong, 1) {
            Err(Error::NonDifferentiable(k)) => assert_eq!(k, kind),
            other => panic!("expected a gradient-path error, got {other:?}"),
        }
        let constant = Var::constant(x.clone());
        assert!(apply_transform(kind, &constant, 16.0_f64.min(kind.strength_axis().unwrap().valid.1), 1).is_ok());
    }
}

#[test]
fn histogram_equalization_flattens_ranks() {
    let x = Tensor::from_fn(&[3, 4, 4], |i| (i % 16) as f64 / 40.0);
    let y = forward_value(TransformKind::HistogramEqualization, &x, 256.0, 0).unwrap();
    let top = y.data().iter().cloned().fold(0.0, f64::max);
    let bottom = y.data().iter().cloned().fold(1.0, f64::min);
    assert!(top - bottom > 0.85, "spread {bottom}..{top}");
    for i in 0..x.len() {
        for j in 0..x.len() {
            if x.data()[i] < x.data()[j] {
                assert!(y.data()[i] <= y.data()[j]);
            }
        }
    }
}

#[test]
fn out_of_range_strength_is_a_parameter_error() {
    let x = Var::constant(image(1, 8, 8));
    let p = params_for(TransformKind::Jpeg, 150.0, 0);
    assert!(matches!(apply_chain(&x, &p), Err(Error::Parameter(_))));
}

#[test]
fn colour_kinds_need_three_channels() {
    let x: Var<f64> = Var::constant(Tensor::full(&[1, 8, 8], 0.5));
    assert!(matches!(apply_transform(TransformKind::Hsv, &x, 0.1, 0), Err(Error::Input(_))));
    assert!(apply_transform(TransformKind::GaussianBlur, &x, 1.0, 0).is_ok());
}

#[test]
fn spec_validation_and_serde() {
    let mut s = TransformSpec::default_for(TransformKind::Jpeg);
    s.apply_prob = 1.5;
    assert!(s.validate().is_err());
    let mut s = TransformSpec::default_for(TransformKind::Jpeg);
    s.strength = Some(StrengthDist::Uniform { lo: 0.0, hi: 100.0 });
    assert!(s.validate().is_err());
    let mut s = TransformSpec::default_for(TransformKind::HFlip);
    s.tune = TuneMode::Strength;
    assert!(s.validate().is_err());

    let text = r#"{"kind":"gaussian-noise","strength":{"dist":"normal","mean":0.05,"std":0.02,"lo":0.0,"hi":0.1}}"#;
    let spec: TransformSpec = serde_json::from_str(text).unwrap();
    assert_eq!(spec.apply_prob, 1.0);
    assert_eq!(spec.tune, TuneMode::Strength);
    let back: TransformSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
    assert!(serde_json::from_str::<TransformSpec>(r#"{"kind":"jpeg","apply_prob":2.0}"#).is_err());
}

proptest! {
    #[test]
    fn tuning_map_round_trips(v in 0.0f64..=1.0, idx in 0usize..36) {
        let spec = transform_catalog()[idx].clone();
        let tuned = spec.with_tuned_value(v).unwrap();
        tuned.validate().unwrap();
        prop_assert!((tuned.tuned_value() - v).abs() < 1e-9);
        if spec.tune == TuneMode::Strength {
            prop_assert_eq!(tuned.apply_prob, spec.apply_prob);
        } else {
            prop_assert_eq!(tuned.strength, spec.strength);
        }
    }

    #[test]
    fn chains_preserve_range_and_shape(seed in any::<u64>(), s in 1usize..5) {
        let specs: Vec<TransformSpec> = transform_catalog();
        let mut rng = Rng::seed_from_u64(seed);
        let p = sample_params(&specs, s, &mut rng, 1, false).unwrap().remove(0);
        let x = image(seed, 8, 8);
        let y = apply_chain_value(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (k, a) in p.perm.iter().zip(&p.strengths) {
            if let Some(ax) = k.strength_axis() {
                prop_assert!(*a >= ax.valid.0 && *a <= ax.valid.1);
            }
        }
    }
}
