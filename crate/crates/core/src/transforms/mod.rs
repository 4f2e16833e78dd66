//! Image transformations, their parameter distributions, sampling and
//! composition.
//!
//! Images are `[C, H, W]` tensors in `[0, 1]`. Every transform is a pure
//! function of the input, a strength `alpha` in the kind's native units and
//! a per-application seed drawn at sampling time, so a sampled
//! [`TransformParams`] fully determines the output. Outputs are clamped to
//! `[0, 1]` and keep the input shape.

mod catalog;
mod color;
mod fft;
mod filters;
mod jpeg;
mod kinds;
mod nondiff;
mod smooth;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub use catalog::{transform_catalog, StrengthAxis};
pub use smooth::{smooth_mod, smooth_mod_scalar, smooth_round, smooth_round_scalar};

/// The transform groups of the catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Noise,
    Blur,
    Color,
    Edge,
    Compression,
    Geometric,
    Stylization,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Noise,
        Group::Blur,
        Group::Color,
        Group::Edge,
        Group::Compression,
        Group::Geometric,
        Group::Stylization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Noise => "noise",
            Group::Blur => "blur",
            Group::Color => "color",
            Group::Edge => "edge",
            Group::Compression => "compression",
            Group::Geometric => "geometric",
            Group::Stylization => "stylization",
        }
    }
}

macro_rules! kinds {
    ($($variant:ident => $name:literal,)*) => {
        /// Every implemented transform. `Identity` is a utility kind used by
        /// tests and surrogate sanity checks; it is not part of the catalog.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum TransformKind {
            $($variant,)*
        }

        impl TransformKind {
            pub const ALL: &'static [TransformKind] = &[$(TransformKind::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(TransformKind::$variant => $name,)*
                }
            }
        }

        impl FromStr for TransformKind {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(TransformKind::$variant),)*
                    _ => Err(Error::Config(format!("unknown transform kind `{s}`"))),
                }
            }
        }
    };
}

kinds! {
    Identity => "identity",
    Erase => "erase",
    GaussianNoise => "gaussian-noise",
    Pepper => "pepper",
    PoissonNoise => "poisson-noise",
    Salt => "salt",
    SpeckleNoise => "speckle-noise",
    UniformNoise => "uniform-noise",
    BoxBlur => "box-blur",
    GaussianBlur => "gaussian-blur",
    MedianBlur => "median-blur",
    MotionBlur => "motion-blur",
    Hsv => "hsv",
    Lab => "lab",
    Xyz => "xyz",
    Yuv => "yuv",
    GrayMix => "gray-mix",
    GrayPartialMix => "gray-partial-mix",
    TwoChannelGray => "two-channel-gray",
    OneChannelPartialGray => "one-channel-partial-gray",
    Laplacian => "laplacian",
    Sobel => "sobel",
    Jpeg => "jpeg",
    ColorPrecision => "color-precision-reduction",
    FftPerturbation => "fft-perturbation",
    Affine => "affine",
    Crop => "crop",
    HFlip => "hflip",
    VFlip => "vflip",
    Swirl => "swirl",
    ColorJitter => "color-jitter",
    Gamma => "gamma",
    Sharpen => "sharpen",
    Solarize => "solarize",
    HistogramEqualization => "histogram-equalization",
    AdaptiveHistogram => "adaptive-histogram",
    ContrastStretching => "contrast-stretching",
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for TransformKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TransformKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl TransformKind {
    pub fn group(self) -> Group {
        catalog::group_of(self)
    }

    pub fn is_differentiable(self) -> bool {
        !matches!(
            self,
            TransformKind::HistogramEqualization
                | TransformKind::AdaptiveHistogram
                | TransformKind::ContrastStretching
        )
    }

    /// Strength axis in native units, or `None` for kinds without a
    /// strength parameter.
    pub fn strength_axis(self) -> Option<StrengthAxis> {
        catalog::axis_of(self)
    }

    /// Whether the transform mixes colour channels and therefore needs
    /// three-channel input.
    pub fn needs_rgb(self) -> bool {
        matches!(
            self,
            TransformKind::Hsv
                | TransformKind::Lab
                | TransformKind::Xyz
                | TransformKind::Yuv
                | TransformKind::GrayMix
                | TransformKind::GrayPartialMix
                | TransformKind::TwoChannelGray
                | TransformKind::OneChannelPartialGray
                | TransformKind::Jpeg
                | TransformKind::ColorJitter
        )
    }
}

/// Distribution of the strength `alpha`, in the kind's native units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum StrengthDist {
    Uniform { lo: f64, hi: f64 },
    /// Normal draw clipped into `[lo, hi]`.
    Normal { mean: f64, std: f64, lo: f64, hi: f64 },
}

impl StrengthDist {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            StrengthDist::Uniform { lo, hi } | StrengthDist::Normal { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            StrengthDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            }
            StrengthDist::Normal { mean, std, lo, hi } => {
                let v = if std > 0.0 {
                    Normal::new(mean, std).expect("positive std").sample(rng)
                } else {
                    mean
                };
                v.clamp(lo, hi)
            }
        }
    }
}

/// Which of a spec's two hyperparameters the tuner controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Probability,
    Strength,
}

/// One configured transform: kind, apply probability and strength
/// distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub group: Group,
    pub apply_prob: f64,
    pub strength: Option<StrengthDist>,
    pub differentiable: bool,
    pub tune: TuneMode,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    apply_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strength: Option<StrengthDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tune: Option<TuneMode>,
}

impl TryFrom<SpecRepr> for TransformSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        let mut spec = TransformSpec::default_for(r.kind);
        if let Some(p) = r.apply_prob {
            spec.apply_prob = p;
        }
        if r.strength.is_some() {
            spec.strength = r.strength;
        }
        if let Some(t) = r.tune {
            spec.tune = t;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl From<TransformSpec> for SpecRepr {
    fn from(s: TransformSpec) -> Self {
        SpecRepr {
            kind: s.kind,
            apply_prob: Some(s.apply_prob),
            strength: s.strength,
            tune: Some(s.tune),
        }
    }
}

impl TransformSpec {
    /// Catalog default: kinds with a strength tune it and are always
    /// applied; the rest tune their apply probability, starting at 0.5.
    pub fn default_for(kind: TransformKind) -> Self {
        let axis = kind.strength_axis();
        TransformSpec {
            kind,
            group: kind.group(),
            apply_prob: if axis.is_some() { 1.0 } else { 0.5 },
            strength: axis.map(|a| StrengthDist::Uniform {
                lo: a.weak.min(a.strong),
                hi: a.weak.max(a.strong),
            }),
            differentiable: kind.is_differentiable(),
            tune: if axis.is_some() {
                TuneMode::Strength
            } else {
                TuneMode::Probability
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!(
                "{}: apply_prob {} outside [0, 1]",
                self.kind, self.apply_prob
            )));
        }
        if self.group != self.kind.group() || self.differentiable != self.kind.is_differentiable() {
            return Err(Error::Config(format!("{}: group/differentiable flags do not match the kind", self.kind)));
        }
        match (self.kind.strength_axis(), &self.strength) {
            (None, Some(_)) => {
                return Err(Error::Config(format!("{} takes no strength", self.kind)));
            }
            (Some(_), None) => {
                return Err(Error::Config(format!("{} needs a strength distribution", self.kind)));
            }
            (Some(axis), Some(d)) => {
                let (lo, hi) = d.bounds();
                if !(lo <= hi) || lo < axis.valid.0 || hi > axis.valid.1 {
                    return Err(Error::Config(format!(
                        "{}: strength bounds [{lo}, {hi}] outside valid range [{}, {}]",
                        self.kind, axis.valid.0, axis.valid.1
                    )));
                }
                if let StrengthDist::Normal { std, .. } = d {
                    if !(*std >= 0.0) {
                        return Err(Error::Config(format!("{}: negative strength std", self.kind)));
                    }
                }
            }
            (None, None) => {}
        }
        if self.tune == TuneMode::Strength && self.strength.is_none() {
            return Err(Error::Config(format!("{} cannot tune strength", self.kind)));
        }
        Ok(())
    }

    /// The tuned coordinate of this spec in `[0, 1]`.
    pub fn tuned_value(&self) -> f64 {
        match self.tune {
            TuneMode::Probability => self.apply_prob,
            TuneMode::Strength => {
                let axis = self.kind.strength_axis().expect("validated");
                let (lo, hi) = self.strength.expect("validated").bounds();
                let far = if axis.strong >= axis.weak { hi } else { lo };
                axis.to_unit(far)
            }
        }
    }

    /// Returns a copy with the tuned coordinate set to `v ∈ [0, 1]`.
    ///
    /// Strength tuning sets the range to run from the weak end of the axis
    /// to `weak + v (strong - weak)`.
    pub fn with_tuned_value(&self, v: f64) -> Result<TransformSpec> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("tuning value {v} outside [0, 1]")));
        }
        let mut out = self.clone();
        match self.tune {
            TuneMode::Probability => out.apply_prob = v,
            TuneMode::Strength => {
                let axis = self.kind.strength_axis().expect("validated");
                let a = axis.from_unit(v);
                out.strength = Some(StrengthDist::Uniform {
                    lo: axis.weak.min(a),
                    hi: axis.weak.max(a),
                });
            }
        }
        Ok(out)
    }
}

/// One sampled realisation of the defense randomness: the ordered kinds,
/// whether each is applied, its strength and its private seed.
///
/// Kinds without a strength carry `alpha = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub perm: Vec<TransformKind>,
    pub apply_flags: Vec<bool>,
    pub strengths: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl TransformParams {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// The applied steps as `(kind, alpha, seed)`.
    pub fn applied(&self) -> impl Iterator<Item = (TransformKind, f64, u64)> + '_ {
        (0..self.perm.len())
            .filter(|&i| self.apply_flags[i])
            .map(|i| (self.perm[i], self.strengths[i], self.seeds[i]))
    }
}

fn draw_step(spec: &TransformSpec, rng: &mut Rng) -> (bool, f64, u64) {
    let apply = rng.gen_bool(spec.apply_prob);
    let alpha = spec.strength.map(|d| d.sample(rng)).unwrap_or(0.0);
    (apply, alpha, rng.gen())
}

/// Draws `n` chains of length `s` from `specs`.
///
/// With `fixed_perm` one ordering is drawn and shared by all samples while
/// apply flags and strengths stay independent per sample.
pub fn sample_params(
    specs: &[TransformSpec],
    s: usize,
    rng: &mut Rng,
    n: usize,
    fixed_perm: bool,
) -> Result<Vec<TransformParams>> {
    let k = specs.len();
    if s == 0 || s > k {
        return Err(Error::Config(format!("chain length S={s} must lie in [1, K={k}]")));
    }
    let shared: Option<Vec<usize>> = fixed_perm.then(|| index::sample(rng, k, s).into_vec());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let order = match &shared {
            Some(o) => o.clone(),
            None => index::sample(rng, k, s).into_vec(),
        };
        let mut p = TransformParams {
            perm: Vec::with_capacity(s),
            apply_flags: Vec::with_capacity(s),
            strengths: Vec::with_capacity(s),
            seeds: Vec::with_capacity(s),
        };
        for &i in &order {
            let (apply, alpha, seed) = draw_step(&specs[i], rng);
            p.perm.push(specs[i].kind);
            p.apply_flags.push(apply);
            p.strengths.push(alpha);
            p.seeds.push(seed);
        }
        out.push(p);
    }
    Ok(out)
}

fn check_input<T: Float>(kind: TransformKind, x: &Tensor<T>, alpha: f64) -> Result<()> {
    if x.ndim() != 3 {
        return Err(Error::Input(format!("{kind}: expected a [C, H, W] image, got {:?}", x.shape())));
    }
    if kind.needs_rgb() && x.shape()[0] != 3 {
        return Err(Error::Input(format!("{kind}: needs 3 channels, got {}", x.shape()[0])));
    }
    if let Some(axis) = kind.strength_axis() {
        if !(alpha >= axis.valid.0 && alpha <= axis.valid.1) {
            return Err(Error::Parameter(format!(
                "{kind}: strength {alpha} outside [{}, {}]",
                axis.valid.0, axis.valid.1
            )));
        }
    }
    Ok(())
}

/// Applies a single transform.
///
/// Non-differentiable kinds refuse inputs that require a gradient; their
/// forward value is available through [`forward_value`].
pub fn apply_transform<T: Float>(kind: TransformKind, x: &Var<T>, alpha: f64, seed: u64) -> Result<Var<T>> {
    check_input(kind, x.value(), alpha)?;
    if !kind.is_differentiable() {
        if x.requires_grad() {
            return Err(Error::NonDifferentiable(kind));
        }
        return Ok(Var::constant(nondiff::apply(kind, x.value(), alpha, seed)));
    }
    Ok(kinds::apply(kind, x, alpha, seed))
}

/// Forward-only evaluation of any kind on a plain tensor.
pub fn forward_value<T: Float>(kind: TransformKind, x: &Tensor<T>, alpha: f64, seed: u64) -> Result<Tensor<T>> {
    check_input(kind, x, alpha)?;
    if kind.is_differentiable() {
        Ok(kinds::apply(kind, &Var::constant(x.clone()), alpha, seed).value().clone())
    } else {
        Ok(nondiff::apply(kind, x, alpha, seed))
    }
}

/// `t(x; θ)`: the applied transforms in chain order.
pub fn apply_chain<T: Float>(x: &Var<T>, params: &TransformParams) -> Result<Var<T>> {
    let mut cur = x.clone();
    for (kind, alpha, seed) in params.applied() {
        cur = apply_transform(kind, &cur, alpha, seed)?;
    }
    Ok(cur)
}

/// Forward-only chain on a plain tensor; accepts non-differentiable kinds.
pub fn apply_chain_value<T: Float>(x: &Tensor<T>, params: &TransformParams) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for (kind, alpha, seed) in params.applied() {
        cur = forward_value(kind, &cur, alpha, seed)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests;
