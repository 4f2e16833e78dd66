//! Per-kind groups, strength axes and default specs.

use super::{Group, TransformKind, TransformSpec};

/// Native-unit strength axis of a kind.
///
/// `weak` is the (near-)identity end, `strong` the default upper strength;
/// tuning maps `v ∈ [0, 1]` linearly from `weak` to `strong`. `valid` is the
/// range the implementation accepts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrengthAxis {
    pub unit: &'static str,
    pub valid: (f64, f64),
    pub weak: f64,
    pub strong: f64,
}

impl StrengthAxis {
    const fn new(unit: &'static str, valid: (f64, f64), weak: f64, strong: f64) -> Self {
        StrengthAxis { unit, valid, weak, strong }
    }

    pub fn from_unit(&self, v: f64) -> f64 {
        self.weak + v * (self.strong - self.weak)
    }

    pub fn to_unit(&self, a: f64) -> f64 {
        (a - self.weak) / (self.strong - self.weak)
    }
}

pub(super) fn group_of(kind: TransformKind) -> Group {
    use TransformKind::*;
    match kind {
        Identity | Erase | GaussianNoise | Pepper | PoissonNoise | Salt | SpeckleNoise | UniformNoise => {
            Group::Noise
        }
        BoxBlur | GaussianBlur | MedianBlur | MotionBlur => Group::Blur,
        Hsv | Lab | Xyz | Yuv | GrayMix | GrayPartialMix | TwoChannelGray | OneChannelPartialGray => Group::Color,
        Laplacian | Sobel => Group::Edge,
        Jpeg | ColorPrecision | FftPerturbation => Group::Compression,
        Affine | Crop | HFlip | VFlip | Swirl => Group::Geometric,
        ColorJitter | Gamma | Sharpen | Solarize | HistogramEqualization | AdaptiveHistogram
        | ContrastStretching => Group::Stylization,
    }
}

pub(super) fn axis_of(kind: TransformKind) -> Option<StrengthAxis> {
    use TransformKind::*;
    let a = StrengthAxis::new;
    Some(match kind {
        Identity | GrayMix | GrayPartialMix | TwoChannelGray | OneChannelPartialGray | Laplacian | Sobel
        | HFlip | VFlip => return None,
        Erase => a("box side fraction", (0.0, 0.8), 0.0, 0.4),
        GaussianNoise => a("noise std", (0.0, 1.0), 0.0, 0.15),
        Pepper => a("drop probability", (0.0, 1.0), 0.0, 0.1),
        PoissonNoise => a("noise scale", (0.0, 1.0), 0.0, 0.2),
        Salt => a("salt probability", (0.0, 1.0), 0.0, 0.1),
        SpeckleNoise => a("noise std", (0.0, 1.0), 0.0, 0.3),
        UniformNoise => a("noise half-width", (0.0, 1.0), 0.0, 0.15),
        BoxBlur => a("kernel radius (px)", (0.0, 4.0), 0.0, 2.0),
        GaussianBlur => a("sigma (px)", (0.0, 4.0), 0.0, 1.5),
        MedianBlur => a("window radius (px)", (0.0, 3.0), 0.0, 1.5),
        MotionBlur => a("streak length (px)", (0.0, 12.0), 0.0, 5.0),
        Hsv => a("channel offset half-width", (0.0, 1.0), 0.0, 0.1),
        Lab => a("offset half-width / 100", (0.0, 1.0), 0.0, 0.1),
        Xyz => a("channel offset half-width", (0.0, 1.0), 0.0, 0.1),
        Yuv => a("channel offset half-width", (0.0, 1.0), 0.0, 0.1),
        Jpeg => a("quality", (1.0, 100.0), 100.0, 30.0),
        ColorPrecision => a("levels per channel", (2.0, 256.0), 256.0, 8.0),
        FftPerturbation => a("drop probability", (0.0, 1.0), 0.0, 0.3),
        Affine => a("max rotation (deg)", (0.0, 45.0), 0.0, 15.0),
        Crop => a("kept side fraction", (0.3, 1.0), 1.0, 0.7),
        Swirl => a("swirl strength", (0.0, 5.0), 0.0, 2.0),
        ColorJitter => a("jitter half-width", (0.0, 1.0), 0.0, 0.3),
        Gamma => a("max |log gamma|", (0.0, 2.0), 0.0, 0.5),
        Sharpen => a("sharpen amount", (0.0, 3.0), 0.0, 1.0),
        Solarize => a("threshold", (0.0, 1.0), 1.0, 0.5),
        HistogramEqualization => a("bins", (2.0, 256.0), 256.0, 16.0),
        AdaptiveHistogram => a("tiles per side", (1.0, 8.0), 1.0, 4.0),
        ContrastStretching => a("percentile half-width", (0.0, 0.5), 0.0, 0.1),
    })
}

/// Default specs for every catalog kind, grouped in order. The last three
/// entries are the forward-only kinds used for BPDA experiments.
pub fn transform_catalog() -> Vec<TransformSpec> {
    TransformKind::ALL
        .iter()
        .copied()
        .filter(|&k| k != TransformKind::Identity)
        .map(TransformSpec::default_for)
        .collect()
}
