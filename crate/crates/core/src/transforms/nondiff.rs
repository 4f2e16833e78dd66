//! Forward-only contrast transforms (no gradient path).

use rand::Rng as _;

use super::TransformKind;
use crate::rng;
use crate::tensor::{Float, Tensor};

pub(super) fn apply<T: Float>(kind: TransformKind, x: &Tensor<T>, alpha: f64, seed: u64) -> Tensor<T> {
    let mut rng = rng::stream(seed, &[]);
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let v = x.to_f64_vec();
    let mut out = Vec::with_capacity(v.len());
    match kind {
        TransformKind::HistogramEqualization => {
            let bins = alpha.round().max(2.0) as usize;
            for plane in v.chunks(h * w) {
                out.extend(equalize(plane, bins));
            }
        }
        TransformKind::AdaptiveHistogram => {
            let tiles = alpha.round().clamp(1.0, 8.0) as usize;
            let clip = rng.gen_range(0.02..0.1);
            for plane in v.chunks(h * w) {
                out.extend(clahe(plane, h, w, tiles, clip));
            }
        }
        TransformKind::ContrastStretching => {
            let lo_p = if alpha > 0.0 { rng.gen_range(0.0..=alpha) } else { 0.0 };
            let hi_p = 1.0 - if alpha > 0.0 { rng.gen_range(0.0..=alpha) } else { 0.0 };
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let (lo, hi) = (quantile(&sorted, lo_p), quantile(&sorted, hi_p));
            if hi - lo > 1e-9 {
                out.extend(v.iter().map(|&p| ((p - lo) / (hi - lo)).clamp(0.0, 1.0)));
            } else {
                out.extend_from_slice(&v);
            }
        }
        _ => unreachable!("differentiable kinds are dispatched elsewhere"),
    }
    debug_assert_eq!(out.len(), c * h * w);
    Tensor::from_f64(x.shape(), &out)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Normalised CDF evaluated at bin centres.
fn cdf(hist: &[f64]) -> Vec<f64> {
    let total: f64 = hist.iter().sum();
    let mut acc = 0.0;
    hist.iter()
        .map(|&c| {
            acc += c;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Piecewise-linear lookup of a per-bin mapping at value `v`.
fn lookup(map: &[f64], v: f64) -> f64 {
    let bins = map.len();
    let pos = v.clamp(0.0, 1.0) * bins as f64 - 0.5;
    if pos <= 0.0 {
        return map[0];
    }
    let i = pos.floor() as usize;
    if i + 1 >= bins {
        return map[bins - 1];
    }
    let f = pos - i as f64;
    map[i] * (1.0 - f) + map[i + 1] * f
}

fn equalize(plane: &[f64], bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    for &p in plane {
        hist[bin_of(p, bins)] += 1.0;
    }
    let map = cdf(&hist);
    plane.iter().map(|&p| lookup(&map, p)).collect()
}

/// Contrast-limited adaptive equalisation: per-tile clipped histograms,
/// bilinearly blended between tile centres.
fn clahe(plane: &[f64], h: usize, w: usize, tiles: usize, clip: f64) -> Vec<f64> {
    const BINS: usize = 32;
    let ty = |i: usize| (i * tiles / h).min(tiles - 1);
    let tx = |j: usize| (j * tiles / w).min(tiles - 1);
    let mut hists = vec![vec![0.0; BINS]; tiles * tiles];
    for i in 0..h {
        for j in 0..w {
            hists[ty(i) * tiles + tx(j)][bin_of(plane[i * w + j], BINS)] += 1.0;
        }
    }
    let maps: Vec<Vec<f64>> = hists
        .into_iter()
        .map(|mut hist| {
            let total: f64 = hist.iter().sum();
            let limit = (clip * total).max(1.0);
            let excess: f64 = hist.iter().map(|&c| (c - limit).max(0.0)).sum();
            for c in hist.iter_mut() {
                *c = c.min(limit) + excess / BINS as f64;
            }
            cdf(&hist)
        })
        .collect();
    let centre = |t: usize, n: usize| (t as f64 + 0.5) * n as f64 / tiles as f64 - 0.5;
    let locate = |p: f64, n: usize| {
        let pos = (p + 0.5) * tiles as f64 / n as f64 - 0.5;
        let t0 = pos.floor().clamp(0.0, (tiles - 1) as f64) as usize;
        let t1 = (t0 + 1).min(tiles - 1);
        let f = if t1 == t0 {
            0.0
        } else {
            ((p - centre(t0, n)) / (centre(t1, n) - centre(t0, n))).clamp(0.0, 1.0)
        };
        (t0, t1, f)
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (y0, y1, fy) = locate(i as f64, h);
        for j in 0..w {
            let (x0, x1, fx) = locate(j as f64, w);
            let p = plane[i * w + j];
            let m = |a: usize, b: usize| lookup(&maps[a * tiles + b], p);
            let top = m(y0, x0) * (1.0 - fx) + m(y0, x1) * fx;
            let bottom = m(y1, x0) * (1.0 - fx) + m(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}
