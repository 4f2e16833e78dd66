//! Builders for the constant linear maps behind most transforms.

use crate::graph::SparseMap;

/// Spatial correlation with a `kh x kw` kernel (odd sizes, centred),
/// applied to every channel with replicated borders.
pub(super) fn filter_map(c: usize, h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> SparseMap {
    assert_eq!(kernel.len(), kh * kw);
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut map = SparseMap::new(c * h * w, &[c, h, w]);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(kh * kw);
    for ch in 0..c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                row.clear();
                for dy in -ry..=ry {
                    for dx in -rx..=rx {
                        let k = kernel[((dy + ry) as usize) * kw + (dx + rx) as usize];
                        if k == 0.0 {
                            continue;
                        }
                        let y = (i + dy).clamp(0, h as isize - 1) as usize;
                        let x = (j + dx).clamp(0, w as isize - 1) as usize;
                        push_merged(&mut row, (ch * h + y) * w + x, k);
                    }
                }
                map.push_row(row.iter().copied());
            }
        }
    }
    map
}

fn push_merged(row: &mut Vec<(usize, f64)>, idx: usize, wgt: f64) {
    if let Some(e) = row.iter_mut().find(|e| e.0 == idx) {
        e.1 += wgt;
    } else {
        row.push((idx, wgt));
    }
}

/// Bilinear taps for a source position in pixel-centre coordinates; taps
/// outside the image are dropped (zero padding).
fn bilinear_taps(h: usize, w: usize, sy: f64, sx: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    if !sy.is_finite() || !sx.is_finite() {
        return;
    }
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (y, x) = (y0 + dy, x0 + dx);
            let wgt = wy * wx;
            if wgt == 0.0 || y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                continue;
            }
            out.push((y as usize * w + x as usize, wgt));
        }
    }
}

/// Warp where output pixel `(i, j)` samples the source at `src(i, j)`,
/// identical for every channel.
pub(super) fn resample_map(c: usize, h: usize, w: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> SparseMap {
    let mut taps = Vec::with_capacity(4);
    let mut plane: Vec<Vec<(usize, f64)>> = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = src(i as f64, j as f64);
            bilinear_taps(h, w, sy, sx, &mut taps);
            plane.push(taps.clone());
        }
    }
    let mut map = SparseMap::new(c * h * w, &[c, h, w]);
    for ch in 0..c {
        let off = ch * h * w;
        for taps in &plane {
            map.push_row(taps.iter().map(|&(k, wgt)| (off + k, wgt)));
        }
    }
    map
}

/// Per-pixel affine colour map `y = m x + b` on a 3-channel image.
pub(super) fn pixel_affine(h: usize, w: usize, m: [[f64; 3]; 3], b: [f64; 3]) -> SparseMap {
    let hw = h * w;
    let mut map = SparseMap::new(3 * hw, &[3, h, w]);
    let mut bias = Vec::with_capacity(3 * hw);
    for (r, row) in m.iter().enumerate() {
        for p in 0..hw {
            map.push_row((0..3).map(|c| (c * hw + p, row[c])));
            bias.push(b[r]);
        }
    }
    map.with_bias(bias)
}

/// Output element `i` copies input element `src[i]`.
pub(super) fn gather_map(in_len: usize, shape: &[usize], src: &[usize]) -> SparseMap {
    let mut map = SparseMap::new(in_len, shape);
    for &s in src {
        map.push_row([(s, 1.0)]);
    }
    map
}

pub(super) fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a0, a1) = ((j + 1) % 3, (j + 2) % 3);
            let (b0, b1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a0][b0] * m[a1][b1] - m[a0][b1] * m[a1][b0]) / det;
        }
    }
    inv
}

pub(super) fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse3_inverts() {
        let m = [[0.299, 0.587, 0.114], [-0.147, -0.289, 0.436], [0.615, -0.515, -0.100]];
        let inv = inverse3(m);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integer_resample_is_a_permutation() {
        let map = resample_map(1, 3, 4, |i, j| (i, 3.0 - j));
        let x: crate::tensor::Tensor<f64> = crate::tensor::Tensor::from_fn(&[1, 3, 4], |i| i as f64);
        let y = map.apply(&x);
        assert_eq!(y.data()[0], 3.0);
        assert_eq!(y.data()[5], 6.0);
    }
}
