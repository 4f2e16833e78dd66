//! Differentiable JPEG: YCbCr conversion, 8x8 block DCT, quantisation by
//! the standard tables scaled to the requested quality, smooth rounding and
//! the inverse path. Chroma is kept at full resolution.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::filters::inverse3;
use super::smooth::smooth_round;
use crate::graph::{SparseMap, Var};
use crate::tensor::Float;

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17,
    22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78,
    87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

const FWD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

/// libjpeg quality scaling of a base table entry.
pub(super) fn scaled_table(quality: u32, chroma: bool) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let base = if chroma { &CHROMA_Q } else { &LUMA_Q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn basis(u: usize, x: usize) -> f64 {
    let c = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
    0.5 * c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
}

struct Maps {
    encode: Rc<SparseMap>,
    decode: Rc<SparseMap>,
}

/// Encoding map: image in `[0, 1]` to quantised-scale coefficients laid out
/// `[3, Hp, Wp]` by block. Decoding map: coefficients back to the image.
fn build(h: usize, w: usize, quality: u32) -> Maps {
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let hw = h * w;
    let tables = [scaled_table(quality, false), scaled_table(quality, true), scaled_table(quality, true)];
    let shift = [-128.0, 0.0, 0.0];

    let mut enc = SparseMap::new(3 * hw, &[3, hp, wp]);
    let mut enc_bias = Vec::with_capacity(3 * hp * wp);
    let mut acc = vec![0.0; 3 * hw];
    let mut seen = vec![false; 3 * hw];
    let mut touched: Vec<usize> = Vec::new();
    for c in 0..3 {
        for cy in 0..hp {
            for cx in 0..wp {
                let (by, u) = (cy / 8, cy % 8);
                let (bx, v) = (cx / 8, cx % 8);
                let q = tables[c][u * 8 + v];
                let mut bias = 0.0;
                for py in 0..8 {
                    for px in 0..8 {
                        let bw = basis(u, py) * basis(v, px) / q;
                        let y = (by * 8 + py).min(h - 1);
                        let x = (bx * 8 + px).min(w - 1);
                        for (src, m) in FWD[c].iter().enumerate() {
                            let idx = src * hw + y * w + x;
                            if !seen[idx] {
                                seen[idx] = true;
                                touched.push(idx);
                            }
                            acc[idx] += bw * m * 255.0;
                        }
                        bias += bw * shift[c];
                    }
                }
                touched.sort_unstable();
                enc.push_row(touched.iter().map(|&i| (i, acc[i])));
                for &i in &touched {
                    acc[i] = 0.0;
                    seen[i] = false;
                }
                touched.clear();
                enc_bias.push(bias);
            }
        }
    }

    let mut dec = SparseMap::new(3 * hp * wp, &[3, h, w]);
    let mut dec_bias = Vec::with_capacity(3 * hw);
    let inv = inverse3(FWD);
    for inv_row in &inv {
        for y in 0..h {
            for x in 0..w {
                let (by, py) = (y / 8, y % 8);
                let (bx, px) = (x / 8, x % 8);
                let mut row = Vec::with_capacity(192);
                for (c, &m) in inv_row.iter().enumerate() {
                    for u in 0..8 {
                        for v in 0..8 {
                            let q = tables[c][u * 8 + v];
                            let idx = (c * hp + by * 8 + u) * wp + bx * 8 + v;
                            row.push((idx, m * basis(u, py) * basis(v, px) * q / 255.0));
                        }
                    }
                }
                dec.push_row(row);
                dec_bias.push(inv_row[0] * 128.0 / 255.0);
            }
        }
    }
    Maps {
        encode: Rc::new(enc.with_bias(enc_bias)),
        decode: Rc::new(dec.with_bias(dec_bias)),
    }
}

thread_local! {
    static CACHE: RefCell<HashMap<(usize, usize, u32), Rc<Maps>>> = RefCell::new(HashMap::new());
}

fn maps(h: usize, w: usize, quality: u32) -> Rc<Maps> {
    CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() > 256 {
            c.clear();
        }
        c.entry((h, w, quality)).or_insert_with(|| Rc::new(build(h, w, quality))).clone()
    })
}

pub(super) fn jpeg<T: Float>(x: &Var<T>, quality: f64) -> Var<T> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let m = maps(h, w, quality.round() as u32);
    let coeffs = x.sparse(&m.encode);
    smooth_round(&coeffs).sparse(&m.decode)
}
