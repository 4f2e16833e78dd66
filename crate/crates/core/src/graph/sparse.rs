//! Constant sparse affine maps `y = A x + b` over flattened tensors.
//!
//! Resampling (flips, crops, warps), separable filters and per-pixel colour
//! matrices are all expressed this way; the backward pass applies `A^T`.

use std::rc::Rc;

use super::Var;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct SparseMap {
    in_len: usize,
    out_shape: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl SparseMap {
    pub fn new(in_len: usize, out_shape: &[usize]) -> Self {
        Self {
            in_len,
            out_shape: out_shape.to_vec(),
            indptr: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
            bias: None,
        }
    }

    /// Appends the next output row. Rows must be pushed in output order.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, w) in entries {
            debug_assert!(j < self.in_len);
            if w != 0.0 {
                self.indices.push(j as u32);
                self.weights.push(w);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        assert_eq!(bias.len(), self.out_len());
        self.bias = Some(bias);
        self
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.len(), self.in_len, "sparse map input length mismatch");
        assert_eq!(self.rows(), self.out_len(), "sparse map is incomplete");
        let src = x.data();
        let mut out = Vec::with_capacity(self.out_len());
        for r in 0..self.rows() {
            let mut acc = 0.0f64;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.weights[k] * src[self.indices[k] as usize].as_f64();
            }
            if let Some(b) = &self.bias {
                acc += b[r];
            }
            out.push(T::from_f64_lossy(acc));
        }
        Tensor::new(&self.out_shape, out)
    }

    pub fn apply_transpose<T: Float>(&self, g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
        let mut acc = vec![0.0f64; self.in_len];
        for (r, gv) in g.data().iter().enumerate() {
            let gv = gv.as_f64();
            if gv == 0.0 {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc[self.indices[k] as usize] += self.weights[k] * gv;
            }
        }
        Tensor::new(in_shape, acc.into_iter().map(T::from_f64_lossy).collect())
    }
}

impl<T: Float> Var<T> {
    pub fn sparse(&self, map: &Rc<SparseMap>) -> Var<T> {
        let value = map.apply(self.value());
        let map = Rc::clone(map);
        let in_shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(map.apply_transpose(g, &in_shape))]
        })
    }
}
