//! Dense row-major tensors.
//!
//! Storage is always `f64`; training runs quantize parameters through `f32`
//! at the optimizer boundary (see the training module) so that checkpoints
//! hold 32-bit values losslessly while all arithmetic keeps 64-bit headroom.

use crate::error::{Error, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor { shape: vec![n, d], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A tensor with exactly one element broadcasts against anything.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count for rank-2 tensors; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Trailing-axis extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.cols();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose expects rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Round every element through `f32`. Applied by the optimizer so that
    /// in-memory parameters are always exactly representable in 32 bits.
    pub fn round_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    /// Uniform values in [-bound, +bound], already rounded through f32.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut crate::rng::Prng) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| crate::rng::uniform_in(rng, -bound, bound) as f32 as f64)
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

/// `out = a · b` for rank-2 operands. Rows of the output are independent,
/// so large products split across threads without changing results.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let work = m * k * n;
    let kernel = |i: usize, orow: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if work >= 1 << 17 && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| kernel(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            kernel(i, orow);
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}
