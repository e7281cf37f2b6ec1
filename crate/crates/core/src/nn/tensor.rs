use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::{Error, Result};

/// Floating-point element type. Models run in `f32`; gradient checks re-run
/// the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![F::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for rank-0/1 tensors treated as a row).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `out[n x m] = a[n x k] * b[k x m]`.
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    let row = |(i, o): (usize, &mut [F])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else if m > 0 {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `out[n x k] = g[n x m] * b[k x m]^T`.
pub(crate) fn matmul_nt<F: Scalar>(g: &[F], b: &[F], n: usize, m: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * k];
    let row = |(i, o): (usize, &mut [F])| {
        let gr = &g[i * m..(i + 1) * m];
        for (p, ov) in o.iter_mut().enumerate() {
            let br = &b[p * m..(p + 1) * m];
            *ov = gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    };
    if n * k * m >= PAR_THRESHOLD && k > 0 {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else if k > 0 {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `out[k x m] = a[n x k]^T * g[n x m]`.
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], g: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * m];
    let row = |(p, o): (usize, &mut [F])| {
        for i in 0..n {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let gr = &g[i * m..(i + 1) * m];
            for (ov, &gv) in o.iter_mut().zip(gr) {
                *ov += av * gv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD && m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else if m > 0 {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// Numerically stable softmax of one row in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax of a row-major matrix with `cols` columns.
pub fn softmax_rows<F: Scalar>(data: &[F], cols: usize) -> Vec<F> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}
