//! Parameterized layers built on [`Graph`](super::Graph) operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::params::{Ctx, ParamBuilder, ParamId};
use super::tensor::Scalar;
use crate::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in x out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        b: &mut ParamBuilder<'_, F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", &[d_in, d_out], d_in)?;
            let bias = if bias {
                Some(b.uniform("bias", &[d_out], d_in)?)
            } else {
                None
            };
            Ok(Linear {
                weight,
                bias,
                d_in,
                d_out,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

/// Batch normalization over rows with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(BatchNorm {
                gamma: b.constant("weight", &[dim], 1.0, true)?,
                beta: b.constant("bias", &[dim], 0.0, true)?,
                running_mean: b.constant("running_mean", &[dim], 0.0, false)?,
                running_var: b.constant("running_var", &[dim], 1.0, false)?,
                dim,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = F::lit(BN_EPS);
        if ctx.train() {
            let n = ctx.graph.value(x).rows();
            let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, None, eps)?;
            let (mean, var) = stats.expect("train mode returns batch statistics");
            let m = F::lit(BN_MOMENTUM);
            let unbias = F::lit(n as f64 / (n as f64 - 1.0));
            let rm = ctx.store.get_mut(self.running_mean).value.data_mut();
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = (F::one() - m) * *r + m * b;
            }
            let rv = ctx.store.get_mut(self.running_var).value.data_mut();
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = (F::one() - m) * *r + m * b * unbias;
            }
            Ok(y)
        } else {
            let rm = ctx.store.get(self.running_mean).value.data().to_vec();
            let rv = ctx.store.get(self.running_var).value.data().to_vec();
            let (y, _) = ctx.graph.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps)?;
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(LayerNorm {
                gamma: b.constant("weight", &[dim], 1.0, true)?,
                beta: b.constant("bias", &[dim], 0.0, true)?,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.graph.layer_norm(x, g, b, F::lit(LN_EPS))
    }
}

/// Activation applied after the batch normalization of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Single-stage perceptron block: linear, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl Mlp {
    pub fn new<F: Scalar>(
        b: &mut ParamBuilder<'_, F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        act: Activation,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Mlp {
                linear: Linear::new(b, "fc", d_in, d_out, true)?,
                bn: BatchNorm::new(b, "bn", d_out)?,
                act,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.linear.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(match self.act {
            Activation::Relu => ctx.graph.relu(y),
            Activation::None => y,
        })
    }

    pub fn d_out(&self) -> usize {
        self.linear.d_out
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count() + 2 * self.bn.dim
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.linear.macs(rows)
    }
}

/// Inverted dropout: identity in eval mode; in train mode zeroes each entry
/// with probability `p` and scales survivors by `1 / (1 - p)`.
pub fn dropout<F: Scalar>(ctx: &mut Ctx<'_, F>, x: Var, p: f64) -> Result<Var> {
    if !ctx.train() || p == 0.0 {
        return Ok(x);
    }
    let n = ctx.graph.value(x).len();
    let keep = F::lit(1.0 / (1.0 - p));
    let rng = ctx.dropout_rng();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    ctx.graph.mask_mul(x, mask)
}
