//! Voxel self-attention layer.
//!
//! Single-head scaled dot-product attention over all voxels of a set, with
//! an absolute positional embedding added to the input and a learned
//! per-pair bias `B(i, j) = phi(c_i, c_i - c_j)` added to the logits. The
//! projected attention output is added back to the input.

use serde::{Deserialize, Serialize};

use crate::mnel::relative_relation;
use crate::nn::{Activation, BatchNorm, Ctx, Linear, Mlp, ParamBuilder, Scalar, Segments, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / sqrt(D)` with `D` the layer width.
    Model,
    /// `1 / sqrt(D / 4)`, the query/key width.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsalConfig {
    pub dim: usize,
    pub absolute_pe: bool,
    pub relative_bias: bool,
    pub scale: AttentionScale,
    /// Put a ReLU after the positional and output MLPs too.
    pub projection_relu: bool,
}

impl VsalConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            absolute_pe: true,
            relative_bias: true,
            scale: AttentionScale::Model,
            projection_relu: false,
        }
    }

    pub fn key_dim(&self) -> usize {
        self.dim / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "attention width {} must be a positive multiple of 4",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn scale_factor(&self) -> f64 {
        match self.scale {
            AttentionScale::Model => 1.0 / (self.dim as f64).sqrt(),
            AttentionScale::Head => 1.0 / (self.key_dim() as f64).sqrt(),
        }
    }
}

/// Two linear maps `6 -> D/4 -> 1` with batch norm and ReLU in between.
#[derive(Debug, Clone)]
pub struct PairBias {
    pub hidden: Linear,
    pub bn: BatchNorm,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Vsal {
    pub cfg: VsalConfig,
    pub position: Option<Mlp>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub bias: Option<PairBias>,
    pub output: Mlp,
}

/// Relation rows `(c_i, c_i - c_j)` for every ordered pair of every segment,
/// segment after segment, row-major within a segment.
pub fn pair_relations<F: Scalar>(coords: &[[f32; 3]], segments: &Segments) -> Tensor<F> {
    let pairs: usize = segments.iter().map(|s| s.len() * s.len()).sum();
    let mut data = Vec::with_capacity(pairs * 6);
    for seg in segments {
        for i in seg.clone() {
            for j in seg.clone() {
                data.extend(relative_relation(coords[i], coords[j]).map(|v| F::lit(v as f64)));
            }
        }
    }
    Tensor::matrix(pairs, 6, data)
}

pub fn coords_tensor<F: Scalar>(coords: &[[f32; 3]]) -> Tensor<F> {
    Tensor::matrix(
        coords.len(),
        3,
        coords.iter().flatten().map(|&v| F::lit(v as f64)).collect(),
    )
}

impl Vsal {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, name: &str, cfg: VsalConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, dk) = (cfg.dim, cfg.key_dim());
        let proj = if cfg.projection_relu {
            Activation::Relu
        } else {
            Activation::None
        };
        b.scoped(name, |b| {
            let position = if cfg.absolute_pe {
                Some(Mlp::new(b, "position", 3, d, proj)?)
            } else {
                None
            };
            let wq = Linear::new(b, "query", d, dk, false)?;
            let wk = Linear::new(b, "key", d, dk, false)?;
            let wv = Linear::new(b, "value", d, d, false)?;
            let bias = if cfg.relative_bias {
                Some(b.scoped("pair_bias", |b| {
                    Ok(PairBias {
                        hidden: Linear::new(b, "fc1", 6, dk, true)?,
                        bn: BatchNorm::new(b, "bn", dk)?,
                        out: Linear::new(b, "fc2", dk, 1, true)?,
                    })
                })?)
            } else {
                None
            };
            let output = Mlp::new(b, "output", d, d, proj)?;
            Ok(Vsal {
                cfg,
                position,
                wq,
                wk,
                wv,
                bias,
                output,
            })
        })
    }

    /// Absolute positional embedding `[R x D]`, if enabled.
    pub fn absolute_pe<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, coords: &[[f32; 3]]) -> Result<Option<Var>> {
        match &self.position {
            Some(m) => {
                let c = ctx.constant(coords_tensor(coords));
                Ok(Some(m.forward(ctx, c)?))
            }
            None => Ok(None),
        }
    }

    /// Pair bias column `[sum n_s^2 x 1]` in the layout of
    /// [`Graph::attention`](crate::nn::Graph::attention), if enabled.
    pub fn relative_bias<F: Scalar>(
        &self,
        ctx: &mut Ctx<'_, F>,
        coords: &[[f32; 3]],
        segments: &Segments,
    ) -> Result<Option<Var>> {
        let Some(pb) = &self.bias else { return Ok(None) };
        let r = ctx.constant(pair_relations(coords, segments));
        let h = pb.hidden.forward(ctx, r)?;
        let h = pb.bn.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        Ok(Some(pb.out.forward(ctx, h)?))
    }

    /// Returns the layer output and the attention node (whose softmax rows
    /// are available through [`Graph::attention_probs`](crate::nn::Graph::attention_probs)).
    pub fn forward_detailed<F: Scalar>(
        &self,
        ctx: &mut Ctx<'_, F>,
        input: Var,
        coords: &[[f32; 3]],
        segments: &Segments,
    ) -> Result<(Var, Var)> {
        let (rows, cols) = (ctx.graph.value(input).rows(), ctx.graph.value(input).cols());
        if cols != self.cfg.dim || rows != coords.len() {
            return Err(Error::shape("vsal", ctx.graph.shape(input), &[coords.len(), self.cfg.dim]));
        }
        let x = match self.absolute_pe(ctx, coords)? {
            Some(p) => ctx.graph.add(input, p)?,
            None => input,
        };
        let q = self.wq.forward(ctx, x)?;
        let k = self.wk.forward(ctx, x)?;
        let v = self.wv.forward(ctx, x)?;
        let b = self.relative_bias(ctx, coords, segments)?;
        let scale = F::lit(self.cfg.scale_factor());
        let a = ctx.graph.attention(q, k, v, b, segments, 1, scale)?;
        let out = self.output.forward(ctx, a)?;
        Ok((ctx.graph.add(out, input)?, a))
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut Ctx<'_, F>,
        input: Var,
        coords: &[[f32; 3]],
        segments: &Segments,
    ) -> Result<Var> {
        Ok(self.forward_detailed(ctx, input, coords, segments)?.0)
    }

    pub fn param_count(&self) -> usize {
        self.position.as_ref().map_or(0, Mlp::param_count)
            + self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self
                .bias
                .as_ref()
                .map_or(0, |b| b.hidden.param_count() + 2 * b.bn.dim + b.out.param_count())
            + self.output.param_count()
    }

    /// Linear maps plus `QK^T` and `AV` products for a set of `rows` voxels.
    pub fn macs(&self, rows: usize) -> u64 {
        let pairs = rows * rows;
        let (d, dk) = (self.cfg.dim as u64, self.cfg.key_dim() as u64);
        self.position.as_ref().map_or(0, |m| m.macs(rows))
            + self.wq.macs(rows)
            + self.wk.macs(rows)
            + self.wv.macs(rows)
            + self
                .bias
                .as_ref()
                .map_or(0, |b| b.hidden.macs(pairs) + b.out.macs(pairs))
            + pairs as u64 * dk
            + pairs as u64 * d
            + self.output.macs(rows)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{grad_check, GradCheckOptions, Mode, ParamStore};

    fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
        (0..n)
            .map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..3.0)])
            .collect()
    }

    fn build(cfg: VsalConfig, seed: u64) -> (ParamStore<f64>, Vsal) {
        let mut store = ParamStore::new();
        let layer = {
            let mut b = ParamBuilder::new(&mut store, seed);
            Vsal::new(&mut b, "vsal", cfg).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for p in store.iter_mut() {
            if p.name.ends_with("running_mean") || p.name.ends_with("bn.bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
            if p.name.ends_with("running_var") || p.name.ends_with("bn.weight") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            }
        }
        (store, layer)
    }

    #[test]
    fn widths() {
        let cfg = VsalConfig::new(128);
        assert_eq!(cfg.key_dim(), 32);
        assert!((cfg.scale_factor() - 1.0 / 128f64.sqrt()).abs() < 1e-15);
        assert!(VsalConfig::new(30).validate().is_err());
        let mut store = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut store, 0);
        let l = Vsal::new(&mut b, "v", cfg).unwrap();
        assert_eq!(l.wq.d_out, 32);
        assert_eq!(l.wv.d_out, 128);
    }

    #[test]
    fn positional_embedding_shapes_and_zero_weights() {
        let (mut store, layer) = build(VsalConfig::new(128), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = coords(&mut rng, 432);
        c[5] = c[9];
        let pos = layer.position.as_ref().unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let p = layer.absolute_pe(&mut ctx, &c).unwrap().unwrap();
        assert_eq!(ctx.graph.shape(p), &[432, 128]);
        let v = ctx.graph.value(p);
        assert_eq!(v.row(5), v.row(9));
        drop(ctx);

        store.get_mut(pos.linear.weight).value.fill(0.0);
        store.get_mut(pos.linear.bias.unwrap()).value.fill(0.0);
        let beta = store.get(pos.bn.beta).value.data().to_vec();
        let mut ctx = Ctx::new(&mut store, Mode::Train, 0);
        let p = layer.absolute_pe(&mut ctx, &c).unwrap().unwrap();
        for i in 0..432 {
            assert_eq!(ctx.graph.value(p).row(i), &beta[..]);
        }
    }

    #[test]
    fn pair_bias_matches_scalar_oracle() {
        let (mut store, layer) = build(VsalConfig::new(16), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 16;
        let c = coords(&mut rng, n);
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let b = layer.relative_bias(&mut ctx, &c, &vec![0..n]).unwrap().unwrap();
        let got = ctx.graph.value(b).data().to_vec();
        drop(ctx);
        assert_eq!(got.len(), n * n);
        let pb = layer.bias.as_ref().unwrap();
        let t = |id| store.get(id).value.data().to_vec();
        let (w1, b1, w2, b2) = (t(pb.hidden.weight), t(pb.hidden.bias.unwrap()), t(pb.out.weight), t(pb.out.bias.unwrap()));
        let (g, be, rm, rv) = (t(pb.bn.gamma), t(pb.bn.beta), t(pb.bn.running_mean), t(pb.bn.running_var));
        let dk = 4;
        for i in 0..n {
            for j in 0..n {
                let r = relative_relation(c[i], c[j]);
                let mut s = b2[0];
                for h in 0..dk {
                    let mut z = b1[h];
                    for (a, &rv_) in r.iter().enumerate() {
                        z += rv_ as f64 * w1[a * dk + h];
                    }
                    let z = (g[h] * (z - rm[h]) / (rv[h] + 1e-5).sqrt() + be[h]).max(0.0);
                    s += z * w2[h];
                }
                assert!((got[i * n + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_coords_give_constant_bias() {
        let (mut store, layer) = build(VsalConfig::new(8), 3);
        let c = vec![[1.0, 2.0, 0.0]; 6];
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let b = layer.relative_bias(&mut ctx, &c, &vec![0..6]).unwrap().unwrap();
        let v = ctx.graph.value(b).data();
        assert!(v.iter().all(|&x| x == v[0]));
    }

    fn run(store: &mut ParamStore<f64>, layer: &Vsal, l: &[f64], c: &[[f32; 3]], mode: Mode) -> (Vec<f64>, Vec<f64>) {
        let n = c.len();
        let mut ctx = Ctx::new(store, mode, 0);
        let x = ctx.constant(Tensor::matrix(n, layer.cfg.dim, l.to_vec()));
        let (y, a) = layer.forward_detailed(&mut ctx, x, c, &vec![0..n]).unwrap();
        (
            ctx.graph.value(y).data().to_vec(),
            ctx.graph.attention_probs(a).unwrap().to_vec(),
        )
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (ape, rpb) in [(true, true), (false, true), (true, false), (false, false)] {
            let mut cfg = VsalConfig::new(8);
            cfg.absolute_pe = ape;
            cfg.relative_bias = rpb;
            let (mut store, layer) = build(cfg, 5);
            let n = 20;
            let c = coords(&mut rng, n);
            let l: Vec<f64> = (0..n * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, p) = run(&mut store, &layer, &l, &c, Mode::Train);
            for row in p.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn bias_row_shift_leaves_attention_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 9;
        let rand = |rng: &mut ChaCha8Rng, len| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (q, k, v, b) = (rand(&mut rng, n * 4), rand(&mut rng, n * 4), rand(&mut rng, n * 8), rand(&mut rng, n * n));
        let probs = |bias: Vec<f64>| {
            let mut g = crate::nn::Graph::<f64>::new();
            let q = g.constant(Tensor::matrix(n, 4, q.clone()));
            let k = g.constant(Tensor::matrix(n, 4, k.clone()));
            let v = g.constant(Tensor::matrix(n, 8, v.clone()));
            let b = g.constant(Tensor::matrix(n * n, 1, bias));
            let a = g.attention(q, k, v, Some(b), &vec![0..n], 1, 0.35).unwrap();
            g.attention_probs(a).unwrap().to_vec()
        };
        let base = probs(b.clone());
        let mut shifted = b;
        for j in 0..n {
            shifted[3 * n + j] += 7.5;
        }
        let after = probs(shifted);
        for (x, y) in base.iter().zip(&after) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn single_voxel_reduces_to_value_row() {
        let (mut store, layer) = build(VsalConfig::new(8), 6);
        let c = [[2.0, 1.0, 0.0]];
        let l: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let (y, p) = run(&mut store, &layer, &l, &c, Mode::Eval);
        assert_eq!(p, vec![1.0]);
        // A = V row; output = MLP(V) + L
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let x = ctx.constant(Tensor::matrix(1, 8, l.clone()));
        let pe = layer.absolute_pe(&mut ctx, &c).unwrap().unwrap();
        let x = ctx.graph.add(x, pe).unwrap();
        let v = layer.wv.forward(&mut ctx, x).unwrap();
        let o = layer.output.forward(&mut ctx, v).unwrap();
        for k in 0..8 {
            assert!((y[k] - (ctx.graph.value(o).data()[k] + l[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, layer) = build(VsalConfig::new(8), 7);
        let n = 24;
        let c = coords(&mut rng, n);
        let l: Vec<f64> = (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let pc: Vec<[f32; 3]> = perm.iter().map(|&i| c[i]).collect();
        let pl: Vec<f64> = perm.iter().flat_map(|&i| l[i * 8..(i + 1) * 8].to_vec()).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = run(&mut store.clone(), &layer, &l, &c, mode);
            let (b, _) = run(&mut store.clone(), &layer, &pl, &pc, mode);
            for (r, &src) in perm.iter().enumerate() {
                for k in 0..8 {
                    assert!((b[r * 8 + k] - a[src * 8 + k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn gradient_check_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for scale in [AttentionScale::Model, AttentionScale::Head] {
            let mut cfg = VsalConfig::new(16);
            cfg.scale = scale;
            let (mut store, layer) = build(cfg, 5);
            let segs: Segments = vec![0..5, 5..11];
            let c = coords(&mut rng, 11);
            let l: Vec<f64> = (0..176).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..176).map(|_| rng.random_range(-1.0..1.0)).collect();
            let report = grad_check(&mut store, &GradCheckOptions::with_tol(1e-3), |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let x = ctx.constant(Tensor::matrix(11, 16, l.clone()));
                let y = layer.forward(&mut ctx, x, &c, &segs)?;
                let loss = ctx.graph.weighted_sum(y, w.clone())?;
                Ok(ctx.probe(loss, back))
            })
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
