//! Classification heads and segment-level temporal modeling.

use crate::nn::{dropout, Activation, Ctx, LayerNorm, Linear, Mlp, ParamBuilder, ParamId, Scalar, Segments, Tensor, Var};
use crate::{Error, Result};

use super::config::{HeadConfig, S2tmConfig, TemporalModel};
use super::LayerInfo;

/// Concatenated max and mean pooling of each segment: `[S x 2D]`.
pub fn global_pool<F: Scalar>(ctx: &mut Ctx<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
    let max = ctx.graph.segment_max(x, segments)?;
    let mean = ctx.graph.segment_mean(x, segments)?;
    ctx.graph.concat_cols(&[max, mean])
}

/// Pooling followed by two hidden MLPs with dropout and a linear classifier.
#[derive(Debug, Clone)]
pub struct ObjectHead {
    pub hidden: [Mlp; 2],
    pub classifier: Linear,
    pub dropout: f64,
}

impl ObjectHead {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, dim: usize, cfg: &HeadConfig, classes: usize) -> Result<Self> {
        b.scoped("head", |b| {
            let h1 = Mlp::new(b, "hidden1", 2 * dim, cfg.hidden[0], Activation::Relu)?;
            let h2 = Mlp::new(b, "hidden2", cfg.hidden[0], cfg.hidden[1], Activation::Relu)?;
            Ok(ObjectHead {
                hidden: [h1, h2],
                classifier: Linear::new(b, "classifier", cfg.hidden[1], classes, true)?,
                dropout: cfg.dropout,
            })
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
        let mut y = global_pool(ctx, x, segments)?;
        for h in &self.hidden {
            y = h.forward(ctx, y)?;
            y = dropout(ctx, y, self.dropout)?;
        }
        self.classifier.forward(ctx, y)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.iter().map(Mlp::param_count).sum::<usize>() + self.classifier.param_count()
    }

    pub fn layers(&self, sets: usize) -> Vec<LayerInfo> {
        let mut out: Vec<LayerInfo> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, h)| LayerInfo {
                name: format!("head.hidden{}", i + 1),
                rows: sets,
                d_in: h.linear.d_in,
                d_out: h.linear.d_out,
                params: h.param_count(),
                macs: h.macs(sets),
            })
            .collect();
        out.push(LayerInfo::linear("head.classifier", sets, &self.classifier));
        out
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl TransformerLayer {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, name: &str, cfg: &S2tmConfig) -> Result<Self> {
        let (t, inner) = (cfg.token_dim, cfg.heads * cfg.head_dim);
        b.scoped(name, |b| {
            Ok(TransformerLayer {
                norm1: LayerNorm::new(b, "norm1", t)?,
                query: Linear::new(b, "query", t, inner, true)?,
                key: Linear::new(b, "key", t, inner, true)?,
                value: Linear::new(b, "value", t, inner, true)?,
                proj: Linear::new(b, "proj", inner, t, true)?,
                norm2: LayerNorm::new(b, "norm2", t)?,
                ffn1: Linear::new(b, "ffn1", t, cfg.ffn_dim, true)?,
                ffn2: Linear::new(b, "ffn2", cfg.ffn_dim, t, true)?,
                heads: cfg.heads,
                head_dim: cfg.head_dim,
            })
        })
    }

    /// `x` holds one sequence per entry of `segments`.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let q = self.query.forward(ctx, h)?;
        let k = self.key.forward(ctx, h)?;
        let v = self.value.forward(ctx, h)?;
        let scale = F::lit(1.0 / (self.head_dim as f64).sqrt());
        let a = ctx.graph.attention(q, k, v, None, segments, self.heads, scale)?;
        let a = self.proj.forward(ctx, a)?;
        let x = ctx.graph.add(x, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.ffn1.forward(ctx, h)?;
        let h = ctx.graph.gelu(h);
        let h = self.ffn2.forward(ctx, h)?;
        ctx.graph.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        let t = self.query.d_in;
        4 * t
            + [&self.query, &self.key, &self.value, &self.proj, &self.ffn1, &self.ffn2]
                .iter()
                .map(|l| l.param_count())
                .sum::<usize>()
    }

    /// Multiply-accumulates for `sequences` sequences of `len` tokens.
    pub fn macs(&self, sequences: usize, len: usize) -> u64 {
        let rows = sequences * len;
        let linear: u64 = [&self.query, &self.key, &self.value, &self.proj, &self.ffn1, &self.ffn2]
            .iter()
            .map(|l| l.macs(rows))
            .sum();
        let attn = (sequences * self.heads * len * len * 2 * self.head_dim) as u64;
        linear + attn
    }
}

/// Gated recurrent cell used by the recurrent temporal ablation.
#[derive(Debug, Clone)]
pub struct GatedCell {
    /// Input maps for the update, reset and candidate gates.
    pub input: [Linear; 3],
    /// Hidden-state maps for the same gates, without bias.
    pub hidden: [Linear; 3],
}

impl GatedCell {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, dim: usize) -> Result<Self> {
        b.scoped("gru", |b| {
            let mut input = Vec::new();
            let mut hidden = Vec::new();
            for g in ["update", "reset", "candidate"] {
                input.push(Linear::new(b, &format!("{g}_in"), dim, dim, true)?);
                hidden.push(Linear::new(b, &format!("{g}_hidden"), dim, dim, false)?);
            }
            Ok(GatedCell {
                input: input.try_into().expect("three gates"),
                hidden: hidden.try_into().expect("three gates"),
            })
        })
    }

    pub fn step<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, h: Var) -> Result<Var> {
        let gate = |ctx: &mut Ctx<'_, F>, g: usize| -> Result<(Var, Var)> {
            Ok((self.input[g].forward(ctx, x)?, self.hidden[g].forward(ctx, h)?))
        };
        let (zx, zh) = gate(ctx, 0)?;
        let (rx, rh) = gate(ctx, 1)?;
        let (nx, nh) = gate(ctx, 2)?;
        let z = ctx.graph.add(zx, zh)?;
        let z = ctx.graph.sigmoid(z);
        let r = ctx.graph.add(rx, rh)?;
        let r = ctx.graph.sigmoid(r);
        let rn = ctx.graph.mul(r, nh)?;
        let n = ctx.graph.add(nx, rn)?;
        let n = ctx.graph.tanh(n);
        // h' = n + z * (h - n)
        let d = ctx.graph.sub(h, n)?;
        let zd = ctx.graph.mul(z, d)?;
        ctx.graph.add(n, zd)
    }

    pub fn param_count(&self) -> usize {
        self.input.iter().chain(&self.hidden).map(Linear::param_count).sum()
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.input.iter().chain(&self.hidden).map(|l| l.macs(rows)).sum()
    }
}

#[derive(Debug, Clone)]
pub enum Temporal {
    Transformer {
        class_token: ParamId,
        position: ParamId,
        layers: Vec<TransformerLayer>,
    },
    AvgPool,
    Recurrent(GatedCell),
}

/// Segment-level temporal module: one token per segment, sequence model,
/// linear classifier.
#[derive(Debug, Clone)]
pub struct S2tm {
    pub cfg: S2tmConfig,
    pub token: Mlp,
    pub temporal: Temporal,
    pub classifier: Linear,
}

impl S2tm {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, dim: usize, cfg: &S2tmConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.token_dim;
        b.scoped("s2tm", |b| {
            let token = Mlp::new(b, "token", 2 * dim, t, Activation::Relu)?;
            let temporal = match cfg.temporal {
                TemporalModel::Transformer => Temporal::Transformer {
                    class_token: b.normal("class_token", &[1, t], 0.02)?,
                    position: b.normal("position", &[cfg.sequence_len(), t], 0.02)?,
                    layers: (0..cfg.depth)
                        .map(|i| TransformerLayer::new(b, &format!("layer{i}"), cfg))
                        .collect::<Result<_>>()?,
                },
                TemporalModel::AvgPool => Temporal::AvgPool,
                TemporalModel::Recurrent => Temporal::Recurrent(GatedCell::new(b, t)?),
            };
            Ok(S2tm {
                cfg: cfg.clone(),
                token,
                temporal,
                classifier: Linear::new(b, "classifier", t, classes, true)?,
            })
        })
    }

    /// Segment tokens `[B*K x T]` from encoder features, sample-major.
    pub fn tokens<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, segments: &Segments) -> Result<Var> {
        let pooled = global_pool(ctx, x, segments)?;
        self.token.forward(ctx, pooled)
    }

    /// Logits `[B x C]` from sample-major segment tokens `[B*K x T]`.
    pub fn classify<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, tokens: Var) -> Result<Var> {
        let k = self.cfg.segments;
        let rows = ctx.graph.value(tokens).rows();
        if rows == 0 || rows % k != 0 {
            return Err(Error::Config(format!("{rows} segment tokens do not split into sequences of {k}")));
        }
        let batch = rows / k;
        let summary = match &self.temporal {
            Temporal::Transformer {
                class_token,
                position,
                layers,
            } => {
                let cls = ctx.param(*class_token);
                let pos = ctx.param(*position);
                let stacked = ctx.graph.concat_rows(&[cls, tokens])?;
                let len = k + 1;
                let mut order = Vec::with_capacity(batch * len);
                for b in 0..batch {
                    order.push(0);
                    order.extend((0..k).map(|j| 1 + b * k + j));
                }
                let seq = ctx.graph.gather(stacked, order)?;
                let pos = ctx.graph.gather(pos, (0..batch).flat_map(|_| 0..len).collect())?;
                let mut x = ctx.graph.add(seq, pos)?;
                let segments: Segments = (0..batch).map(|b| b * len..(b + 1) * len).collect();
                for layer in layers {
                    x = layer.forward(ctx, x, &segments)?;
                }
                ctx.graph.gather(x, (0..batch).map(|b| b * len).collect())?
            }
            Temporal::AvgPool => {
                let segments: Segments = (0..batch).map(|b| b * k..(b + 1) * k).collect();
                ctx.graph.segment_mean(tokens, &segments)?
            }
            Temporal::Recurrent(cell) => {
                let t = self.cfg.token_dim;
                let mut h = ctx.constant(Tensor::zeros(&[batch, t]));
                for j in 0..k {
                    let x = ctx.graph.gather(tokens, (0..batch).map(|b| b * k + j).collect())?;
                    h = cell.step(ctx, x, h)?;
                }
                h
            }
        };
        self.classifier.forward(ctx, summary)
    }

    pub fn param_count(&self) -> usize {
        let temporal = match &self.temporal {
            Temporal::Transformer { layers, .. } => {
                (1 + self.cfg.sequence_len()) * self.cfg.token_dim
                    + layers.iter().map(TransformerLayer::param_count).sum::<usize>()
            }
            Temporal::AvgPool => 0,
            Temporal::Recurrent(cell) => cell.param_count(),
        };
        self.token.param_count() + temporal + self.classifier.param_count()
    }

    /// Per-layer accounting for one action sample.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let k = self.cfg.segments;
        let mut out = vec![LayerInfo {
            name: "s2tm.token".into(),
            rows: k,
            d_in: self.token.linear.d_in,
            d_out: self.token.linear.d_out,
            params: self.token.param_count(),
            macs: self.token.macs(k),
        }];
        let t = self.cfg.token_dim;
        match &self.temporal {
            Temporal::Transformer { layers, .. } => {
                let len = self.cfg.sequence_len();
                out.push(LayerInfo {
                    name: "s2tm.tokens".into(),
                    rows: len,
                    d_in: t,
                    d_out: t,
                    params: (1 + len) * t,
                    macs: 0,
                });
                for (i, l) in layers.iter().enumerate() {
                    out.push(LayerInfo {
                        name: format!("s2tm.layer{i}"),
                        rows: len,
                        d_in: t,
                        d_out: t,
                        params: l.param_count(),
                        macs: l.macs(1, len),
                    });
                }
            }
            Temporal::AvgPool => {}
            Temporal::Recurrent(cell) => out.push(LayerInfo {
                name: "s2tm.gru".into(),
                rows: k,
                d_in: t,
                d_out: t,
                params: cell.param_count(),
                macs: cell.macs(k),
            }),
        }
        out.push(LayerInfo::linear("s2tm.classifier", 1, &self.classifier));
        out
    }
}
