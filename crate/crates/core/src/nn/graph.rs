//! Reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its value and whatever it needs for the backward pass. Nodes are created
//! in topological order, so [`Graph::backward`] walks the tape in reverse.
//! Constant inputs do not take part in the backward pass.

use std::ops::Range;

use super::tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges, one per independent set (sample) in a batch.
pub type Segments = Vec<Range<usize>>;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Segments,
    },
    NeighborAttention {
        feat: Var,
        weights: Var,
        k: usize,
        sizes: Vec<usize>,
        probs: Vec<Vec<F>>,
    },
    NeighborMax {
        feat: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        segments: Segments,
        heads: usize,
        scale: F,
        probs: Vec<F>,
    },
    MaskMul {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every node with respect to one scalar output.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

fn check2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    if t.len() != 2 {
        return Err(Error::shape(op, t, &[0, 0]));
    }
    Ok((t[0], t[1]))
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = check2("matmul", self.shape(a))?;
        let (k2, m) = check2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng))
    }

    /// `x[n x m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = check2("add_bias", self.shape(x))?;
        if self.value(b).len() != m {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddBias(x, b), ng))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(self.shape(a).to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(F::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |a| F::one() / (F::one() + (-a).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |a| a.tanh())
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |a| {
            let (c, k) = (F::lit(GELU_C), F::lit(0.044715));
            F::lit(0.5) * a * (F::one() + (c * (a + k * a * a * a)).tanh())
        })
    }

    /// Batch normalization over rows. In train mode the batch statistics are
    /// used and returned as `(mean, biased variance)`; in eval mode the given
    /// running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let (n, d) = check2("batch_norm", self.shape(x))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let (mean, var, train) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![F::zero(); d];
                for row in xs.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let nf = F::lit(n as f64);
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![F::zero(); d];
                for row in xs.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nf);
                (mean, var, true)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xs.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let var_out = self.push(
            Tensor::matrix(n, d, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        Ok((var_out, train.then_some((mean, var))))
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (n, d) = check2("layer_norm", self.shape(x))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let df = F::lit(d as f64);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(n, d, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", &[n, d], &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(idx.len(), d, out), Op::Gather { x, idx }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            n += self.value(p).rows();
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(n, d, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if cols.end > d || cols.start >= cols.end {
            return Err(Error::shape("slice_cols", &[n, d], &[cols.start, cols.end]));
        }
        let w = cols.len();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&v.row(i)[cols.clone()]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::matrix(n, w, out),
            Op::SliceCols {
                x,
                start: cols.start,
            },
            ng,
        ))
    }

    /// Column-wise max over each row segment; one output row per segment.
    pub fn segment_max(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        let mut out = Vec::with_capacity(segments.len() * d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for seg in segments {
            if seg.is_empty() || seg.end > v.rows() {
                return Err(Error::shape("segment_max", v.shape(), &[seg.start, seg.end]));
            }
            for j in 0..d {
                let mut best = seg.start;
                for i in seg.clone() {
                    if v.data()[i * d + j] > v.data()[best * d + j] {
                        best = i;
                    }
                }
                argmax.push(best);
                out.push(v.data()[best * d + j]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::matrix(segments.len(), d, out),
            Op::SegmentMax { x, argmax },
            ng,
        ))
    }

    /// Column-wise mean over each row segment.
    pub fn segment_mean(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        let mut out = vec![F::zero(); segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > v.rows() {
                return Err(Error::shape("segment_mean", v.shape(), &[seg.start, seg.end]));
            }
            let o = &mut out[s * d..(s + 1) * d];
            for i in seg.clone() {
                for (a, &b) in o.iter_mut().zip(v.row(i)) {
                    *a += b;
                }
            }
            let nf = F::lit(seg.len() as f64);
            o.iter_mut().for_each(|a| *a = *a / nf);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::matrix(segments.len(), d, out),
            Op::SegmentMean {
                x,
                segments: segments.clone(),
            },
            ng,
        ))
    }

    /// Multi-scale attentive neighbor aggregation.
    ///
    /// `feat` and `weights` are `[N*k x D]` with the `k` neighbors of centre
    /// `i` in rows `i*k..(i+1)*k`, nearest first. For every subspace size
    /// `s` in `sizes`, the weights of the `s` nearest neighbors go through a
    /// channel-wise softmax over the neighbor axis and re-weight the
    /// features; the per-subspace sums are added up. Output is `[N x D]`.
    pub fn neighbor_attention(&mut self, feat: Var, weights: Var, k: usize, sizes: &[usize]) -> Result<Var> {
        if self.shape(feat) != self.shape(weights) {
            return Err(Error::shape("neighbor_attention", self.shape(feat), self.shape(weights)));
        }
        let (rows, d) = check2("neighbor_attention", self.shape(feat))?;
        if k == 0 || rows % k != 0 || sizes.iter().any(|&s| s == 0 || s > k) {
            return Err(Error::shape("neighbor_attention", &[rows, d], &[k]));
        }
        let n = rows / k;
        let f = self.value(feat).data();
        let w = self.value(weights).data();
        let mut out = vec![F::zero(); n * d];
        let mut probs = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let p = subspace_softmax(w, n, k, d, s);
            for i in 0..n {
                let o = &mut out[i * d..(i + 1) * d];
                for j in 0..s {
                    let r = i * k + j;
                    let (fr, pr) = (&f[r * d..(r + 1) * d], &p[(i * s + j) * d..(i * s + j + 1) * d]);
                    for c in 0..d {
                        o[c] += fr[c] * pr[c];
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(&[feat, weights]);
        Ok(self.push(
            Tensor::matrix(n, d, out),
            Op::NeighborAttention {
                feat,
                weights,
                k,
                sizes: sizes.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Max-pool counterpart of [`Graph::neighbor_attention`]: the sum over
    /// subspaces of the channel-wise max of the `s` nearest neighbors.
    pub fn neighbor_max(&mut self, feat: Var, k: usize, sizes: &[usize]) -> Result<Var> {
        let (rows, d) = check2("neighbor_max", self.shape(feat))?;
        if k == 0 || rows % k != 0 || sizes.iter().any(|&s| s == 0 || s > k) {
            return Err(Error::shape("neighbor_max", &[rows, d], &[k]));
        }
        let n = rows / k;
        let f = self.value(feat).data();
        let mut out = vec![F::zero(); n * d];
        let mut argmax = Vec::with_capacity(sizes.len() * n * d);
        for &s in sizes {
            for i in 0..n {
                for c in 0..d {
                    let mut best = i * k;
                    for j in 1..s {
                        if f[(i * k + j) * d + c] > f[best * d + c] {
                            best = i * k + j;
                        }
                    }
                    argmax.push(best);
                    out[i * d + c] += f[best * d + c];
                }
            }
        }
        let ng = self.ng(&[feat]);
        Ok(self.push(Tensor::matrix(n, d, out), Op::NeighborMax { feat, argmax }, ng))
    }

    /// Scaled dot-product attention within each row segment.
    ///
    /// `q`, `k` are `[R x H*dk]`, `v` is `[R x H*dv]` for `H = heads`. The
    /// optional `bias` is a `[sum n_s^2 x 1]` column holding, segment after
    /// segment, the row-major `n_s x n_s` additive logit bias (shared by all
    /// heads). Softmax runs over the key axis of every query row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        segments: &Segments,
        heads: usize,
        scale: F,
    ) -> Result<Var> {
        let (r, qd) = check2("attention", self.shape(q))?;
        let (rk, kd) = check2("attention", self.shape(k))?;
        let (rv, vd) = check2("attention", self.shape(v))?;
        if rk != r || rv != r || kd != qd || heads == 0 || qd % heads != 0 || vd % heads != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(v)));
        }
        let pairs: usize = segments.iter().map(|s| s.len() * s.len()).sum();
        if let Some(b) = bias {
            if self.value(b).len() != pairs {
                return Err(Error::shape("attention", &[pairs], self.shape(b)));
            }
        }
        if segments.iter().any(|s| s.end > r) {
            return Err(Error::shape("attention", &[r], &[segments.len()]));
        }
        let (dk, dv) = (qd / heads, vd / heads);
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let bs = bias.map(|b| self.value(b).data());
        let mut out = vec![F::zero(); r * vd];
        let mut probs = Vec::with_capacity(pairs * heads);
        let mut boff = 0;
        for seg in segments {
            let n = seg.len();
            for h in 0..heads {
                for i in 0..n {
                    let qi = &qs[(seg.start + i) * qd + h * dk..][..dk];
                    let mut row: Vec<F> = (0..n)
                        .map(|j| {
                            let kj = &ks[(seg.start + j) * qd + h * dk..][..dk];
                            let dot: F = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                            let b = bs.map_or(F::zero(), |b| b[boff + i * n + j]);
                            dot * scale + b
                        })
                        .collect();
                    softmax_in_place(&mut row);
                    let o = &mut out[(seg.start + i) * vd + h * dv..][..dv];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vs[(seg.start + j) * vd + h * dv..][..dv];
                        for (a, &b) in o.iter_mut().zip(vj) {
                            *a += p * b;
                        }
                    }
                    probs.extend(row);
                }
            }
            boff += n * n;
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let ng = self.ng(&inputs);
        Ok(self.push(
            Tensor::matrix(r, vd, out),
            Op::Attention {
                q,
                k,
                v,
                bias,
                segments: segments.clone(),
                heads,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Softmax probabilities kept by an [`Graph::attention`] node: for each
    /// segment, head and query row in turn, one row over that segment's keys.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[mask.len()]));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaskMul { x, mask }, ng))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = check2("cross_entropy", self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(F::min_positive_value()).ln();
        }
        let loss = loss / F::lit(n as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `sum(x * weights)` with constant weights; a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng))
    }

    /// Hash of every piecewise branch taken in this graph: the sign pattern
    /// of each ReLU input and the winner of each max reduction. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = Fnv::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    h.write(1);
                    for &v in node.value.data() {
                        h.write((v > F::zero()) as u64);
                    }
                }
                Op::SegmentMax { argmax, .. } | Op::NeighborMax { argmax, .. } => {
                    h.write(2);
                    for &i in argmax {
                        h.write(i as u64);
                    }
                }
                _ => {}
            }
        }
        h.0
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let ov = &self.nodes[out.0].value;
        grads[out.0] = Some(Tensor::filled(ov.shape(), F::one()));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                if wants(*a) {
                    let da = matmul_nt(gd, val(*b).data(), n, m, k);
                    accumulate(grads, *a, val(*a).shape(), da);
                }
                if wants(*b) {
                    let db = matmul_tn(val(*a).data(), gd, n, k, m);
                    accumulate(grads, *b, val(*b).shape(), db);
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, val(*x).shape(), gd.to_vec());
                }
                if wants(*b) {
                    let m = val(*b).len();
                    let mut db = vec![F::zero(); m];
                    for row in gd.chunks(m) {
                        for (a, &r) in db.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    accumulate(grads, *b, val(*b).shape(), db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(grads, *v, val(*v).shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, val(*a).shape(), gd.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, val(*b).shape(), gd.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, val(*a).shape(), d);
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, val(*b).shape(), d);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, val(*x).shape(), gd.iter().map(|&a| a * *s).collect());
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (F::one() - y * y))
                    .collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
            Op::Gelu(x) => {
                let (c, k) = (F::lit(GELU_C), F::lit(0.044715));
                let half = F::lit(0.5);
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &a)| {
                        let t = (c * (a + k * a * a * a)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * a * a);
                        g * (half * (F::one() + t) + half * a * dt)
                    })
                    .collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let n = gd.len() / d;
                let gm = val(*gamma).data();
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if wants(*x) {
                    let mut dx = vec![F::zero(); n * d];
                    if *train {
                        let nf = F::lit(n as f64);
                        for (i, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                let dh = grow[j] * gm[j];
                                let sum_dh = dbeta[j] * gm[j];
                                let sum_dh_h = dgamma[j] * gm[j];
                                dx[i * d + j] =
                                    inv_std[j] / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                            }
                        }
                    } else {
                        for (i, grow) in gd.chunks(d).enumerate() {
                            for j in 0..d {
                                dx[i * d + j] = grow[j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), dx);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, val(*gamma).shape(), dgamma);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, val(*beta).shape(), dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma).data();
                let df = F::lit(d as f64);
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); gd.len()];
                for (i, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gm[j];
                        dx[i * d + j] = inv_std[i] / df * (df * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, val(*x).shape(), dx);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, val(*gamma).shape(), dgamma);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, val(*beta).shape(), dbeta);
                }
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += gd[r * d + c];
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(val(p).len());
                        for row in gd.chunks(total) {
                            dp.extend_from_slice(&row[off..off + w]);
                        }
                        accumulate(grads, p, val(p).shape(), dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        accumulate(grads, p, val(p).shape(), gd[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (d, w) = (xv.cols(), g.cols());
                let mut dx = vec![F::zero(); xv.len()];
                for (i, row) in gd.chunks(w).enumerate() {
                    dx[i * d + start..i * d + start + w].copy_from_slice(row);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SegmentMax { x, argmax } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src * d + o % d] += gd[o];
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SegmentMean { x, segments } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for (s, seg) in segments.iter().enumerate() {
                    let nf = F::lit(seg.len() as f64);
                    for i in seg.clone() {
                        for c in 0..d {
                            dx[i * d + c] = gd[s * d + c] / nf;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::NeighborAttention {
                feat,
                weights,
                k,
                sizes,
                probs,
            } => {
                let fv = val(*feat);
                let d = fv.cols();
                let n = fv.rows() / k;
                let f = fv.data();
                let mut df = vec![F::zero(); fv.len()];
                let mut dw = vec![F::zero(); fv.len()];
                for (&s, p) in sizes.iter().zip(probs) {
                    for i in 0..n {
                        let gi = &gd[i * d..(i + 1) * d];
                        for c in 0..d {
                            // d prob = g * f; softmax backward over the s neighbors
                            let mut dot = F::zero();
                            for j in 0..s {
                                let r = i * k + j;
                                let pr = p[(i * s + j) * d + c];
                                dot += pr * gi[c] * f[r * d + c];
                            }
                            for j in 0..s {
                                let r = i * k + j;
                                let pr = p[(i * s + j) * d + c];
                                df[r * d + c] += gi[c] * pr;
                                dw[r * d + c] += pr * (gi[c] * f[r * d + c] - dot);
                            }
                        }
                    }
                }
                if wants(*feat) {
                    accumulate(grads, *feat, fv.shape(), df);
                }
                if wants(*weights) {
                    accumulate(grads, *weights, fv.shape(), dw);
                }
            }
            Op::NeighborMax { feat, argmax } => {
                let fv = val(*feat);
                let d = fv.cols();
                let n = g.rows();
                let mut df = vec![F::zero(); fv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    let oc = o % (n * d);
                    df[src * d + oc % d] += gd[oc];
                }
                accumulate(grads, *feat, fv.shape(), df);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                segments,
                heads,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (qd, vd) = (qv.cols(), vv.cols());
                let (dk, dv) = (qd / heads, vd / heads);
                let (qs, ks, vs) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![F::zero(); qv.len()];
                let mut dkk = vec![F::zero(); kv.len()];
                let mut dvv = vec![F::zero(); vv.len()];
                let pairs: usize = segments.iter().map(|s| s.len() * s.len()).sum();
                let mut db = vec![F::zero(); pairs];
                let (mut poff, mut boff) = (0, 0);
                for seg in segments {
                    let n = seg.len();
                    for h in 0..*heads {
                        for i in 0..n {
                            let p = &probs[poff..poff + n];
                            poff += n;
                            let gi = &gd[(seg.start + i) * vd + h * dv..][..dv];
                            // dP_ij = g_i . v_j ; dV_j += P_ij g_i
                            let dp: Vec<F> = (0..n)
                                .map(|j| {
                                    let vj = &vs[(seg.start + j) * vd + h * dv..][..dv];
                                    gi.iter().zip(vj).map(|(&a, &b)| a * b).sum()
                                })
                                .collect();
                            for (j, &pj) in p.iter().enumerate() {
                                let dvj = &mut dvv[(seg.start + j) * vd + h * dv..][..dv];
                                for (a, &b) in dvj.iter_mut().zip(gi) {
                                    *a += pj * b;
                                }
                            }
                            let dot: F = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                            let qi_off = (seg.start + i) * qd + h * dk;
                            for j in 0..n {
                                let dl = p[j] * (dp[j] - dot);
                                db[boff + i * n + j] += dl;
                                let kj_off = (seg.start + j) * qd + h * dk;
                                let ds = dl * *scale;
                                for c in 0..dk {
                                    dq[qi_off + c] += ds * ks[kj_off + c];
                                    dkk[kj_off + c] += ds * qs[qi_off + c];
                                }
                            }
                        }
                    }
                    boff += n * n;
                }
                if wants(*q) {
                    accumulate(grads, *q, qv.shape(), dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, kv.shape(), dkk);
                }
                if wants(*v) {
                    accumulate(grads, *v, vv.shape(), dvv);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        accumulate(grads, *b, val(*b).shape(), db);
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let n = labels.len();
                let scale = gd[0] / F::lit(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= F::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, val(*logits).shape(), d);
            }
            Op::WeightedSum { x, weights } => {
                let d = weights.iter().map(|&w| w * gd[0]).collect();
                accumulate(grads, *x, val(*x).shape(), d);
            }
        }
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, shape: &[usize], d: Vec<F>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape")),
    }
}

/// Channel-wise softmax of the `s` nearest neighbor weights of every centre.
/// `weights` is `[n*k x d]`; the result is `[n*s x d]`.
pub fn subspace_softmax<F: Scalar>(weights: &[F], n: usize, k: usize, d: usize, s: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * s * d];
    let mut col = vec![F::zero(); s];
    for i in 0..n {
        for c in 0..d {
            for j in 0..s {
                col[j] = weights[(i * k + j) * d + c];
            }
            softmax_in_place(&mut col);
            for j in 0..s {
                out[(i * s + j) * d + c] = col[j];
            }
        }
    }
    out
}
