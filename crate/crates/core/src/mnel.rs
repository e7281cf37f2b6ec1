//! Multi-scale neighbor embedding layer.
//!
//! For every voxel the `N_n` nearest voxels (itself first) are encoded from
//! their features and their relative position, fused into per-channel
//! relational weights, and aggregated over `S` nested neighborhoods of
//! sizes `k * N_n / S`. A shortcut projection of the input is added.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Ctx, Mlp, ParamBuilder, Scalar, Segments, Tensor, Var};
use crate::{Error, Result};

/// `N_n` nearest neighbors of every row, nearest first, self at entry 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    /// Row-major `N x k`.
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

fn sq_dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|d| (a[d] as f64 - b[d] as f64).powi(2)).sum()
}

/// Exact k-nearest neighbors under squared Euclidean distance.
///
/// Entry 0 is always the query row itself; the others follow by ascending
/// distance, ties broken by ascending index.
pub fn knn(coords: &[[f32; 3]], k: usize) -> Result<NeighborIndex> {
    let n = coords.len();
    if k == 0 || n < k {
        return Err(Error::InsufficientVoxels {
            needed: k.max(1),
            available: n,
        });
    }
    let row = |i: usize| {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(&coords[i], &coords[j]), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k - 1 < others.len() && k > 1 {
            others.select_nth_unstable_by(k - 2, cmp);
            others.truncate(k - 1);
        }
        if k == 1 {
            others.clear();
        }
        others.sort_unstable_by(cmp);
        let mut out = Vec::with_capacity(k);
        out.push(i);
        out.extend(others.into_iter().map(|(_, j)| j));
        out
    };
    let rows: Vec<Vec<usize>> = if n * n >= 1 << 16 {
        (0..n).into_par_iter().map(row).collect()
    } else {
        (0..n).map(row).collect()
    };
    Ok(NeighborIndex {
        k,
        indices: rows.into_iter().flatten().collect(),
    })
}

/// `(c_i, c_i - c_ij)`.
pub fn relative_relation(ci: [f32; 3], cij: [f32; 3]) -> [f32; 6] {
    [ci[0], ci[1], ci[2], ci[0] - cij[0], ci[1] - cij[1], ci[2] - cij[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Softmax-weighted sum with learned relational weights.
    Attentive,
    /// Channel-wise max over each neighborhood; no relational weights.
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnelConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub neighbors: usize,
    pub subspaces: usize,
    /// When false, a single neighborhood of all `N_n` neighbors is used.
    pub multi_scale: bool,
    pub aggregation: Aggregation,
    /// Put a ReLU after the fusion, output and shortcut MLPs too.
    pub projection_relu: bool,
}

impl MnelConfig {
    pub fn new(d_in: usize, d_out: usize, neighbors: usize, subspaces: usize) -> Self {
        Self {
            d_in,
            d_out,
            neighbors,
            subspaces,
            multi_scale: true,
            aggregation: Aggregation::Attentive,
            projection_relu: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        (self.d_in / 2).max(1)
    }

    /// Neighborhood sizes, nearest subsets first.
    pub fn subspace_sizes(&self) -> Vec<usize> {
        if !self.multi_scale {
            return vec![self.neighbors];
        }
        (1..=self.subspaces)
            .map(|k| k * self.neighbors / self.subspaces)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.neighbors == 0 || self.subspaces == 0 {
            return Err(Error::Config("MNEL dimensions must be positive".into()));
        }
        if self.neighbors % self.subspaces != 0 {
            return Err(Error::Config(format!(
                "subspace count {} does not divide neighbor count {}",
                self.subspaces, self.neighbors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Mnel {
    pub cfg: MnelConfig,
    pub feature_enc: Mlp,
    pub relation_enc: Option<Mlp>,
    pub fuse: Option<Mlp>,
    pub output: Mlp,
    /// `None` when `d_in == d_out` (identity shortcut).
    pub shortcut: Option<Mlp>,
}

impl Mnel {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, name: &str, cfg: MnelConfig) -> Result<Self> {
        cfg.validate()?;
        let de = cfg.embed_dim();
        let proj = if cfg.projection_relu {
            Activation::Relu
        } else {
            Activation::None
        };
        b.scoped(name, |b| {
            let feature_enc = Mlp::new(b, "feature", cfg.d_in, de, Activation::Relu)?;
            let (relation_enc, fuse) = match cfg.aggregation {
                Aggregation::Attentive => (
                    Some(Mlp::new(b, "relation", 6, de, Activation::Relu)?),
                    Some(Mlp::new(b, "fuse", 2 * de, de, proj)?),
                ),
                Aggregation::MaxPool => (None, None),
            };
            let output = Mlp::new(b, "output", de, cfg.d_out, proj)?;
            let shortcut = if cfg.d_in != cfg.d_out {
                Some(Mlp::new(b, "shortcut", cfg.d_in, cfg.d_out, proj)?)
            } else {
                None
            };
            Ok(Mnel {
                cfg,
                feature_enc,
                relation_enc,
                fuse,
                output,
                shortcut,
            })
        })
    }

    /// Neighbor lists of all segments, as global row indices.
    pub fn neighbors(&self, coords: &[[f32; 3]], segments: &Segments) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(coords.len() * self.cfg.neighbors);
        for seg in segments {
            let nb = knn(&coords[seg.clone()], self.cfg.neighbors)?;
            idx.extend(nb.indices.iter().map(|&j| j + seg.start));
        }
        Ok(idx)
    }

    /// `features` is `[R x d_in]` for the concatenated rows of all segments;
    /// output is `[R x d_out]`.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut Ctx<'_, F>,
        features: Var,
        coords: &[[f32; 3]],
        segments: &Segments,
    ) -> Result<Var> {
        let rows = ctx.graph.value(features).rows();
        if ctx.graph.value(features).cols() != self.cfg.d_in || coords.len() != rows {
            return Err(Error::shape(
                "mnel",
                ctx.graph.shape(features),
                &[coords.len(), self.cfg.d_in],
            ));
        }
        let k = self.cfg.neighbors;
        let idx = self.neighbors(coords, segments)?;
        let sizes = self.cfg.subspace_sizes();

        let encoded = self.feature_enc.forward(ctx, features)?;
        let f_nb = ctx.graph.gather(encoded, idx.clone())?;
        let agg = match (&self.relation_enc, &self.fuse) {
            (Some(rel), Some(fuse)) => {
                let mut r = Vec::with_capacity(idx.len() * 6);
                for (pos, &j) in idx.iter().enumerate() {
                    let i = pos / k;
                    r.extend(relative_relation(coords[i], coords[j]).map(|v| F::lit(v as f64)));
                }
                let r = ctx.constant(Tensor::matrix(idx.len(), 6, r));
                let r = rel.forward(ctx, r)?;
                let cat = ctx.graph.concat_cols(&[f_nb, r])?;
                let w = fuse.forward(ctx, cat)?;
                ctx.graph.neighbor_attention(f_nb, w, k, &sizes)?
            }
            _ => ctx.graph.neighbor_max(f_nb, k, &sizes)?,
        };
        let out = self.output.forward(ctx, agg)?;
        let short = match &self.shortcut {
            Some(s) => s.forward(ctx, features)?,
            None => features,
        };
        ctx.graph.add(out, short)
    }

    pub fn param_count(&self) -> usize {
        self.feature_enc.param_count()
            + self.relation_enc.as_ref().map_or(0, Mlp::param_count)
            + self.fuse.as_ref().map_or(0, Mlp::param_count)
            + self.output.param_count()
            + self.shortcut.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        let pairs = rows * self.cfg.neighbors;
        self.feature_enc.macs(rows)
            + self.relation_enc.as_ref().map_or(0, |m| m.macs(pairs))
            + self.fuse.as_ref().map_or(0, |m| m.macs(pairs))
            + self.output.macs(rows)
            + self.shortcut.as_ref().map_or(0, |m| m.macs(rows))
    }
}
