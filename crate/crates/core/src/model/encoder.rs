//! Voxel feature encoding and the five-layer set encoder.

use crate::mnel::{Mnel, MnelConfig};
use crate::nn::{Activation, Ctx, Mlp, ParamBuilder, Scalar, Segments, Tensor, Var};
use crate::voxelizer::{downsample_indices, VoxelSet};
use crate::vsal::{Vsal, VsalConfig};
use crate::{Error, Result};

use super::config::EncoderConfig;
use super::LayerInfo;

/// Seed for one sampling step of one voxel set.
pub(crate) fn sampling_seed(base: u64, step: u64, layer: usize, set: usize) -> u64 {
    let mut z = base ^ step.rotate_left(17) ^ ((layer as u64) << 56) ^ (set as u64).wrapping_mul(0x9E37_79B9);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub voxel: Mlp,
    pub mnel: [Mnel; 3],
    pub vsal: [Vsal; 2],
    pub fusion: Vec<Mlp>,
}

/// Encoder output for a batch of voxel sets.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[sum of output rows x D]`.
    pub features: Var,
    /// Output rows of each input set.
    pub segments: Segments,
    pub coords: Vec<[f32; 3]>,
}

fn segments_of(lengths: impl Iterator<Item = usize>) -> Segments {
    let mut start = 0;
    lengths
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

impl Encoder {
    pub fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        b.scoped("encoder", |b| {
            let voxel = Mlp::new(b, "voxel", cfg.patch_len, cfg.feature_dim, Activation::Relu)?;
            let dims = [cfg.feature_dim, cfg.mnel_dims[0], cfg.mnel_dims[1], cfg.mnel_dims[2]];
            let mut mnel = Vec::with_capacity(3);
            for l in 0..3 {
                let mut mc = MnelConfig::new(dims[l], dims[l + 1], cfg.neighbors, cfg.subspaces);
                mc.multi_scale = cfg.multi_scale;
                mc.aggregation = cfg.aggregation;
                mc.projection_relu = cfg.projection_relu;
                mnel.push(Mnel::new(b, &format!("mnel{}", l + 1), mc)?);
            }
            let mut vsal = Vec::with_capacity(2);
            for l in 0..2 {
                let mut vc = VsalConfig::new(cfg.dim);
                vc.absolute_pe = cfg.absolute_pe;
                vc.relative_bias = cfg.relative_bias;
                vc.scale = cfg.attention_scale;
                vc.projection_relu = cfg.projection_relu;
                vsal.push(Vsal::new(b, &format!("vsal{}", l + 1), vc)?);
            }
            let fusion = b.scoped("fusion", |b| {
                if cfg.fusion_hidden == 0 {
                    Ok(vec![Mlp::new(b, "out", 2 * cfg.dim, cfg.dim, Activation::Relu)?])
                } else {
                    Ok(vec![
                        Mlp::new(b, "hidden", 2 * cfg.dim, cfg.fusion_hidden, Activation::Relu)?,
                        Mlp::new(b, "out", cfg.fusion_hidden, cfg.dim, Activation::Relu)?,
                    ])
                }
            })?;
            Ok(Encoder {
                cfg: cfg.clone(),
                voxel,
                mnel: mnel.try_into().expect("three layers"),
                vsal: vsal.try_into().expect("two layers"),
                fusion,
            })
        })
    }

    /// Voxel features of the concatenated patches of `sets`.
    pub fn encode_voxels<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, sets: &[&VoxelSet]) -> Result<Var> {
        let rows: usize = sets.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(rows * self.cfg.patch_len);
        for s in sets {
            if s.patch_len != self.cfg.patch_len {
                return Err(Error::shape(
                    "voxel features",
                    &[s.len(), s.patch_len],
                    &[s.len(), self.cfg.patch_len],
                ));
            }
            data.extend(s.patches.iter().map(|&v| F::lit(v as f64)));
        }
        let x = ctx.constant(Tensor::matrix(rows, self.cfg.patch_len, data));
        self.voxel.forward(ctx, x)
    }

    /// Runs the encoder on a batch of voxel sets. `step` varies the voxel
    /// sampling between training steps; evaluation uses a fixed value.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, sets: &[&VoxelSet], step: u64) -> Result<Encoded> {
        if sets.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut x = self.encode_voxels(ctx, sets)?;
        let mut coords: Vec<[f32; 3]> = sets.iter().flat_map(|s| s.coords.iter().copied()).collect();
        let mut segments = segments_of(sets.iter().map(|s| s.len()));
        for (l, mnel) in self.mnel.iter().enumerate() {
            x = mnel.forward(ctx, x, &coords, &segments)?;
            let mut idx = Vec::new();
            let mut lens = Vec::with_capacity(segments.len());
            for (s, seg) in segments.iter().enumerate() {
                let seed = sampling_seed(self.cfg.sampling_seed, step, l, s);
                let keep = downsample_indices(&coords[seg.clone()], self.cfg.sample_rate, seed)?;
                lens.push(keep.len());
                idx.extend(keep.into_iter().map(|i| i + seg.start));
            }
            coords = idx.iter().map(|&i| coords[i]).collect();
            x = ctx.graph.gather(x, idx)?;
            segments = segments_of(lens.into_iter());
        }
        let a1 = self.vsal[0].forward(ctx, x, &coords, &segments)?;
        let a2 = self.vsal[1].forward(ctx, a1, &coords, &segments)?;
        let mut y = ctx.graph.concat_cols(&[a1, a2])?;
        for m in &self.fusion {
            y = m.forward(ctx, y)?;
        }
        Ok(Encoded {
            features: y,
            segments,
            coords,
        })
    }

    pub fn param_count(&self) -> usize {
        self.voxel.param_count()
            + self.mnel.iter().map(Mnel::param_count).sum::<usize>()
            + self.vsal.iter().map(Vsal::param_count).sum::<usize>()
            + self.fusion.iter().map(Mlp::param_count).sum::<usize>()
    }

    /// Per-layer rows, widths, parameters and multiply-accumulates for one
    /// voxel set.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let rows = self.cfg.row_counts();
        let mut out = vec![LayerInfo {
            name: "encoder.voxel".into(),
            rows: rows[0],
            d_in: self.cfg.patch_len,
            d_out: self.cfg.feature_dim,
            params: self.voxel.param_count(),
            macs: self.voxel.macs(rows[0]),
        }];
        for (l, m) in self.mnel.iter().enumerate() {
            out.push(LayerInfo {
                name: format!("encoder.mnel{}", l + 1),
                rows: rows[l],
                d_in: m.cfg.d_in,
                d_out: m.cfg.d_out,
                params: m.param_count(),
                macs: m.macs(rows[l]),
            });
        }
        for (l, v) in self.vsal.iter().enumerate() {
            out.push(LayerInfo {
                name: format!("encoder.vsal{}", l + 1),
                rows: rows[3 + l],
                d_in: v.cfg.dim,
                d_out: v.cfg.dim,
                params: v.param_count(),
                macs: v.macs(rows[3 + l]),
            });
        }
        out.push(LayerInfo {
            name: "encoder.fusion".into(),
            rows: rows[4],
            d_in: 2 * self.cfg.dim,
            d_out: self.cfg.dim,
            params: self.fusion.iter().map(Mlp::param_count).sum(),
            macs: self.fusion.iter().map(|m| m.macs(rows[4])).sum(),
        });
        out
    }
}
