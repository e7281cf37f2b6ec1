use serde::{Deserialize, Serialize};

use crate::mnel::Aggregation;
use crate::voxelizer::downsampled_len;
use crate::vsal::AttentionScale;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Object,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Flattened patch length `H_v * W_v`.
    pub patch_len: usize,
    pub feature_dim: usize,
    pub mnel_dims: [usize; 3],
    pub neighbors: usize,
    pub subspaces: usize,
    pub sample_rate: f64,
    /// Width of the attention layers; must equal the last MNEL width.
    pub dim: usize,
    pub num_voxels: usize,
    /// Hidden width of the fusion MLP after the two attention layers;
    /// 0 maps `2D -> D` in one stage.
    pub fusion_hidden: usize,
    pub multi_scale: bool,
    pub aggregation: Aggregation,
    pub absolute_pe: bool,
    pub relative_bias: bool,
    pub attention_scale: AttentionScale,
    /// Literal reading: ReLU after every MLP, including those feeding a
    /// softmax or a residual sum.
    pub projection_relu: bool,
    pub sampling_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_len: 100,
            feature_dim: 32,
            mnel_dims: [64, 64, 128],
            neighbors: 24,
            subspaces: 3,
            sample_rate: 0.75,
            dim: 128,
            num_voxels: 1024,
            fusion_hidden: 512,
            multi_scale: true,
            aggregation: Aggregation::Attentive,
            absolute_pe: true,
            relative_bias: true,
            attention_scale: AttentionScale::Model,
            projection_relu: false,
            sampling_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Input rows of the five encoder layers (three MNEL, two VSAL).
    pub fn row_counts(&self) -> [usize; 5] {
        let r0 = self.num_voxels;
        let r1 = downsampled_len(r0, self.sample_rate);
        let r2 = downsampled_len(r1, self.sample_rate);
        let r3 = downsampled_len(r2, self.sample_rate);
        [r0, r1, r2, r3, r3]
    }

    pub fn output_rows(&self) -> usize {
        self.row_counts()[4]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || self.feature_dim == 0 || self.mnel_dims.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if self.dim != self.mnel_dims[2] {
            return bad(format!(
                "attention width {} must equal the last MNEL width {}",
                self.dim, self.mnel_dims[2]
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample rate {} outside (0, 1]", self.sample_rate));
        }
        let rows = self.row_counts();
        if rows[..3].iter().any(|&r| r < self.neighbors) || rows[3] == 0 {
            return bad(format!(
                "{} voxels at rate {} leave {:?} rows, too few for {} neighbors",
                self.num_voxels, self.sample_rate, rows, self.neighbors
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: [512, 256],
            dropout: 0.5,
        }
    }
}

/// Sequence model applied to the per-segment tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModel {
    /// Class token and transformer encoder layers.
    Transformer,
    /// Mean of the segment tokens.
    AvgPool,
    /// Gated recurrent cell over the segment tokens; final state.
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S2tmConfig {
    pub segments: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub temporal: TemporalModel,
}

impl Default for S2tmConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            token_dim: 512,
            depth: 1,
            heads: 8,
            head_dim: 64,
            ffn_dim: 1024,
            temporal: TemporalModel::Transformer,
        }
    }
}

impl S2tmConfig {
    pub fn sequence_len(&self) -> usize {
        self.segments + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.token_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("temporal module sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub classes: usize,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub s2tm: S2tmConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Object,
            classes: 101,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            s2tm: S2tmConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Object classification settings used for the 101-class benchmark.
    pub fn object_reference() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.head.dropout)));
        }
        self.encoder.validate()?;
        if self.task == Task::Action {
            self.s2tm.validate()?;
        }
        Ok(())
    }
}
