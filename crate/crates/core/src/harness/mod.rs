//! Pipeline behind the `evstr` command line: synthesis, conversion,
//! training, evaluation, gradient checks and model reports.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod train;

use std::fmt::Write as _;

pub use config::{ClassSpec, RunConfig, SynthConfig};
pub use data::{convert_file, derive_seed, read_stream, synthesize_dataset, Split, SynthSummary};
pub use gradcheck::{run_gradcheck, tiny_model_config, Component};
pub use train::{evaluate, evaluate_checkpoint, Confusion, EpochMetrics, MetricsReport, Trainer, METRICS_HEADER};

use crate::event_io::{MotionKind, ShapeKind};
use crate::model::{Model, ModelConfig, Task};
use crate::voxelizer::VoxelGridConfig;
use crate::Result;

/// Published complexity of the object model on N-Caltech101.
pub const REFERENCE_PARAMS: f64 = 0.93e6;
pub const REFERENCE_MACS: f64 = 0.34e9;

/// Layer table, totals and the published reference values.
pub fn info_report(cfg: &ModelConfig) -> Result<String> {
    let (model, store) = Model::build::<f32>(cfg)?;
    let c = model.complexity();
    let mut s = String::new();
    writeln!(s, "task: {:?}, classes: {}", cfg.task, cfg.classes).unwrap();
    let rows = cfg.encoder.row_counts();
    writeln!(
        s,
        "encoder input rows: {}",
        rows.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("/")
    )
    .unwrap();
    writeln!(s, "encoder output: {} x {}", cfg.encoder.output_rows(), cfg.encoder.dim).unwrap();
    writeln!(s, "{c}").unwrap();
    writeln!(s, "trainable parameters: {}", store.trainable_scalars()).unwrap();
    write!(
        s,
        "reference (N-Caltech101 object model): {:.2} M params, {:.2} G MACs",
        REFERENCE_PARAMS / 1e6,
        REFERENCE_MACS / 1e9
    )
    .unwrap();
    Ok(s)
}

/// Small synthetic object task: translating disk, rotating bar, expanding
/// square; 100 train and 20 test samples per class, 256 voxels.
pub fn desk_object_config() -> RunConfig {
    let mut c = RunConfig::object_defaults();
    c.epochs = 12;
    c.batch_size = 16;
    c.lr_max = 3e-2;
    c.lr_min = 1e-6;
    c.synth = SynthConfig {
        width: 48,
        height: 48,
        duration_us: 60_000,
        timestep_us: 2_000,
        train_per_class: 100,
        test_per_class: 20,
        ..SynthConfig::default()
    };
    c.voxel = VoxelGridConfig {
        voxel_height: 4,
        voxel_width: 4,
        voxel_duration: 1.0,
        compensation: 4.0,
        num_voxels: 256,
    };
    desk_model(&mut c.model, Task::Object);
    c
}

/// Small synthetic action task: one shape under three motions, K = 4.
pub fn desk_action_config() -> RunConfig {
    let mut c = desk_object_config();
    c.epochs = 12;
    c.batch_size = 16;
    c.lr_max = 1e-2;
    c.lr_min = 1e-7;
    c.synth.classes = [MotionKind::Translate, MotionKind::Rotate, MotionKind::Expand]
        .map(|motion| ClassSpec {
            shape: ShapeKind::Square,
            motion,
        })
        .to_vec();
    c.voxel.num_voxels = 128;
    desk_model(&mut c.model, Task::Action);
    c
}

fn desk_model(m: &mut ModelConfig, task: Task) {
    m.task = task;
    m.classes = 3;
    let e = &mut m.encoder;
    e.patch_len = 16;
    e.feature_dim = 16;
    e.mnel_dims = [16, 16, 32];
    e.neighbors = 12;
    e.dim = 32;
    e.fusion_hidden = 64;
    e.num_voxels = if task == Task::Object { 256 } else { 128 };
    m.head.hidden = [64, 32];
    m.head.dropout = 0.3;
    m.s2tm.segments = 4;
    m.s2tm.token_dim = 32;
    m.s2tm.heads = 4;
    m.s2tm.head_dim = 8;
    m.s2tm.ffn_dim = 64;
}
