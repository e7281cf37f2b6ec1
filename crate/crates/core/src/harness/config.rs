use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::event_io::{MotionKind, ShapeKind};
use crate::model::{ModelConfig, Task};
use crate::voxelizer::VoxelGridConfig;
use crate::{Error, Result};

/// One synthetic class: a shape and how it moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: ShapeKind,
    pub motion: MotionKind,
}

/// Synthetic dataset description used by `evstr synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub timestep_us: u64,
    pub threshold: f64,
    pub speed: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: Vec<ClassSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            duration_us: 100_000,
            timestep_us: 2_000,
            threshold: 0.25,
            speed: 1.0,
            train_per_class: 100,
            test_per_class: 20,
            classes: vec![
                ClassSpec {
                    shape: ShapeKind::Disk,
                    motion: MotionKind::Translate,
                },
                ClassSpec {
                    shape: ShapeKind::Bar,
                    motion: MotionKind::Rotate,
                },
                ClassSpec {
                    shape: ShapeKind::Square,
                    motion: MotionKind::Expand,
                },
            ],
        }
    }
}

/// Everything a training or evaluation run needs. Paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Dataset directory holding `train.txt` and `test.txt`.
    pub data_dir: PathBuf,
    pub voxel: VoxelGridConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::object_defaults()
    }
}

impl RunConfig {
    /// Object classification schedule: 250 epochs, batch 32, lr 3e-2 to 1e-6.
    pub fn object_defaults() -> Self {
        Self {
            seed: 0,
            epochs: 250,
            batch_size: 32,
            lr_max: 3e-2,
            lr_min: 1e-6,
            momentum: 0.9,
            data_dir: PathBuf::from("data"),
            voxel: VoxelGridConfig::default(),
            model: ModelConfig::object_reference(),
            synth: SynthConfig::default(),
        }
    }

    /// Action recognition schedule: 300 epochs, batch 16, lr 1e-2 to 1e-7.
    pub fn action_defaults() -> Self {
        let mut c = Self::object_defaults();
        c.epochs = 300;
        c.batch_size = 16;
        c.lr_max = 1e-2;
        c.lr_min = 1e-7;
        c.model.task = Task::Action;
        c
    }

    pub fn task(&self) -> Task {
        self.model.task
    }

    /// Parses a TOML config. Missing keys take the defaults of the task named
    /// by `model.task`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let task = raw
            .get("model")
            .and_then(|m| m.get("task"))
            .and_then(|t| t.as_str())
            .unwrap_or("object");
        let mut base = match task {
            "object" => Self::object_defaults(),
            "action" => Self::action_defaults(),
            other => return Err(Error::Config(format!("unknown task '{other}'"))),
        };
        let defaults = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(defaults, raw);
        base = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data_dir.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("need at least 1 epoch and a batch size of at least 2".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config("learning rates must satisfy 0 <= lr_min <= lr_max".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.voxel.patch_len() != self.model.encoder.patch_len {
            return Err(Error::ConfigMismatch(format!(
                "voxel patches have {} entries but the encoder expects {}",
                self.voxel.patch_len(),
                self.model.encoder.patch_len
            )));
        }
        if self.voxel.num_voxels != self.model.encoder.num_voxels {
            return Err(Error::ConfigMismatch(format!(
                "voxelizer keeps {} voxels but the encoder expects {}",
                self.voxel.num_voxels, self.model.encoder.num_voxels
            )));
        }
        self.model.validate()
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir.join("train.txt")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir.join("test.txt")
    }
}

/// Recursively overlays `top` on `base`.
fn merge(base: toml::Value, top: toml::Value) -> toml::Value {
    match (base, top) {
        (toml::Value::Table(mut b), toml::Value::Table(t)) => {
            for (k, v) in t {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, t) => t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_defaults() {
        let o = RunConfig::from_toml("").unwrap();
        assert_eq!((o.epochs, o.batch_size, o.lr_max, o.lr_min), (250, 32, 3e-2, 1e-6));
        assert_eq!(o.voxel.compensation, 4.0);
        let a = RunConfig::from_toml("[model]\ntask = \"action\"\n").unwrap();
        assert_eq!((a.epochs, a.batch_size, a.lr_max, a.lr_min), (300, 16, 1e-2, 1e-7));
        assert_eq!(a.model.s2tm.segments, 4);
    }

    #[test]
    fn partial_override_and_round_trip() {
        let c = RunConfig::from_toml("epochs = 3\n[model.encoder]\nneighbors = 8\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.encoder.neighbors, 8);
        assert_eq!(c.model.encoder.dim, 128);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_toml("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[[synth.classes]]\nshape = \"hexagon\"\nmotion = \"rotate\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[voxel]\nvoxel_width = 5\n"),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(RunConfig::from_toml("batch_size = 1").is_err());
    }
}
