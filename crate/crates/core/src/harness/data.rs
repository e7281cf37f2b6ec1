//! Dataset synthesis, conversion and loading.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::event_io::{parse_events, read_manifest, synthesize_stream, write_events, write_manifest};
use crate::event_io::{EventFormat, EventStream, SceneConfig};
use crate::model::Task;
use crate::voxelizer::{read_voxel_set, voxelize, write_voxel_set, VoxelGridConfig, VoxelSet};
use crate::{Error, Result};

use super::config::{RunConfig, SynthConfig};

/// Deterministic 64-bit mix of a seed and a list of stream coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
}

/// Writes `events/<split>_<index>.evs` plus `train.txt` and `test.txt`
/// manifests into `out`. Refuses to overwrite an existing dataset unless
/// `force` is set.
pub fn synthesize_dataset(cfg: &SynthConfig, seed: u64, out: &Path, force: bool) -> Result<SynthSummary> {
    if cfg.classes.len() < 2 {
        return Err(Error::Config("a dataset needs at least 2 classes".into()));
    }
    let events_dir = out.join("events");
    for existing in [out.join("train.txt"), out.join("test.txt"), events_dir.clone()] {
        if existing.exists() && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    std::fs::create_dir_all(&events_dir).map_err(|e| Error::io(&events_dir, e))?;
    let mut summary = SynthSummary { train: 0, test: 0 };
    for (split, per_class, split_id) in [("train", cfg.train_per_class, 0u64), ("test", cfg.test_per_class, 1)] {
        let jobs: Vec<(usize, u32)> = (0..per_class * cfg.classes.len())
            .map(|i| (i, (i % cfg.classes.len()) as u32))
            .collect();
        let entries = jobs
            .par_iter()
            .map(|&(i, label)| {
                let class = cfg.classes[label as usize];
                let scene = SceneConfig {
                    shape: class.shape,
                    motion: class.motion,
                    threshold: cfg.threshold,
                    duration_us: cfg.duration_us,
                    timestep_us: cfg.timestep_us,
                    width: cfg.width,
                    height: cfg.height,
                    seed: derive_seed(seed, &[split_id, i as u64]),
                    speed: cfg.speed,
                };
                let stream = synthesize_stream(&scene)?;
                let rel = PathBuf::from("events").join(format!("{split}_{i:05}.evs"));
                let path = out.join(&rel);
                std::fs::write(&path, write_events(&stream, EventFormat::Binary)).map_err(|e| Error::io(&path, e))?;
                Ok((rel, label))
            })
            .collect::<Result<Vec<_>>>()?;
        write_manifest(&out.join(format!("{split}.txt")), &entries)?;
        match split_id {
            0 => summary.train = entries.len(),
            _ => summary.test = entries.len(),
        }
    }
    Ok(summary)
}

pub fn read_stream(path: &Path) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_events(&bytes, EventFormat::from_path(path), None)
}

/// Voxelizes one event file and writes the `EVX1` result.
pub fn convert_file(input: &Path, output: &Path, cfg: &VoxelGridConfig, seed: u64) -> Result<VoxelSet> {
    let stream = read_stream(input)?;
    let set = voxelize(&stream, cfg, seed)?;
    write_voxel_set(output, &set)?;
    Ok(set)
}

/// A labeled event file from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub path: PathBuf,
    pub label: usize,
}

pub fn read_items(manifest: &Path, classes: usize) -> Result<Vec<Item>> {
    let items: Vec<Item> = read_manifest(manifest)?
        .into_iter()
        .map(|(path, label)| Item {
            path,
            label: label as usize,
        })
        .collect();
    if items.is_empty() {
        return Err(Error::parse(manifest.display().to_string(), "manifest lists no samples"));
    }
    if let Some(bad) = items.iter().find(|i| i.label >= classes) {
        return Err(Error::Label {
            label: bad.label,
            classes,
        });
    }
    Ok(items)
}

/// Loaded samples of one split: `sets[i]` holds the voxel sets of sample
/// `i` (one for objects, K for actions).
#[derive(Debug, Clone)]
pub struct Split {
    pub items: Vec<Item>,
    /// Event streams are kept for the action task, which re-voxelizes them
    /// every epoch.
    streams: Vec<Vec<EventStream>>,
    pub sets: Vec<Vec<VoxelSet>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Object samples are voxelized once through an `EVX1` cache next to the
    /// manifest; action samples are split into segments and voxelized with
    /// the padding seed of `epoch`.
    pub fn load(cfg: &RunConfig, manifest: &Path, split_id: u64) -> Result<Split> {
        let items = read_items(manifest, cfg.model.classes)?;
        match cfg.task() {
            Task::Object => {
                let cache = cache_dir(cfg, manifest);
                std::fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
                let sets = items
                    .par_iter()
                    .enumerate()
                    .map(|(i, item)| {
                        let name = item
                            .path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| format!("{i}"));
                        let bytes = std::fs::read(&item.path).map_err(|e| Error::io(&item.path, e))?;
                        let cached = cache.join(format!("{name}-{:016x}.evx", hash_bytes(&bytes)));
                        let set = match read_voxel_set(&cached) {
                            Ok(s) => s,
                            Err(_) => {
                                let stream = parse_events(&bytes, EventFormat::from_path(&item.path), None)?;
                                let seed = derive_seed(cfg.seed, &[2, split_id, i as u64]);
                                let set = voxelize(&stream, &cfg.voxel, seed)?;
                                write_voxel_set(&cached, &set)?;
                                set
                            }
                        };
                        Ok(vec![set])
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Split {
                    items,
                    streams: Vec::new(),
                    sets,
                })
            }
            Task::Action => {
                let k = cfg.model.s2tm.segments;
                let streams = items
                    .par_iter()
                    .map(|item| read_stream(&item.path)?.split_segments(k))
                    .collect::<Result<Vec<_>>>()?;
                let mut split = Split {
                    items,
                    streams,
                    sets: Vec::new(),
                };
                split.revoxelize(&cfg.voxel, derive_seed(cfg.seed, &[3, split_id]), 0)?;
                Ok(split)
            }
        }
    }

    /// Re-draws the padding of every action segment for `epoch`. No-op for
    /// object splits.
    pub fn revoxelize(&mut self, cfg: &VoxelGridConfig, seed: u64, epoch: u64) -> Result<()> {
        if self.streams.is_empty() {
            return Ok(());
        }
        self.sets = self
            .streams
            .par_iter()
            .enumerate()
            .map(|(i, segs)| {
                segs.iter()
                    .enumerate()
                    .map(|(k, s)| voxelize(s, cfg, derive_seed(seed, &[epoch, i as u64, k as u64])))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn is_action(&self) -> bool {
        !self.streams.is_empty()
    }
}

fn hash_bytes(bytes: &[u8]) -> u64 {
    bytes
        .chunks(8)
        .fold(bytes.len() as u64, |h, c| {
            let mut w = [0u8; 8];
            w[..c.len()].copy_from_slice(c);
            derive_seed(h, &[u64::from_le_bytes(w)])
        })
}

/// Cache directory keyed by the voxel settings and the run seed; file names
/// also carry a hash of the event bytes, so stale sets are never read.
fn cache_dir(cfg: &RunConfig, manifest: &Path) -> PathBuf {
    let key = toml::to_string(&cfg.voxel).unwrap_or_default();
    let mut h = derive_seed(cfg.seed, &[]);
    for b in key.bytes() {
        h = derive_seed(h, &[b as u64]);
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    base.join(format!("voxels-{h:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelizer::decode_voxel_set;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            width: 32,
            height: 32,
            duration_us: 20_000,
            timestep_us: 2_000,
            train_per_class: 2,
            test_per_class: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let s = synthesize_dataset(&small_synth(), 5, &a, false).unwrap();
        assert_eq!(s, SynthSummary { train: 6, test: 3 });
        let train = read_manifest(&a.join("train.txt")).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(train.iter().map(|e| e.1).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(std::fs::read_dir(a.join("events")).unwrap().count(), 9);

        assert!(matches!(synthesize_dataset(&small_synth(), 5, &a, false), Err(Error::Config(_))));
        let b = dir.path().join("b");
        synthesize_dataset(&small_synth(), 5, &b, false).unwrap();
        for (x, _) in &train {
            let name = x.file_name().unwrap();
            let y = b.join("events").join(name);
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        synthesize_dataset(&small_synth(), 5, &a, true).unwrap();
    }

    #[test]
    fn convert_matches_in_memory_voxelization() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_dataset(&small_synth(), 1, dir.path(), false).unwrap();
        let input = dir.path().join("events/train_00000.evs");
        let out = dir.path().join("x.evx");
        let cfg = VoxelGridConfig {
            voxel_height: 4,
            voxel_width: 4,
            num_voxels: 64,
            ..VoxelGridConfig::default()
        };
        let written = convert_file(&input, &out, &cfg, 9).unwrap();
        let loaded = decode_voxel_set(&std::fs::read(&out).unwrap()).unwrap();
        let direct = voxelize(&read_stream(&input).unwrap(), &cfg, 9).unwrap();
        assert_eq!(loaded, direct);
        assert_eq!(written, direct);
        assert_eq!(loaded.len(), 64);
    }
}
