//! Event stream to voxel set conversion.
//!
//! A stream is normalized to the time range `[0, T]`, binned into a 3D grid
//! of `H_v x W_v x T_v` cells, and every non-empty cell integrates its events
//! into a 2D patch by summing `p * t*` per pixel. The densest `N_v` cells
//! form the voxel set.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::event_io::EventStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridConfig {
    pub voxel_height: u16,
    pub voxel_width: u16,
    /// Temporal extent of a voxel in normalized time units.
    pub voxel_duration: f64,
    /// Compensation coefficient: the normalized stream spans `[0, T]`.
    pub compensation: f64,
    pub num_voxels: usize,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self {
            voxel_height: 10,
            voxel_width: 10,
            voxel_duration: 1.0,
            compensation: 4.0,
            num_voxels: 1024,
        }
    }
}

impl VoxelGridConfig {
    pub fn patch_len(&self) -> usize {
        self.voxel_height as usize * self.voxel_width as usize
    }

    /// Number of temporal bins; events at `t* = T` clamp into the last one.
    pub fn temporal_bins(&self) -> u32 {
        ((self.compensation / self.voxel_duration).ceil() as u32).max(1)
    }

    pub fn validate(&self, width: u16, height: u16) -> Result<()> {
        if self.voxel_height == 0 || self.voxel_width == 0 || self.num_voxels == 0 {
            return Err(Error::Config("voxel sizes and count must be at least 1".into()));
        }
        if !(self.voxel_duration > 0.0) || !(self.compensation > 0.0) {
            return Err(Error::Config(
                "voxel duration and compensation coefficient must be positive".into(),
            ));
        }
        if width % self.voxel_width != 0 || height % self.voxel_height != 0 {
            return Err(Error::Config(format!(
                "sensor {width}x{height} is not divisible into {}x{} voxels",
                self.voxel_width, self.voxel_height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedEvent {
    pub x: u16,
    pub y: u16,
    pub t: f64,
    pub p: i8,
}

/// Maps timestamps affinely onto `[0, compensation]`.
pub fn normalize_time(stream: &EventStream, compensation: f64) -> Result<Vec<NormalizedEvent>> {
    let (first, last) = stream.time_span().ok_or(Error::EmptyStream)?;
    if first == last {
        return Err(Error::DegenerateDuration(first));
    }
    let span = (last - first) as f64;
    Ok(stream
        .events()
        .iter()
        .map(|e| NormalizedEvent {
            x: e.x,
            y: e.y,
            t: compensation * (e.t - first) as f64 / span,
            p: e.p.sign(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawVoxel {
    /// Grid coordinate `(x^c, y^c, t^c)`.
    pub coord: [u32; 3],
    /// Internal events in stream order.
    pub events: Vec<NormalizedEvent>,
}

impl RawVoxel {
    pub fn count(&self) -> usize {
        self.events.len()
    }
}

pub fn voxel_coord(e: &NormalizedEvent, cfg: &VoxelGridConfig) -> [u32; 3] {
    let tb = ((e.t / cfg.voxel_duration).floor().max(0.0) as u32).min(cfg.temporal_bins() - 1);
    [
        e.x as u32 / cfg.voxel_width as u32,
        e.y as u32 / cfg.voxel_height as u32,
        tb,
    ]
}

/// Bins normalized events into grid cells. Only non-empty cells are
/// returned, ordered by coordinate.
pub fn build_voxel_grid(events: &[NormalizedEvent], cfg: &VoxelGridConfig) -> Vec<RawVoxel> {
    let mut cells: BTreeMap<[u32; 3], Vec<NormalizedEvent>> = BTreeMap::new();
    for e in events {
        cells.entry(voxel_coord(e, cfg)).or_default().push(*e);
    }
    cells
        .into_iter()
        .map(|(coord, events)| RawVoxel { coord, events })
        .collect()
}

/// Accumulates `p * t*` per local pixel. Returns an `H_v x W_v` patch
/// flattened row-major (`y_loc * W_v + x_loc`).
pub fn integrate_patch(voxel: &RawVoxel, cfg: &VoxelGridConfig) -> Vec<f64> {
    let (vw, vh) = (cfg.voxel_width as usize, cfg.voxel_height as usize);
    let mut patch = vec![0.0; vw * vh];
    for e in &voxel.events {
        let (xl, yl) = (e.x as usize % vw, e.y as usize % vh);
        patch[yl * vw + xl] += e.p as f64 * e.t;
    }
    patch
}

/// A fixed-size voxel set: coordinates, flattened patches and event counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub coords: Vec<[f32; 3]>,
    /// Row-major `len() x patch_len` matrix.
    pub patches: Vec<f32>,
    pub patch_len: usize,
    pub counts: Vec<u32>,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    /// Reorders rows: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> VoxelSet {
        VoxelSet {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            patches: order.iter().flat_map(|&i| self.patch(i).to_vec()).collect(),
            patch_len: self.patch_len,
            counts: order.iter().map(|&i| self.counts[i]).collect(),
        }
    }
}

/// Keeps the `num_voxels` densest cells (ties by ascending coordinate). With
/// fewer cells than requested, every cell is kept and the set is padded with
/// uniformly re-sampled copies drawn from `seed`.
pub fn select_voxels(
    raw: &[RawVoxel],
    num_voxels: usize,
    cfg: &VoxelGridConfig,
    seed: u64,
) -> Result<VoxelSet> {
    if raw.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        raw[b]
            .count()
            .cmp(&raw[a].count())
            .then_with(|| raw[a].coord.cmp(&raw[b].coord))
    });
    order.truncate(num_voxels);
    if order.len() < num_voxels {
        let kept = order.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while order.len() < num_voxels {
            order.push(order[rng.random_range(0..kept)]);
        }
    }
    let patch_len = cfg.patch_len();
    let mut set = VoxelSet {
        coords: Vec::with_capacity(num_voxels),
        patches: Vec::with_capacity(num_voxels * patch_len),
        patch_len,
        counts: Vec::with_capacity(num_voxels),
    };
    for &i in &order {
        let v = &raw[i];
        set.coords.push([v.coord[0] as f32, v.coord[1] as f32, v.coord[2] as f32]);
        set.patches
            .extend(integrate_patch(v, cfg).into_iter().map(|x| x as f32));
        set.counts.push(v.count() as u32);
    }
    Ok(set)
}

/// Full conversion of one stream.
pub fn voxelize(stream: &EventStream, cfg: &VoxelGridConfig, seed: u64) -> Result<VoxelSet> {
    cfg.validate(stream.width(), stream.height())?;
    let events = normalize_time(stream, cfg.compensation)?;
    let raw = build_voxel_grid(&events, cfg);
    select_voxels(&raw, cfg.num_voxels, cfg, seed)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of rows kept by a downsampling step at rate `rate`.
pub fn downsampled_len(rows: usize, rate: f64) -> usize {
    (rate * rows as f64).floor() as usize
}

/// Chooses `floor(rate * N)` distinct rows.
///
/// Each row draws a pseudo-random key from `seed` and its coordinate; the
/// rows with the smallest keys survive and come back in their original
/// order. Rows with distinct coordinates therefore form a uniform random
/// subset, and the choice follows the rows under any permutation of the
/// input.
pub fn downsample_indices(coords: &[[f32; 3]], rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("sampling rate {rate} outside (0, 1]")));
    }
    let keep = downsampled_len(coords.len(), rate);
    if keep == 0 {
        return Err(Error::Config(format!(
            "sampling {} rows at rate {rate} keeps nothing",
            coords.len()
        )));
    }
    let mut keyed: Vec<(u64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let h = c
                .iter()
                .fold(mix64(seed), |h, v| mix64(h ^ v.to_bits() as u64));
            (h, i)
        })
        .collect();
    if keep < keyed.len() {
        keyed.select_nth_unstable(keep - 1);
        keyed.truncate(keep);
    }
    let mut idx: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Row sampling of paired coordinate and feature matrices (`features` is
/// row-major with `width` columns).
pub fn random_downsample(
    coords: &[[f32; 3]],
    features: &[f32],
    width: usize,
    rate: f64,
    seed: u64,
) -> Result<(Vec<[f32; 3]>, Vec<f32>)> {
    if features.len() != coords.len() * width {
        return Err(Error::shape(
            "random_downsample",
            &[coords.len(), 3],
            &[features.len() / width.max(1), width],
        ));
    }
    let idx = downsample_indices(coords, rate, seed)?;
    let c = idx.iter().map(|&i| coords[i]).collect();
    let f = idx
        .iter()
        .flat_map(|&i| features[i * width..(i + 1) * width].iter().copied())
        .collect();
    Ok((c, f))
}

const EVX_MAGIC: &[u8; 4] = b"EVX1";

/// `EVX1` dump: magic, u32 N_v, u32 patch length, then per voxel three f32
/// coordinates, the f32 patch and a u32 event count, all little-endian.
pub fn encode_voxel_set(set: &VoxelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + set.len() * (16 + 4 * set.patch_len));
    out.extend_from_slice(EVX_MAGIC);
    out.write_u32::<LittleEndian>(set.len() as u32).unwrap();
    out.write_u32::<LittleEndian>(set.patch_len as u32).unwrap();
    for i in 0..set.len() {
        for &c in &set.coords[i] {
            out.write_f32::<LittleEndian>(c).unwrap();
        }
        for &v in set.patch(i) {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out.write_u32::<LittleEndian>(set.counts[i]).unwrap();
    }
    out
}

pub fn decode_voxel_set(bytes: &[u8]) -> Result<VoxelSet> {
    if bytes.len() < 12 || &bytes[..4] != EVX_MAGIC {
        return Err(Error::parse("offset 0", "missing EVX1 header"));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let n = cur.read_u32::<LittleEndian>().unwrap() as usize;
    let patch_len = cur.read_u32::<LittleEndian>().unwrap() as usize;
    let expected = 12 + n * (16 + 4 * patch_len);
    if bytes.len() != expected {
        return Err(Error::parse(
            format!("offset {}", bytes.len().min(expected)),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut set = VoxelSet {
        coords: Vec::with_capacity(n),
        patches: vec![0.0; n * patch_len],
        patch_len,
        counts: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut c = [0f32; 3];
        cur.read_f32_into::<LittleEndian>(&mut c).unwrap();
        set.coords.push(c);
        cur.read_f32_into::<LittleEndian>(&mut set.patches[i * patch_len..(i + 1) * patch_len])
            .unwrap();
        set.counts.push(cur.read_u32::<LittleEndian>().unwrap());
    }
    debug_assert!(cur.read(&mut [0u8; 1]).unwrap() == 0);
    Ok(set)
}

pub fn write_voxel_set(path: &Path, set: &VoxelSet) -> Result<()> {
    std::fs::write(path, encode_voxel_set(set)).map_err(|e| Error::io(path, e))
}

pub fn read_voxel_set(path: &Path) -> Result<VoxelSet> {
    decode_voxel_set(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
