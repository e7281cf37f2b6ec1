//! Seeded tiny instances of each component for `evstr gradcheck`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mnel::{Mnel, MnelConfig};
use crate::model::{EncoderConfig, HeadConfig, Model, ModelConfig, S2tm, S2tmConfig, Task};
use crate::nn::{grad_check, BatchNorm, Ctx, GradCheckOptions, GradCheckReport, Linear, Mode, ParamBuilder};
use crate::nn::{ParamStore, Segments, Tensor};
use crate::voxelizer::VoxelSet;
use crate::vsal::{Vsal, VsalConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Linear,
    Bn,
    Mnel,
    Vsal,
    S2tm,
    Full,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Linear,
        Component::Bn,
        Component::Mnel,
        Component::Vsal,
        Component::S2tm,
        Component::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Linear => "linear",
            Component::Bn => "bn",
            Component::Mnel => "mnel",
            Component::Vsal => "vsal",
            Component::S2tm => "s2tm",
            Component::Full => "full",
        }
    }

    /// Atomic layers are held to 1e-4, compositions to 1e-3.
    pub fn tolerance(self) -> f64 {
        match self {
            Component::Linear | Component::Bn => 1e-4,
            _ => 1e-3,
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component '{s}' (linear, bn, mnel, vsal, s2tm, full)")))
    }
}

/// Smallest end-to-end action model: 32 voxels, D_f = 8, MNEL widths
/// 8/8/16, D = 16, K = 2.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        task: Task::Action,
        classes: 3,
        encoder: EncoderConfig {
            patch_len: 9,
            feature_dim: 8,
            mnel_dims: [8, 8, 16],
            neighbors: 4,
            subspaces: 2,
            dim: 16,
            num_voxels: 32,
            fusion_hidden: 16,
            ..EncoderConfig::default()
        },
        head: HeadConfig {
            hidden: [16, 8],
            dropout: 0.0,
        },
        s2tm: S2tmConfig {
            segments: 2,
            token_dim: 8,
            heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            ..S2tmConfig::default()
        },
        init_seed: 0,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..4.0)])
        .collect()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, patch_len: usize) -> VoxelSet {
    VoxelSet {
        coords: random_coords(rng, n),
        patches: (0..n * patch_len).map(|_| rng.random_range(0.0..2.0)).collect(),
        patch_len,
        counts: vec![1; n],
    }
}

/// Runs the checker on a seeded instance of `component`. With `corrupt`,
/// analytic gradients are doubled before comparison, which must fail.
pub fn run_gradcheck(component: Component, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opts = GradCheckOptions::with_tol(component.tolerance());
    if corrupt {
        opts.corrupt_scale = Some(2.0);
    }
    let mut store = ParamStore::<f64>::new();
    match component {
        Component::Linear => {
            let lin = Linear::new(&mut ParamBuilder::new(&mut store, seed), "linear", 5, 3, true)?;
            let x = random(&mut rng, 4, 5);
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let xv = ctx.constant(x.clone());
                let y = lin.forward(&mut ctx, xv)?;
                let l = ctx.graph.cross_entropy(y, &[0, 2, 1, 2])?;
                Ok(ctx.probe(l, back))
            })
        }
        Component::Bn => {
            let (lin, bn) = {
                let mut b = ParamBuilder::new(&mut store, seed);
                (Linear::new(&mut b, "linear", 5, 4, true)?, BatchNorm::new(&mut b, "bn", 4)?)
            };
            let x = random(&mut rng, 8, 5);
            let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let xv = ctx.constant(x.clone());
                let y = lin.forward(&mut ctx, xv)?;
                let y = bn.forward(&mut ctx, y)?;
                let l = ctx.graph.weighted_sum(y, w.clone())?;
                Ok(ctx.probe(l, back))
            })
        }
        Component::Mnel => {
            let layer = Mnel::new(&mut ParamBuilder::new(&mut store, seed), "mnel", MnelConfig::new(8, 12, 6, 3))?;
            let coords = random_coords(&mut rng, 20);
            let segments: Segments = vec![0..9, 9..20];
            let x = random(&mut rng, 20, 8);
            let w: Vec<f64> = (0..20 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let xv = ctx.constant(x.clone());
                let y = layer.forward(&mut ctx, xv, &coords, &segments)?;
                let l = ctx.graph.weighted_sum(y, w.clone())?;
                Ok(ctx.probe(l, back))
            })
        }
        Component::Vsal => {
            let layer = Vsal::new(&mut ParamBuilder::new(&mut store, seed), "vsal", VsalConfig::new(16))?;
            let coords = random_coords(&mut rng, 11);
            let segments: Segments = vec![0..5, 5..11];
            let x = random(&mut rng, 11, 16);
            let w: Vec<f64> = (0..11 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let xv = ctx.constant(x.clone());
                let y = layer.forward(&mut ctx, xv, &coords, &segments)?;
                let l = ctx.graph.weighted_sum(y, w.clone())?;
                Ok(ctx.probe(l, back))
            })
        }
        Component::S2tm => {
            let cfg = tiny_model_config();
            let module = S2tm::new(&mut ParamBuilder::new(&mut store, seed), 16, &cfg.s2tm, 3)?;
            // 3 samples x 2 segments of 6 rows each
            let x = random(&mut rng, 36, 16);
            let segments: Segments = (0..6).map(|i| i * 6..(i + 1) * 6).collect();
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let xv = ctx.constant(x.clone());
                let tokens = module.tokens(&mut ctx, xv, &segments)?;
                let logits = module.classify(&mut ctx, tokens)?;
                let l = ctx.graph.cross_entropy(logits, &[0, 1, 2])?;
                Ok(ctx.probe(l, back))
            })
        }
        Component::Full => {
            let mut cfg = tiny_model_config();
            cfg.init_seed = seed;
            let (model, mut store) = Model::build::<f64>(&cfg)?;
            let sets: Vec<VoxelSet> = (0..4).map(|_| random_set(&mut rng, 32, 9)).collect();
            let samples: Vec<&[VoxelSet]> = sets.chunks(2).collect();
            opts.max_entries = Some(24);
            grad_check(&mut store, &opts, |s, back| {
                let mut ctx = Ctx::new(s, Mode::Train, 0);
                let logits = model.forward(&mut ctx, &samples, 1)?;
                let l = ctx.graph.cross_entropy(logits, &[0, 2])?;
                Ok(ctx.probe(l, back))
            })
        }
    }
}
