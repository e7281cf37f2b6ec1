//! Full object and action recognition models.

pub mod config;
pub mod encoder;
pub mod heads;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{EncoderConfig, HeadConfig, ModelConfig, S2tmConfig, Task, TemporalModel};
pub use encoder::{Encoded, Encoder};
pub use heads::{global_pool, GatedCell, ObjectHead, S2tm, Temporal, TransformerLayer};

use crate::nn::{Checkpoint, Ctx, Linear, Mode, ParamBuilder, ParamStore, Scalar, Var};
use crate::voxelizer::VoxelSet;
use crate::{Error, Result};

/// One row of the complexity table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub rows: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub params: usize,
    pub macs: u64,
}

impl LayerInfo {
    pub(crate) fn linear(name: &str, rows: usize, l: &Linear) -> Self {
        LayerInfo {
            name: name.into(),
            rows,
            d_in: l.d_in,
            d_out: l.d_out,
            params: l.param_count(),
            macs: l.macs(rows),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Object(ObjectHead),
    Action(S2tm),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
}

/// Per-layer parameters and multiply-accumulates for one sample.
#[derive(Debug, Clone)]
pub struct Complexity {
    pub layers: Vec<LayerInfo>,
    /// Encoder passes per sample (1 for objects, K for actions).
    pub encoder_passes: usize,
}

impl Complexity {
    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                if l.name.starts_with("encoder.") {
                    l.macs * self.encoder_passes as u64
                } else {
                    l.macs
                }
            })
            .sum()
    }
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>6} {:>6} {:>6} {:>10} {:>14}", "layer", "rows", "d_in", "d_out", "params", "MACs")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<18} {:>6} {:>6} {:>6} {:>10} {:>14}",
                l.name, l.rows, l.d_in, l.d_out, l.params, l.macs
            )?;
        }
        if self.encoder_passes > 1 {
            writeln!(f, "encoder layers run {} times per sample", self.encoder_passes)?;
        }
        write!(
            f,
            "total params {} ({:.3} M), MACs {} ({:.3} G)",
            self.params(),
            self.params() as f64 / 1e6,
            self.macs(),
            self.macs() as f64 / 1e9
        )
    }
}

impl Model {
    /// Builds the model and a fresh parameter store initialized from
    /// `cfg.init_seed`.
    pub fn build<F: Scalar>(cfg: &ModelConfig) -> Result<(Model, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, cfg.init_seed);
        let encoder = Encoder::new(&mut b, &cfg.encoder)?;
        let head = match cfg.task {
            Task::Object => Head::Object(ObjectHead::new(&mut b, cfg.encoder.dim, &cfg.head, cfg.classes)?),
            Task::Action => Head::Action(S2tm::new(&mut b, cfg.encoder.dim, &cfg.s2tm, cfg.classes)?),
        };
        Ok((
            Model {
                cfg: cfg.clone(),
                encoder,
                head,
            },
            store,
        ))
    }

    /// Voxel sets per sample: 1 for objects, K for actions.
    pub fn sets_per_sample(&self) -> usize {
        match self.cfg.task {
            Task::Object => 1,
            Task::Action => self.cfg.s2tm.segments,
        }
    }

    /// Logits `[B x C]` for a batch of samples, each a slice of voxel sets.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, samples: &[&[VoxelSet]], step: u64) -> Result<Var> {
        let k = self.sets_per_sample();
        if let Some(bad) = samples.iter().find(|s| s.len() != k) {
            return Err(Error::Config(format!(
                "sample has {} voxel sets, model expects {k}",
                bad.len()
            )));
        }
        let sets: Vec<&VoxelSet> = samples.iter().flat_map(|s| s.iter()).collect();
        let enc = self.encoder.forward(ctx, &sets, step)?;
        match &self.head {
            Head::Object(h) => h.forward(ctx, enc.features, &enc.segments),
            Head::Action(s) => {
                let tokens = s.tokens(ctx, enc.features, &enc.segments)?;
                s.classify(ctx, tokens)
            }
        }
    }

    /// Evaluation-mode logits, one row per sample.
    pub fn predict(&self, store: &mut ParamStore<f32>, samples: &[&[VoxelSet]]) -> Result<Vec<Vec<f32>>> {
        let mut ctx = Ctx::new(store, Mode::Eval, 0);
        let logits = self.forward(&mut ctx, samples, 0)?;
        let t = ctx.graph.value(logits);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + match &self.head {
                Head::Object(h) => h.param_count(),
                Head::Action(s) => s.param_count(),
            }
    }

    pub fn complexity(&self) -> Complexity {
        let mut layers = self.encoder.layers();
        match &self.head {
            Head::Object(h) => layers.extend(h.layers(1)),
            Head::Action(s) => layers.extend(s.layers()),
        }
        Complexity {
            layers,
            encoder_passes: self.sets_per_sample(),
        }
    }

    pub fn save(&self, store: &ParamStore<f32>, state: &TrainingState, path: &Path) -> Result<()> {
        let blob = CheckpointBlob {
            model: self.cfg.clone(),
            state: state.clone(),
        };
        let text = toml::to_string(&blob).map_err(|e| Error::Config(e.to_string()))?;
        Checkpoint::from_store(store, text).save(path)
    }

    /// Rebuilds a model from a checkpoint. With `expected` set, a differing
    /// stored configuration is a [`Error::ConfigMismatch`].
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, ParamStore<f32>, TrainingState)> {
        let ck = Checkpoint::load(path)?;
        let blob: CheckpointBlob =
            toml::from_str(&ck.config).map_err(|e| Error::Checkpoint(format!("bad config blob: {e}")))?;
        if let Some(exp) = expected {
            if exp != &blob.model {
                return Err(Error::ConfigMismatch(
                    "checkpoint was written for a different model configuration".into(),
                ));
            }
        }
        let (model, mut store) = Model::build::<f32>(&blob.model)?;
        ck.restore(&mut store)?;
        Ok((model, store, blob.state))
    }
}

/// Training progress stored next to the parameters. Optimizer momentum is
/// not persisted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingState {
    pub epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub test_acc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointBlob {
    model: ModelConfig,
    #[serde(default)]
    state: TrainingState,
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mnel::Aggregation;
    use crate::nn::{grad_check, GradCheckOptions, Tensor};
    use crate::vsal::AttentionScale;

    pub(crate) fn random_set(rng: &mut ChaCha8Rng, n: usize, patch_len: usize) -> VoxelSet {
        VoxelSet {
            coords: (0..n)
                .map(|_| [rng.random_range(0.0..12.0), rng.random_range(0.0..10.0), rng.random_range(0.0..8.0)])
                .collect(),
            patches: (0..n * patch_len).map(|_| rng.random_range(0.0..2.0)).collect(),
            patch_len,
            counts: vec![1; n],
        }
    }

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            task,
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
            init_seed: 11,
        }
    }

    fn sets(seed: u64, count: usize, cfg: &ModelConfig) -> Vec<VoxelSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| random_set(&mut rng, cfg.encoder.num_voxels, cfg.encoder.patch_len))
            .collect()
    }

    fn check_model(cfg: &ModelConfig, batch: usize) {
        let (model, mut store) = Model::build::<f64>(cfg).unwrap();
        let k = model.sets_per_sample();
        let data = sets(3, batch * k, cfg);
        let samples: Vec<&[VoxelSet]> = data.chunks(k).collect();
        let labels: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();
        let opts = GradCheckOptions {
            max_entries: Some(40),
            ..GradCheckOptions::with_tol(1e-3)
        };
        let report = grad_check(&mut store, &opts, |s, back| {
            let mut ctx = Ctx::new(s, Mode::Train, 0);
            let logits = model.forward(&mut ctx, &samples, 1)?;
            let l = ctx.graph.cross_entropy(logits, &labels)?;
            Ok(ctx.probe(l, back))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn object_model_gradients() {
        check_model(&tiny(Task::Object), 3);
    }

    #[test]
    fn action_model_gradients() {
        for temporal in [TemporalModel::Transformer, TemporalModel::AvgPool, TemporalModel::Recurrent] {
            let mut cfg = tiny(Task::Action);
            cfg.s2tm.temporal = temporal;
            check_model(&cfg, 2);
        }
    }

    #[test]
    fn transformer_with_inert_scores_matches_oracle() {
        let cfg = tiny(Task::Action);
        let mut store = ParamStore::<f64>::new();
        let s = S2tm::new(&mut ParamBuilder::new(&mut store, 4), 16, &cfg.s2tm, 3).unwrap();
        let Temporal::Transformer {
            class_token,
            position,
            layers,
        } = &s.temporal
        else {
            panic!("expected transformer");
        };
        let layer = &layers[0];
        for l in [&layer.query, &layer.key, &layer.ffn2] {
            store.get_mut(l.weight).value.fill(0.0);
            store.get_mut(l.bias.unwrap()).value.fill(0.0);
        }
        let (k, t) = (2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens: Vec<f64> = (0..2 * k * t).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let tv = ctx.constant(Tensor::matrix(2 * k, t, tokens.clone()));
        let out = s.classify(&mut ctx, tv).unwrap();
        let got = ctx.graph.value(out).clone();

        let p = |id| store.get(id).value.data().to_vec();
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            let (w, b) = (p(l.weight), p(l.bias.unwrap()));
            (0..l.d_out)
                .map(|o| b[o] + (0..l.d_in).map(|i| x[i] * w[i * l.d_out + o]).sum::<f64>())
                .collect()
        };
        let ln = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
        };
        let (cls, pos) = (p(*class_token), p(*position));
        for b in 0..2 {
            let seq: Vec<Vec<f64>> = (0..=k)
                .map(|j| {
                    let src = if j == 0 { &cls[..] } else { &tokens[(b * k + j - 1) * t..][..t] };
                    (0..t).map(|c| src[c] + pos[j * t + c]).collect()
                })
                .collect();
            let mut mean_v = vec![0.0; 8];
            for x in &seq {
                for (m, v) in mean_v.iter_mut().zip(lin(&ln(x), &layer.value)) {
                    *m += v / (k + 1) as f64;
                }
            }
            let attn = lin(&mean_v, &layer.proj);
            let cls_out: Vec<f64> = seq[0].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let logits = lin(&cls_out, &s.classifier);
            for c in 0..3 {
                assert!((got.row(b)[c] - logits[c]).abs() < 1e-9, "{b} {c}");
            }
        }
    }

    #[test]
    fn object_logits_ignore_voxel_order() {
        let cfg = tiny(Task::Object);
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        let data = sets(5, 2, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut order: Vec<usize> = (0..cfg.encoder.num_voxels).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = [data[0].permuted(&order), data[1].clone()];
        let a = model
            .predict(&mut store, &[std::slice::from_ref(&data[0]), std::slice::from_ref(&data[1])])
            .unwrap();
        let b = model
            .predict(&mut store, &[&permuted[..1], &permuted[1..]])
            .unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn action_logits_ignore_voxel_order_within_a_segment() {
        let cfg = tiny(Task::Action);
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        let data = sets(6, 4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seg in 0..4 {
            let mut order: Vec<usize> = (0..cfg.encoder.num_voxels).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut permuted = data.clone();
            permuted[seg] = data[seg].permuted(&order);
            let a = model.predict(&mut store, &data.chunks(2).collect::<Vec<_>>()).unwrap();
            let b = model.predict(&mut store, &permuted.chunks(2).collect::<Vec<_>>()).unwrap();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((x - y).abs() < 1e-5, "segment {seg}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn voxel_features() {
        let cfg = tiny(Task::Object);
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        let zero = VoxelSet {
            coords: vec![[0.0; 3]; 5],
            patches: vec![0.0; 5 * 9],
            patch_len: 9,
            counts: vec![1; 5],
        };
        let bias = model.encoder.voxel.linear.bias.unwrap();
        store.get_mut(bias).value.fill(0.0);
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let f = model.encoder.encode_voxels(&mut ctx, &[&zero]).unwrap();
        assert_eq!(ctx.graph.shape(f), &[5, 8]);
        assert!(ctx.graph.value(f).data().iter().all(|&v| v == 0.0));

        let wide = VoxelSet {
            patches: vec![0.0; 5 * 10],
            patch_len: 10,
            ..zero
        };
        assert!(matches!(
            model.encoder.encode_voxels(&mut ctx, &[&wide]),
            Err(Error::Shape { .. })
        ));

        let reference = Model::build::<f32>(&ModelConfig::object_reference()).unwrap().0;
        assert_eq!(reference.encoder.voxel.linear.d_in, 100);
        assert_eq!(reference.encoder.voxel.linear.d_out, 32);
    }

    #[test]
    fn voxel_feature_gradients() {
        let cfg = tiny(Task::Object);
        let (model, mut store) = Model::build::<f64>(&cfg).unwrap();
        let data = sets(12, 2, &cfg);
        let w: Vec<f64> = (0..64 * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let report = grad_check(&mut store, &GradCheckOptions::with_tol(1e-4), |s, back| {
            let mut ctx = Ctx::new(s, Mode::Train, 0);
            let f = model.encoder.encode_voxels(&mut ctx, &[&data[0], &data[1]])?;
            let l = ctx.graph.weighted_sum(f, w.clone())?;
            Ok(ctx.probe(l, back))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn pooling_of_constant_rows_duplicates_halves() {
        let mut store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let row = [0.5, -1.0, 2.0];
        let x = ctx.constant(Tensor::matrix(4, 3, row.repeat(4)));
        let p = global_pool(&mut ctx, x, &vec![0..4]).unwrap();
        assert_eq!(ctx.graph.value(p).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn sequence_length_and_linear_count() {
        for (k, len) in [(4, 5), (6, 7)] {
            let s2 = S2tmConfig {
                segments: k,
                ..S2tmConfig::default()
            };
            assert_eq!(s2.sequence_len(), len);
            let mut store = ParamStore::<f32>::new();
            let s = S2tm::new(&mut ParamBuilder::new(&mut store, 0), 128, &s2, 10).unwrap();
            let Temporal::Transformer { position, .. } = s.temporal else { panic!() };
            assert_eq!(store.get(position).value.shape(), &[len, 512]);
        }
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut ParamBuilder::new(&mut store, 0), "l", 4, 3, true).unwrap();
        assert_eq!(l.param_count(), 15);
        assert_eq!(store.trainable_scalars(), 15);
    }

    #[test]
    fn eval_is_deterministic_and_k1_works() {
        let mut cfg = tiny(Task::Action);
        cfg.s2tm.segments = 1;
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        let data = sets(2, 2, &cfg);
        let samples: Vec<&[VoxelSet]> = data.chunks(1).collect();
        let a = model.predict(&mut store, &samples).unwrap();
        let b = model.predict(&mut store, &samples).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn segment_count_mismatch_is_config_error() {
        let cfg = tiny(Task::Action);
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        let data = sets(2, 3, &cfg);
        let r = model.predict(&mut store, &[&data[..]]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = tiny(Task::Action);
        let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
        // move running statistics away from their init
        let data = sets(9, 6, &cfg);
        let samples: Vec<&[VoxelSet]> = data.chunks(2).collect();
        let mut ctx = Ctx::new(&mut store, Mode::Train, 0);
        model.forward(&mut ctx, &samples, 3).unwrap();
        let before = model.predict(&mut store, &samples).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.evck");
        let state = TrainingState {
            epoch: 7,
            epochs: 10,
            lr: 0.01,
            test_acc: 0.5,
        };
        model.save(&store, &state, &path).unwrap();
        let (loaded, mut store2, state2) = Model::load(&path, Some(&cfg)).unwrap();
        let after = loaded.predict(&mut store2, &samples).unwrap();
        assert_eq!(before, after);
        assert_eq!(state2, state);
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }

        let mut other = cfg.clone();
        other.classes = 4;
        assert!(matches!(Model::load(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn reference_object_model_size() {
        let cfg = ModelConfig::object_reference();
        let (model, store) = Model::build::<f32>(&cfg).unwrap();
        let c = model.complexity();
        assert_eq!(c.params(), store.trainable_scalars());
        assert_eq!(model.param_count(), store.trainable_scalars());
        assert!((500_000..1_500_000).contains(&c.params()), "{}", c.params());
        assert!((100_000_000..1_000_000_000).contains(&c.macs()), "{}", c.macs());
    }

    #[test]
    fn tiny_object_counts_by_hand() {
        let cfg = tiny(Task::Object);
        let (model, store) = Model::build::<f32>(&cfg).unwrap();
        let mlp = |i: usize, o: usize| i * o + o + 2 * o;
        let lin = |i: usize, o: usize, b: bool| i * o + if b { o } else { 0 };
        // MNEL: feature enc d_in->d_e, relation 6->d_e, fuse 2d_e->d_e, output d_e->d_out, shortcut
        let mnel = |i: usize, o: usize| {
            let e = i / 2;
            mlp(i, e) + mlp(6, e) + mlp(2 * e, e) + mlp(e, o) + if i != o { mlp(i, o) } else { 0 }
        };
        let d = 16;
        let vsal = mlp(3, d) + 2 * lin(d, d / 4, false) + lin(d, d, false) + lin(6, d / 4, true) + 2 * (d / 4)
            + lin(d / 4, 1, true)
            + mlp(d, d);
        let expected = mlp(9, 8)
            + mnel(8, 8)
            + mnel(8, 8)
            + mnel(8, 16)
            + 2 * vsal
            + mlp(32, 16)
            + mlp(16, 16)
            + mlp(32, 16)
            + mlp(16, 8)
            + lin(8, 3, true);
        assert_eq!(store.trainable_scalars(), expected);
        assert_eq!(model.complexity().params(), expected);

        // floor(0.75 n): 32, 24, 18, 13
        assert_eq!(cfg.encoder.row_counts(), [32, 24, 18, 13, 13]);
        let c = model.complexity();
        let voxel = c.layers.iter().find(|l| l.name == "encoder.voxel").unwrap();
        assert_eq!(voxel.macs, 32 * 9 * 8);
        let fusion = c.layers.iter().find(|l| l.name == "encoder.fusion").unwrap();
        assert_eq!(fusion.macs, (13 * 32 * 16 + 13 * 16 * 16) as u64);
    }

    #[test]
    fn every_ablation_runs() {
        let mut variants = Vec::new();
        for multi_scale in [true, false] {
            for aggregation in [Aggregation::Attentive, Aggregation::MaxPool] {
                for (absolute_pe, relative_bias) in [(true, true), (false, true), (true, false), (false, false)] {
                    let mut c = tiny(Task::Object);
                    c.encoder.multi_scale = multi_scale;
                    c.encoder.aggregation = aggregation;
                    c.encoder.absolute_pe = absolute_pe;
                    c.encoder.relative_bias = relative_bias;
                    variants.push(c);
                }
            }
        }
        let mut c = tiny(Task::Object);
        c.encoder.attention_scale = AttentionScale::Head;
        c.encoder.projection_relu = true;
        c.encoder.fusion_hidden = 0;
        variants.push(c);
        for t in [TemporalModel::AvgPool, TemporalModel::Recurrent] {
            let mut c = tiny(Task::Action);
            c.s2tm.temporal = t;
            variants.push(c);
        }
        for cfg in variants {
            let (model, mut store) = Model::build::<f32>(&cfg).unwrap();
            let k = model.sets_per_sample();
            let data = sets(4, 2 * k, &cfg);
            let samples: Vec<&[VoxelSet]> = data.chunks(k).collect();
            let mut ctx = Ctx::new(&mut store, Mode::Train, 1);
            let logits = model.forward(&mut ctx, &samples, 2).unwrap();
            let loss = ctx.graph.cross_entropy(logits, &[0, 1]).unwrap();
            assert!(ctx.graph.value(loss).data()[0].is_finite());
            assert_eq!(model.complexity().params(), store.trainable_scalars(), "{cfg:?}");
        }
    }
}
