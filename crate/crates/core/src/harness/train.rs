//! Training loop, evaluation and metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{Model, TrainingState};
use crate::nn::{cosine_lr, Ctx, Mode, ParamStore, Sgd};
use crate::voxelizer::{encode_voxel_set, VoxelSet};
use crate::{Error, Result};

use super::config::RunConfig;
use super::data::{derive_seed, Split};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,test_acc";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub seconds: f64,
    /// Confusion counts of the final model on the test split.
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            writeln!(s, "{},{:e},{:.6},{:.6}", m.epoch, m.lr, m.train_loss, m.test_acc).unwrap();
        }
        s
    }
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(classes: usize, labels: &[usize], predicted: &[usize]) -> Self {
        let mut c = Self::new(classes);
        for (&t, &p) in labels.iter().zip(predicted) {
            c.counts[t][p] += 1;
        }
        c
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let n = self.counts.len();
        let mut s = String::from("true\\pred");
        for p in 0..n {
            write!(s, ",{p}").unwrap();
        }
        s.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            write!(s, "{t}").unwrap();
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode predictions, computed in parallel chunks. Rows are independent
/// in eval mode, so the result does not depend on the chunking.
pub fn predict_all(model: &Model, store: &ParamStore<f32>, sets: &[Vec<VoxelSet>], chunk: usize) -> Result<Vec<usize>> {
    let chunks: Vec<&[Vec<VoxelSet>]> = sets.chunks(chunk.max(1)).collect();
    let preds = chunks
        .par_iter()
        .map(|c| {
            let mut local = store.clone();
            let samples: Vec<&[VoxelSet]> = c.iter().map(|s| s.as_slice()).collect();
            let logits = model.predict(&mut local, &samples)?;
            Ok(logits.iter().map(|r| argmax(r)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.into_iter().flatten().collect())
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, split: &Split, chunk: usize) -> Result<Confusion> {
    let predicted = predict_all(model, store, &split.sets, chunk)?;
    Ok(Confusion::from_predictions(model.cfg.classes, &split.labels(), &predicted))
}

/// Writes the offending batch next to the run outputs for inspection.
fn dump_batch(dir: &Path, epoch: usize, step: u64, samples: &[&[VoxelSet]], labels: &[usize]) -> PathBuf {
    let path = dir.join(format!("nonfinite_epoch{epoch}_step{step}"));
    if std::fs::create_dir_all(&path).is_ok() {
        let mut listing = String::new();
        for (i, (sets, label)) in samples.iter().zip(labels).enumerate() {
            for (k, s) in sets.iter().enumerate() {
                let name = format!("sample{i}_set{k}.evx");
                let _ = std::fs::write(path.join(&name), encode_voxel_set(s));
                writeln!(listing, "{name} {label}").unwrap();
            }
        }
        let _ = std::fs::write(path.join("batch.txt"), listing);
    }
    path
}

pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    /// Directory for `metrics.csv`, `best.evck`, `confusion.csv`.
    pub out: &'a Path,
    pub quiet: bool,
}

impl Trainer<'_> {
    pub fn run(&self) -> Result<MetricsReport> {
        let cfg = self.cfg;
        cfg.validate()?;
        std::fs::create_dir_all(self.out).map_err(|e| Error::io(self.out, e))?;
        let start = Instant::now();
        let mut train = Split::load(cfg, &cfg.train_manifest(), 0)?;
        let test = Split::load(cfg, &cfg.test_manifest(), 1)?;

        let mut model_cfg = cfg.model.clone();
        model_cfg.init_seed = derive_seed(cfg.seed, &[4, cfg.model.init_seed]);
        model_cfg.encoder.sampling_seed = derive_seed(cfg.seed, &[5, cfg.model.encoder.sampling_seed]);
        let (model, mut store) = Model::build::<f32>(&model_cfg)?;
        let mut sgd = Sgd::new(&store, cfg.momentum, cfg.lr_max);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[6]));
        let revox_seed = derive_seed(cfg.seed, &[3, 0]);

        let metrics_path = self.out.join("metrics.csv");
        let mut report = MetricsReport {
            epochs: Vec::new(),
            best_acc: -1.0,
            best_epoch: 0,
            seconds: 0.0,
            confusion: Confusion::new(cfg.model.classes),
        };
        let mut step: u64 = 0;
        for epoch in 0..cfg.epochs {
            let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
            sgd.lr = lr;
            if epoch > 0 && train.is_action() {
                train.revoxelize(&cfg.voxel, revox_seed, epoch as u64)?;
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                // batch norm needs two rows in the head
                if batch.len() < 2 {
                    continue;
                }
                step += 1;
                let samples: Vec<&[VoxelSet]> = batch.iter().map(|&i| train.sets[i].as_slice()).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| train.items[i].label).collect();
                store.zero_grad();
                let mut ctx = Ctx::new(&mut store, Mode::Train, derive_seed(cfg.seed, &[7, step]));
                let logits = model.forward(&mut ctx, &samples, derive_seed(cfg.seed, &[8, step]))?;
                let loss_var = ctx.graph.cross_entropy(logits, &labels)?;
                let loss = ctx.graph.value(loss_var).data()[0] as f64;
                if !loss.is_finite() {
                    let dump = dump_batch(self.out, epoch, step, &samples, &labels);
                    return Err(Error::Numeric(format!(
                        "loss became {loss} at epoch {epoch}, step {step}; batch written to {}",
                        dump.display()
                    )));
                }
                ctx.backward(loss_var);
                drop(ctx);
                sgd.step(&mut store);
                loss_sum += loss * batch.len() as f64;
                seen += batch.len();
            }
            let confusion = evaluate(&model, &store, &test, cfg.batch_size)?;
            let acc = confusion.accuracy();
            let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
            report.epochs.push(EpochMetrics {
                epoch,
                lr,
                train_loss,
                test_acc: acc,
            });
            std::fs::write(&metrics_path, report.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
            if acc > report.best_acc {
                report.best_acc = acc;
                report.best_epoch = epoch;
                let state = TrainingState {
                    epoch,
                    epochs: cfg.epochs,
                    lr,
                    test_acc: acc,
                };
                model.save(&store, &state, &self.out.join("best.evck"))?;
            }
            report.confusion = confusion;
            if !self.quiet {
                eprintln!(
                    "epoch {:>4}  lr {:.3e}  train_loss {:.4}  test_acc {:.4}",
                    epoch, lr, train_loss, acc
                );
            }
        }
        let state = TrainingState {
            epoch: cfg.epochs - 1,
            epochs: cfg.epochs,
            lr: report.epochs.last().map_or(0.0, |m| m.lr),
            test_acc: report.epochs.last().map_or(0.0, |m| m.test_acc),
        };
        model.save(&store, &state, &self.out.join("last.evck"))?;
        let confusion_path = self.out.join("confusion.csv");
        std::fs::write(&confusion_path, report.confusion.to_csv()).map_err(|e| Error::io(&confusion_path, e))?;
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Loads a checkpoint and evaluates it on the test split of `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>) -> Result<Confusion> {
    let (model, store, _) = Model::load(checkpoint, None)?;
    let mut expected = cfg.model.clone();
    expected.init_seed = model.cfg.init_seed;
    expected.encoder.sampling_seed = model.cfg.encoder.sampling_seed;
    if expected != model.cfg {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint {} was trained with a different model configuration",
            checkpoint.display()
        )));
    }
    let default_manifest = cfg.test_manifest();
    let split = Split::load(cfg, manifest.unwrap_or(&default_manifest), 1)?;
    evaluate(&model, &store, &split, cfg.batch_size)
}
