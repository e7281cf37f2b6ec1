use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evstr::harness::{
    convert_file, desk_action_config, desk_object_config, evaluate_checkpoint, info_report, run_gradcheck,
    synthesize_dataset, Component, RunConfig, Trainer,
};
use evstr::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 101-class object model with the published layer sizes.
    Reference,
    /// Desk-scale 3-class object task.
    DeskObject,
    /// Desk-scale 3-class action task.
    DeskAction,
}

#[derive(Debug, Parser)]
#[command(name = "evstr", version, about = "Event voxel set transformer toolkit")]
struct Cli {
    /// TOML run configuration; relative `data_dir` resolves against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a labeled synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Voxelize one event file into an EVX1 voxel set.
    Convert {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics.csv, best.evck, last.evck and confusion.csv.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint; prints accuracy and the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate instead of the configured test split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write the confusion matrix CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of one component, or `all`.
    Gradcheck {
        component: String,
        /// Negative control: double the analytic gradients.
        #[arg(long)]
        corrupt: bool,
    },
    /// Parameter count, MAC estimate and layer table.
    Info {
        /// Print the resolved run configuration as TOML.
        #[arg(long)]
        print_config: bool,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::DeskObject)) => desk_object_config(),
        (None, Some(Preset::DeskAction)) => desk_action_config(),
        (None, _) => RunConfig::object_defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { out, force } => {
            let s = synthesize_dataset(&cfg.synth, cfg.seed, &out, force)?;
            println!("wrote {} train and {} test streams to {}", s.train, s.test, out.display());
        }
        Command::Convert { input, out } => {
            let set = convert_file(&input, &out, &cfg.voxel, cfg.seed)?;
            println!("wrote {} voxels ({} values per patch) to {}", set.len(), set.patch_len, out.display());
        }
        Command::Train { out, quiet } => {
            let report = Trainer {
                cfg: &cfg,
                out: &out,
                quiet,
            }
            .run()?;
            let last = report.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs in {:.1}s: final test_acc {:.4}, best {:.4} at epoch {}, train_loss {:.4}",
                report.epochs.len(),
                report.seconds,
                last.test_acc,
                report.best_acc,
                report.best_epoch,
                last.train_loss
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let confusion = evaluate_checkpoint(&cfg, &checkpoint, manifest.as_deref())?;
            let csv = confusion.to_csv();
            if let Some(path) = out {
                write(&path, &csv)?;
            }
            print!("{csv}");
            println!("accuracy {:.4} over {} samples", confusion.accuracy(), confusion.total());
        }
        Command::Gradcheck { component, corrupt } => {
            let components = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![component.parse()?]
            };
            let seed = cli.seed.unwrap_or(0);
            let mut failed = false;
            for c in components {
                let report = run_gradcheck(c, seed, corrupt)?;
                println!("[{}]\n{report}", c.name());
                failed |= !report.passed();
            }
            if failed {
                return Ok(ExitCode::from(4));
            }
        }
        Command::Info { print_config } => {
            let model_cfg = match cli.preset {
                Some(Preset::Reference) => evstr::model::ModelConfig::object_reference(),
                _ => cfg.model.clone(),
            };
            println!("{}", info_report(&model_cfg)?);
            if print_config {
                println!("\n{}", cfg.to_toml()?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
