//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_plots, Predictions};
use crate::memory::{init_memory, FeatureMemory};
use crate::model::Model;
use crate::profile::{profile_memory, AllocProbe};
use crate::train::{records_of, run_training, write_manifest, Trainer};
use crate::video::{synthetic_dataset, Dataset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "tallkit", version, about = "Memory-efficient temporal action localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every training clip into the feature memory.
    InitMemory {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (defaults to `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Memory directory (defaults to `paths.memory`).
        #[arg(long)]
        memory_dir: Option<PathBuf>,
    },
    /// Train, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        memory_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a prediction dump) on the eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Activation and allocation profile over sampling rates.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        steps: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training videos.
        #[arg(long)]
        videos: usize,
        #[arg(long, default_value_t = 0)]
        eval_videos: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        frames: usize,
    },
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, probe: Option<&dyn AllocProbe>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command, probe) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_dataset(cfg: &RunConfig, data: Option<PathBuf>) -> Result<Dataset> {
    Dataset::load(&data.unwrap_or_else(|| cfg.paths.data.clone()))
}

pub fn run(command: Command, probe: Option<&dyn AllocProbe>) -> Result<()> {
    match command {
        Command::InitMemory {
            config,
            data,
            memory_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = load_dataset(&cfg, data)?;
            let dir = memory_dir.unwrap_or_else(|| cfg.paths.memory.clone());
            let model = Model::new(&cfg, dataset.num_classes())?;
            let mut memory = FeatureMemory::open(&dir)?;
            init_memory(&dataset.train, &model.encoder, model.memory_layout(), &mut memory)?;
            write_manifest(&dir, "init-memory", &cfg)?;
            println!("initialized {} memory entries in {}", memory.len(), dir.display());
        }
        Command::Train {
            config,
            resume,
            data,
            memory_dir,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.paths.out = o;
            }
            let dataset = load_dataset(&cfg, data)?;
            let memory = FeatureMemory::open(&memory_dir.unwrap_or_else(|| cfg.paths.memory.clone()))?;
            if let Some(v) = dataset.train.iter().find(|v| !memory.contains(&v.video_id)) {
                return Err(Error::MemoryUninitialized(v.video_id.clone()));
            }
            let out = cfg.paths.out.clone();
            let mut trainer = Trainer::new(cfg, dataset.num_classes(), Some(memory))?;
            if let Some(ckpt) = resume {
                trainer.load_checkpoint(&ckpt)?;
            }
            write_manifest(&out, "train", &trainer.cfg)?;
            let summary = run_training(&mut trainer, &dataset, &out)?;
            println!(
                "trained {} epochs; average mAP {:.4}; report in {}",
                summary.epochs,
                summary.report.average_map,
                out.join("report.txt").display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            predictions,
            out,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = load_dataset(&cfg, data)?;
            let preds = match (predictions, checkpoint) {
                (Some(p), _) => Predictions::read(&p)?,
                (None, Some(ckpt)) => {
                    let mut trainer = Trainer::new(cfg.clone(), dataset.num_classes(), None)?;
                    trainer.load_checkpoint(&ckpt)?;
                    trainer.predictions(&dataset.eval, &dataset.labels)?
                }
                (None, None) => return Err(Error::InvalidConfig("eval needs --checkpoint or --predictions".into())),
            };
            write_manifest(&out, "eval", &cfg)?;
            let records = records_of(&dataset.eval);
            let report = evaluate(&preds, &records, &dataset.labels, &cfg.protocol()?)?;
            write_text(&out.join("report.txt"), &report.to_text())?;
            write_text(&out.join("eval_report.json"), &report.to_json())?;
            preds.write(&out.join("predictions.json"))?;
            if cfg.eval.pr_plots {
                write_pr_plots(&out.join("pr_curves"), &preds, &records, &dataset.labels, report.iou_thresholds[0])?;
            }
            print!("{}", report.to_text());
        }
        Command::Profile {
            config,
            rates,
            steps,
            data,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = load_dataset(&cfg, data)?;
            let report = profile_memory(&cfg, dataset.num_classes(), &dataset.train, &rates, steps, probe)?;
            let text = report.to_text();
            let out = out.unwrap_or_else(|| cfg.paths.out.clone());
            write_manifest(&out, "profile", &cfg)?;
            write_text(&out.join("profile.txt"), &text)?;
            print!("{text}");
        }
        Command::GenData {
            out,
            videos,
            eval_videos,
            classes,
            seed,
            frames,
        } => {
            let synth = SynthConfig {
                num_classes: classes,
                num_frames: frames,
                ..SynthConfig::default()
            };
            let dataset = synthetic_dataset(&synth, videos, eval_videos, seed)?;
            dataset.save(&out)?;
            println!(
                "wrote {} train / {} eval videos to {}",
                dataset.train.len(),
                dataset.eval.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
