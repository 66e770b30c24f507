//! Training loop, checkpoints and run artifacts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::detection::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_plots, EvalReport, PredictionEntry, Predictions};
use crate::losses::LossBreakdown;
use crate::memory::{init_memory, FeatureMemory};
use crate::model::{Model, StepContext};
use crate::nn::{cpu, AdamW};
use crate::rng::{stream_rng, Stream};
use crate::tcm::{consistency_diagnostic, ConsistencyReport};
use crate::video::{AnnotatedVideo, Dataset, VideoRecord};

/// Summary of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Mean over the batch's videos.
    pub loss: LossBreakdown,
    /// Encoder activation elements retained for backprop, summed over the batch.
    pub activations: usize,
    /// Call sequence of the batch's first video.
    pub trace: Vec<&'static str>,
}

/// Epoch order of `n` videos: a function of `(seed, epoch)` only.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[epoch]));
    order
}

/// Cosine decay from `base` at epoch 0 towards 0 at `epochs`.
pub fn cosine_lr(base: f64, epoch: u64, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// `None` runs the memory-free pipeline.
    pub memory: Option<FeatureMemory>,
    /// Next epoch to run.
    pub epoch: u64,
    pub global_step: u64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("model", &self.model)
            .field("epoch", &self.epoch)
            .field("global_step", &self.global_step)
            .finish()
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig, num_classes: usize, memory: Option<FeatureMemory>) -> Result<Self> {
        let model = Model::new(&cfg, num_classes)?;
        let optimizer = AdamW::new(
            cfg.optim.weight_decay,
            vec![(model.encoder.backbone_prefix().to_string(), cfg.optim.encoder_lr_mult)],
        );
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            memory,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        if self.cfg.optim.cosine {
            cosine_lr(self.cfg.optim.lr, epoch, self.cfg.optim.epochs)
        } else {
            self.cfg.optim.lr
        }
    }

    /// Encodes every video into the memory (shift 0, eval mode).
    pub fn init_memory(&mut self, videos: &[AnnotatedVideo]) -> Result<()> {
        let memory = self.memory.get_or_insert_with(FeatureMemory::in_memory);
        init_memory(videos, &self.model.encoder, self.model.memory_layout(), memory)
    }

    /// Forward and backward over a batch without touching the parameters.
    /// Memory entries of the batch are updated.
    pub fn compute_gradients(
        &mut self,
        videos: &[&AnnotatedVideo],
        epoch: u64,
        step: u64,
    ) -> Result<(GradStore, StepReport)> {
        if videos.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = 1.0 / videos.len() as f64;
        let mut sum = LossBreakdown::default();
        let mut activations = 0;
        let mut trace = Vec::new();
        let mut grads: Option<GradStore> = None;
        let mut pending: Option<Tensor> = None;
        for (i, video) in videos.iter().enumerate() {
            let input = self.model.prepare_video(video, epoch, true)?;
            let mut ctx = StepContext::new(self.cfg.seed, epoch, step, &video.video_id, self.cfg.sample_rate);
            let out = self.model.forward_train(&input, self.memory.as_mut(), &mut ctx)?;
            sum = sum.add(&out.breakdown);
            activations += ctx.meter.total();
            if i == 0 {
                trace = ctx.trace;
            }
            let scaled = (out.loss * scale)?;
            if self.cfg.optim.accumulate {
                let g = scaled.backward()?;
                grads = Some(match grads {
                    None => g,
                    Some(acc) => self.merge(acc, g)?,
                });
            } else {
                pending = Some(match pending {
                    None => scaled,
                    Some(p) => (p + scaled)?,
                });
            }
        }
        let grads = match (grads, pending) {
            (Some(g), _) => g,
            (None, Some(loss)) => loss.backward()?,
            (None, None) => unreachable!(),
        };
        Ok((
            grads,
            StepReport {
                loss: sum.scale(scale),
                activations,
                trace,
            },
        ))
    }

    fn merge(&self, mut acc: GradStore, other: GradStore) -> Result<GradStore> {
        for (_, var) in self.model.store.vars() {
            let t = var.as_tensor();
            if let Some(g) = other.get(t) {
                let sum = match acc.get(t) {
                    Some(a) => (a + g)?,
                    None => g.clone(),
                };
                acc.insert(t, sum);
            }
        }
        Ok(acc)
    }

    /// One optimizer step over a batch of whole videos.
    pub fn train_step(&mut self, videos: &[&AnnotatedVideo], epoch: u64, step: u64) -> Result<StepReport> {
        let (grads, report) = self.compute_gradients(videos, epoch, step)?;
        let lr = self.lr_at(epoch);
        let model = &self.model;
        self.optimizer.apply(&model.store, &grads, lr, |n| model.is_frozen(n))?;
        self.global_step += 1;
        Ok(report)
    }

    /// Runs epoch `self.epoch` and advances it; returns the mean loss.
    pub fn train_epoch(&mut self, videos: &[AnnotatedVideo]) -> Result<LossBreakdown> {
        let epoch = self.epoch;
        if let Some(m) = self.memory.as_mut() {
            m.set_epoch(epoch as u32);
        }
        let order = epoch_order(self.cfg.seed, epoch, videos.len());
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for (step, chunk) in order.chunks(self.cfg.optim.batch).enumerate() {
            let batch: Vec<&AnnotatedVideo> = chunk.iter().map(|&i| &videos[i]).collect();
            let r = self.train_step(&batch, epoch, step as u64)?;
            sum = sum.add(&r.loss);
            steps += 1;
        }
        if let Some(m) = self.memory.as_mut() {
            m.flush()?;
        }
        self.epoch += 1;
        Ok(sum.scale(1.0 / steps.max(1) as f64))
    }

    pub fn predictions(&self, videos: &[AnnotatedVideo], labels: &[String]) -> Result<Predictions> {
        predict_all(&self.model, &self.cfg.decode_config(), videos, labels)
    }

    pub fn evaluate(&self, videos: &[AnnotatedVideo], labels: &[String]) -> Result<EvalReport> {
        let preds = self.predictions(videos, labels)?;
        evaluate(&preds, &records_of(videos), labels, &self.cfg.protocol()?)
    }

    /// Centroid-distance diagnostic averaged over `videos`, with half the
    /// clips (or `1 - r`) read from memory.
    pub fn consistency(&self, videos: &[AnnotatedVideo]) -> Result<Option<ConsistencyReport>> {
        let Some(memory) = self.memory.as_ref() else {
            return Ok(None);
        };
        let rate = if self.cfg.sample_rate < 1.0 { self.cfg.sample_rate } else { 0.5 };
        let (mut pre, mut post, mut n) = (0.0, 0.0, 0);
        for (i, v) in videos.iter().enumerate() {
            if !memory.contains(&v.video_id) {
                continue;
            }
            let mut rng = stream_rng(self.cfg.seed, Stream::Profile, &[i as u64]);
            let t = self.model.token_trace(v, memory, rate, &mut rng)?;
            if let Some(r) = consistency_diagnostic(&t.pre_tcm, &t.post_tcm, &t.sources)? {
                pre += r.pre_distance;
                post += r.post_distance;
                n += 1;
            }
        }
        if n == 0 {
            return Ok(None);
        }
        let (pre, post) = (pre / n as f64, post / n as f64);
        Ok(Some(ConsistencyReport {
            pre_distance: pre,
            post_distance: post,
            ratio: if pre > 0.0 { post / pre } else { f64::NAN },
        }))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: String, t: &Tensor| -> Result<()> {
            let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            tensors.push((name, t.dims().to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()));
            Ok(())
        };
        for (name, var) in self.model.store.vars() {
            push(format!("param.{name}"), var.as_tensor())?;
        }
        for (name, t) in self.optimizer.state_tensors() {
            push(name, &t)?;
        }
        let views = tensors
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = [
            ("epoch", self.epoch.to_string()),
            ("global_step", self.global_step.to_string()),
            ("adam_step", self.optimizer.step.to_string()),
            ("seed", self.cfg.seed.to_string()),
            ("memory_epoch", self.memory.as_ref().map_or(0, |m| m.epoch()).to_string()),
            ("config", self.cfg.to_toml()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Restores parameters, optimizer moments and counters.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let field = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
        };
        let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut seen = 0;
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(data, view.shape(), &cpu())?;
            if let Some(p) = name.strip_prefix("param.") {
                if self.model.store.get(p).is_none() {
                    return Err(Error::Checkpoint(format!("unknown parameter `{p}`")));
                }
                self.model.store.set_tensor(p, &t)?;
                seen += 1;
            } else if !self.optimizer.load_state_tensor(&name, t) {
                return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
            }
        }
        if seen != self.model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                self.model.store.len()
            )));
        }
        self.epoch = field("epoch")?;
        self.global_step = field("global_step")?;
        self.optimizer.step = field("adam_step")?;
        if let Some(m) = self.memory.as_mut() {
            m.set_epoch(field("memory_epoch")? as u32);
        }
        Ok(())
    }
}

pub fn records_of(videos: &[AnnotatedVideo]) -> Vec<VideoRecord> {
    videos
        .iter()
        .map(|v| VideoRecord {
            video_id: v.video_id.clone(),
            duration: v.duration(),
            fps: v.fps,
            subset: None,
            actions: v.actions.clone(),
        })
        .collect()
}

pub fn predict_all(
    model: &Model,
    decode: &DecodeConfig,
    videos: &[AnnotatedVideo],
    labels: &[String],
) -> Result<Predictions> {
    let mut preds = Predictions::default();
    for v in videos {
        preds.results.entry(v.video_id.clone()).or_default();
        for d in model.predict(v, decode)? {
            preds.push(PredictionEntry {
                video_id: v.video_id.clone(),
                start: d.start,
                end: d.end,
                label: labels[d.label].clone(),
                score: d.score,
            });
        }
    }
    Ok(preds)
}

/// Files hashed into the manifest's code version.
const SOURCES: &[(&str, &str)] = &[
    ("cli.rs", include_str!("cli.rs")),
    ("config.rs", include_str!("config.rs")),
    ("detection/anchors.rs", include_str!("detection/anchors.rs")),
    ("detection/fpn.rs", include_str!("detection/fpn.rs")),
    ("detection/mod.rs", include_str!("detection/mod.rs")),
    ("detection/nms.rs", include_str!("detection/nms.rs")),
    ("encoder.rs", include_str!("encoder.rs")),
    ("error.rs", include_str!("error.rs")),
    ("eval.rs", include_str!("eval.rs")),
    ("lib.rs", include_str!("lib.rs")),
    ("losses.rs", include_str!("losses.rs")),
    ("memory.rs", include_str!("memory.rs")),
    ("model.rs", include_str!("model.rs")),
    ("nn.rs", include_str!("nn.rs")),
    ("profile.rs", include_str!("profile.rs")),
    ("rng.rs", include_str!("rng.rs")),
    ("tcm.rs", include_str!("tcm.rs")),
    ("train.rs", include_str!("train.rs")),
    ("video/annotations.rs", include_str!("video/annotations.rs")),
    ("video/mod.rs", include_str!("video/mod.rs")),
    ("video/raw.rs", include_str!("video/raw.rs")),
    ("video/synth.rs", include_str!("video/synth.rs")),
];

/// Tree hash over git-style blob hashes of the library sources.
pub fn code_version() -> String {
    let mut tree = Sha256::new();
    for (name, text) in SOURCES {
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", text.len()).as_bytes());
        blob.update(text.as_bytes());
        tree.update(format!("{name} ").as_bytes());
        tree.update(blob.finalize());
    }
    tree.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.txt` (command, seed, code version, config snapshot).
pub fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = format!(
        "command = {command:?}\nseed = {}\ncode_version = \"{}\"\ncrate_version = \"{}\"\n\n# config snapshot\n{}",
        cfg.seed,
        code_version(),
        env!("CARGO_PKG_VERSION"),
        cfg.to_toml()
    );
    let path = out.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: u64,
    pub final_loss: LossBreakdown,
    pub report: EvalReport,
    pub consistency: Option<ConsistencyReport>,
    pub checkpoint: PathBuf,
}

pub const METRICS_HEADER: &str = "epoch,focal,diou,video_ce,total,lr,avg_map";

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains from `trainer.epoch` to `optim.epochs`, writing `metrics.csv`,
/// `epoch_<n>.ckpt`, `predictions.json`, `eval_report.json` and
/// `report.txt` under `out`.
pub fn run_training(trainer: &mut Trainer, data: &Dataset, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics = out.join("metrics.csv");
    if trainer.epoch == 0 || !metrics.exists() {
        std::fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
    }
    if let Some(m) = trainer.memory.as_ref() {
        if let Some(v) = data.train.iter().find(|v| !m.contains(&v.video_id)) {
            return Err(Error::MemoryUninitialized(v.video_id.clone()));
        }
    }
    let mut last = LossBreakdown::default();
    let mut checkpoint = PathBuf::new();
    let epochs = trainer.cfg.optim.epochs as u64;
    while trainer.epoch < epochs {
        let lr = trainer.lr_at(trainer.epoch);
        last = trainer.train_epoch(&data.train)?;
        let n = trainer.epoch;
        let every = trainer.cfg.eval.every as u64;
        let map = if (every > 0 && n.is_multiple_of(every)) || n == epochs {
            format!("{:.6}", trainer.evaluate(&data.eval, &data.labels)?.average_map)
        } else {
            String::new()
        };
        log::info!("epoch {n}: loss {:.4} (focal {:.4}, diou {:.4}, ce {:.4}) {map}", last.total, last.focal, last.diou, last.video_ce);
        append(
            &metrics,
            &format!("{n},{:.6},{:.6},{:.6},{:.6},{lr:.6e},{map}", last.focal, last.diou, last.video_ce, last.total),
        )?;
        checkpoint = out.join(format!("epoch_{n}.ckpt"));
        trainer.save_checkpoint(&checkpoint)?;
    }
    let preds = trainer.predictions(&data.eval, &data.labels)?;
    preds.write(&out.join("predictions.json"))?;
    let report = evaluate(&preds, &records_of(&data.eval), &data.labels, &trainer.cfg.protocol()?)?;
    let report_json = out.join("eval_report.json");
    std::fs::write(&report_json, report.to_json()).map_err(|e| Error::io(&report_json, e))?;
    if trainer.cfg.eval.pr_plots {
        write_pr_plots(&out.join("pr_curves"), &preds, &records_of(&data.eval), &data.labels, report.iou_thresholds[0])?;
    }
    let consistency = trainer.consistency(&data.train)?;
    let mut text = String::new();
    let _ = writeln!(text, "epochs: {}\nsample_rate: {}\nfreeze_encoder: {}", trainer.epoch, trainer.cfg.sample_rate, trainer.cfg.freeze_encoder);
    let _ = writeln!(text, "final train loss: {:.6}\n", last.total);
    text.push_str(&report.to_text());
    match &consistency {
        Some(c) => {
            let _ = writeln!(
                text,
                "\nconsistency diagnostic (online vs memory centroid distance, top-2 PCA plane):\n  pre_tcm {:.6}\n  post_tcm {:.6}\n  ratio {:.6}",
                c.pre_distance, c.post_distance, c.ratio
            );
        }
        None => text.push_str("\nconsistency diagnostic: not available (no feature memory)\n"),
    }
    let report_txt = out.join("report.txt");
    std::fs::write(&report_txt, text).map_err(|e| Error::io(&report_txt, e))?;
    Ok(TrainSummary {
        epochs: trainer.epoch,
        final_loss: last,
        report,
        consistency,
        checkpoint,
    })
}
