//! Acceptance suite. Runs as a plain binary so the per-criterion
//! PASS/FAIL summary always prints; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tallkit::config::RunConfig;
use tallkit::encoder::{clips_tensor, ActivationMeter};
use tallkit::eval::{average_precision, evaluate, EvalProtocol, GtSegment, Predictions, ScoredSegment};
use tallkit::losses::{diou_loss, diou_loss_tensor, focal_loss, focal_loss_tensor};
use tallkit::memory::FeatureMemory;
use tallkit::model::{PreparedVideo, StepContext};
use tallkit::nn::{cpu, ParamStore};
use tallkit::profile::{profile_memory, CountingAlloc};
use tallkit::tcm::{TcmConfig, TemporalConsistency};
use tallkit::train::{run_training, Trainer};
use tallkit::video::{sample_clip_indices, synthetic_dataset, Dataset, GroundTruthAction, SynthConfig, VideoRecord};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc::new();

// Synthetic data seed shared by every criterion.
const DATA_SEED: u64 = 7;

// 1
const EQUIV_STEPS: usize = 10;
const EQUIV_REL_TOL: f64 = 1e-5;
// 2, 3
const ISOLATION_RATE: f64 = 0.4;
const ISOLATION_NOISE_STD: f32 = 0.5;
// 4
const PROFILE_RATES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
const PROFILE_STEPS: usize = 2;
const MIN_PROXY_R2: f64 = 0.95;
// 5, 6, 10
const LEARN_TRAIN_VIDEOS: usize = 20;
const LEARN_EVAL_VIDEOS: usize = 10;
const LEARN_CLASSES: usize = 3;
const LEARN_T_CFG: usize = 128;
const LEARN_MAX_EPOCHS: usize = 30;
const LEARN_LOW_RATE: f64 = 0.4;
const MIN_MAP_FULL_RATE: f64 = 0.5;
const MAX_LOW_RATE_GAP: f64 = 0.10;
// Reference run on this machine (data seed 7, default config); printed for
// comparison, not asserted.
const REFERENCE_MAP: [(&str, f64); 3] = [("r=1.0", 0.9031), ("r=0.4", 0.8300), ("frozen", 0.8291)];
// 7
const AP_ORACLE_CASES: usize = 500;
const AP_ORACLE_TOL: f64 = 1e-9;
const GOLDEN_TOL: f64 = 1e-12;
// 8
const FOCAL_HALF: f64 = 0.043322;
const FOCAL_TOL: f64 = 1e-6;
const DIOU_TOUCHING: f64 = 1.25;
const DIOU_TOUCHING_TOL: f64 = 1e-9;
const DIOU_OVERLAP: f64 = 0.777778;
const DIOU_OVERLAP_TOL: f64 = 1e-6;
const GRAD_CASES: usize = 100;
const FD_STEP: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-4;
// 9
const TCM_HAND_TOL: f64 = 1e-6;

const MINUTE: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn check(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = t0.elapsed();
    let outcome = match outcome {
        Ok(_) if took > budget => Err(format!("took {took:.1?}, budget {budget:?}")),
        o => o,
    };
    let ok = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|e| e);
    println!("{} criterion {id:>2} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    ok
}

fn main() {
    // `cargo test -- --list` and filters pass flags; there is one suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let learn_data = synthetic_dataset(
        &SynthConfig {
            num_classes: LEARN_CLASSES,
            num_frames: LEARN_T_CFG,
            ..SynthConfig::default()
        },
        LEARN_TRAIN_VIDEOS,
        LEARN_EVAL_VIDEOS,
        DATA_SEED,
    )
    .expect("synthetic dataset");
    let mut full: Option<LearnRun> = None;
    let mut results = vec![
        check(1, "r=1 equivalence", 2 * MINUTE, r1_equivalence),
        check(2, "gradient isolation", MINUTE, gradient_isolation),
        check(3, "memory-update semantics", MINUTE, memory_semantics),
        check(4, "memory-vs-r linearity", 5 * MINUTE, proxy_linearity),
        check(5, "desk-scale learnability", 15 * MINUTE, || learnability(&learn_data, &mut full)),
        check(6, "frozen-vs-e2e contrast", 15 * MINUTE, || frozen_contrast(&learn_data, full.as_ref())),
        check(7, "evaluator oracle", MINUTE, evaluator_oracle),
        check(8, "loss unit values and gradients", MINUTE, loss_checks),
        check(9, "TCM properties", MINUTE, tcm_properties),
    ];
    results.push(check(10, "TCM consistency diagnostic", MINUTE, || consistency_reported(full.as_ref())));
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn r1_equivalence() -> Outcome {
    let data = synthetic_dataset(&SynthConfig::default(), 5, 0, DATA_SEED).map_err(err)?;
    let cfg = RunConfig {
        sample_rate: 1.0,
        ..RunConfig::default()
    };
    let mut with_memory = Trainer::new(cfg.clone(), 3, Some(FeatureMemory::in_memory())).map_err(err)?;
    with_memory.init_memory(&data.train).map_err(err)?;
    let mut memory_free = Trainer::new(cfg, 3, None).map_err(err)?;
    let mut worst = 0.0f64;
    for step in 0..EQUIV_STEPS {
        let video = &data.train[step % data.train.len()];
        let epoch = (step / data.train.len()) as u64;
        let a = with_memory.train_step(&[video], epoch, step as u64).map_err(err)?.loss.total;
        let b = memory_free.train_step(&[video], epoch, step as u64).map_err(err)?.loss.total;
        let d = rel_diff(a, b);
        if !(d <= EQUIV_REL_TOL) {
            return Err(format!("step {step}: loss {a} vs {b}, relative {d:.3e} > {EQUIV_REL_TOL:e}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("max relative loss difference {worst:.2e} over {EQUIV_STEPS} steps (tol {EQUIV_REL_TOL:e})"))
}

/// A trainer at `rate` with initialized memory and the first training
/// video prepared for epoch 0, step 0.
struct IsolationSetup {
    trainer: Trainer,
    input: PreparedVideo,
    sampled: Vec<usize>,
    remaining: Vec<usize>,
}

impl IsolationSetup {
    fn new() -> Result<Self, String> {
        let data = synthetic_dataset(&SynthConfig::default(), 2, 0, DATA_SEED).map_err(err)?;
        let cfg = RunConfig {
            sample_rate: ISOLATION_RATE,
            ..RunConfig::default()
        };
        let mut trainer = Trainer::new(cfg, 3, Some(FeatureMemory::in_memory())).map_err(err)?;
        trainer.init_memory(&data.train).map_err(err)?;
        let input = trainer.model.prepare_video(&data.train[0], 0, true).map_err(err)?;
        let mut setup = IsolationSetup {
            trainer,
            input,
            sampled: Vec::new(),
            remaining: Vec::new(),
        };
        let (sampled, remaining) =
            sample_clip_indices(setup.input.partition.num_clips, ISOLATION_RATE, &mut setup.ctx().sampler).map_err(err)?;
        setup.sampled = sampled;
        setup.remaining = remaining;
        Ok(setup)
    }

    fn ctx(&self) -> StepContext {
        StepContext::new(self.trainer.cfg.seed, 0, 0, &self.input.video_id, ISOLATION_RATE)
    }

    fn with_noise(&self, clips: &[usize], seed: u64) -> PreparedVideo {
        let mut p = self.input.clone();
        let n = p.clips.clip_size();
        let normal = Normal::new(0.0f32, ISOLATION_NOISE_STD).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &m in clips {
            for x in &mut p.clips.data[m * n..(m + 1) * n] {
                *x += normal.sample(&mut rng);
            }
        }
        p
    }

    /// Encoder-parameter gradients of one forward/backward on a copy of the
    /// memory.
    fn encoder_grads(&self, input: &PreparedVideo) -> Result<BTreeMap<String, Vec<f32>>, String> {
        let model = &self.trainer.model;
        let mut memory = self.trainer.memory.clone().unwrap();
        let out = model.forward_train(input, Some(&mut memory), &mut self.ctx()).map_err(err)?;
        if out.partition.sampled_idx != self.sampled {
            return Err("step drew a different online set".into());
        }
        let grads = out.loss.backward().map_err(err)?;
        let mut map = BTreeMap::new();
        for (name, var) in model.store.vars() {
            if name.starts_with(model.encoder.backbone_prefix()) {
                let g = grads.get(var.as_tensor()).ok_or(format!("no gradient reaches {name}"))?;
                map.insert(name.clone(), g.flatten_all().map_err(err)?.to_vec1::<f32>().map_err(err)?);
            }
        }
        Ok(map)
    }
}

fn max_change(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> (f32, usize) {
    let mut worst = 0.0f32;
    let mut count = 0;
    for (name, x) in a {
        for (p, q) in x.iter().zip(&b[name]) {
            worst = worst.max((p - q).abs());
            count += 1;
        }
    }
    (worst, count)
}

fn gradient_isolation() -> Outcome {
    let s = IsolationSetup::new()?;
    let base = s.encoder_grads(&s.input)?;
    let (change, components) = max_change(&base, &s.encoder_grads(&s.with_noise(&s.remaining, 1))?);
    // control: the same noise on online clips must move the gradients
    let (control, _) = max_change(&base, &s.encoder_grads(&s.with_noise(&s.sampled, 2))?);
    if change != 0.0 {
        return Err(format!("noise on I' changed an encoder gradient by {change:e}"));
    }
    if control == 0.0 {
        return Err("control failed: noise on I left gradients unchanged".into());
    }
    Ok(format!(
        "|I|={} |I'|={}: max change 0 over {components} encoder-gradient components (exact); control on I moves them by {control:.2e}",
        s.sampled.len(),
        s.remaining.len()
    ))
}

fn memory_semantics() -> Outcome {
    let s = IsolationSetup::new()?;
    let model = &s.trainer.model;
    let id = s.input.video_id.clone();
    let all: Vec<usize> = (0..s.input.partition.num_clips).collect();
    let mut memory = s.trainer.memory.clone().unwrap();
    let before: Vec<Vec<Vec<f32>>> = memory.fetch(&id, &all).map_err(err)?.to_vec3().map_err(err)?;
    model.forward_train(&s.input, Some(&mut memory), &mut s.ctx()).map_err(err)?;
    let after: Vec<Vec<Vec<f32>>> = memory.fetch(&id, &all).map_err(err)?.to_vec3().map_err(err)?;

    let fresh: Vec<Vec<Vec<f32>>> = model
        .encoder
        .encode_raw(&clips_tensor(&s.input.clips, &s.sampled).map_err(err)?, false, &ActivationMeter::new(false))
        .map_err(err)?
        .to_vec3()
        .map_err(err)?;
    for (k, &m) in s.sampled.iter().enumerate() {
        if after[m] != fresh[k] {
            return Err(format!("row {m} in I does not hold the step's online features"));
        }
    }
    for &m in &s.remaining {
        if after[m] != before[m] {
            return Err(format!("row {m} in I' changed"));
        }
    }

    // fetched rows are leaves: no model parameter receives gradient
    let fetched = memory.fetch(&id, &s.remaining).map_err(err)?;
    let grads = fetched.sqr().map_err(err)?.sum_all().map_err(err)?.backward().map_err(err)?;
    if let Some((name, _)) = model.store.vars().find(|(_, v)| grads.get(v.as_tensor()).is_some()) {
        return Err(format!("fetched features carry gradient to {name}"));
    }
    // and writing a tracked tensor does not smuggle its graph in
    let w = Var::new(&[1.5f32], &cpu()).map_err(err)?;
    let row = Tensor::from_vec(fresh[0].concat(), (1, fresh[0].len(), fresh[0][0].len()), &cpu()).map_err(err)?;
    memory.update(&id, &s.sampled[..1], &row.broadcast_mul(w.as_tensor()).map_err(err)?).map_err(err)?;
    let back = memory.fetch(&id, &s.sampled[..1]).map_err(err)?;
    let grads = back.sum_all().map_err(err)?.backward().map_err(err)?;
    if grads.get(w.as_tensor()).is_some() {
        return Err("memory kept the autograd graph of a written tensor".into());
    }
    Ok(format!(
        "read-your-write on {} rows, {} untouched rows bit-identical, fetched rows gradient-free (all exact)",
        s.sampled.len(),
        s.remaining.len()
    ))
}

fn proxy_linearity() -> Outcome {
    let data = synthetic_dataset(&SynthConfig::default(), 2, 0, DATA_SEED).map_err(err)?;
    let report = profile_memory(&RunConfig::default(), 3, &data.train, &PROFILE_RATES, PROFILE_STEPS, Some(&ALLOC))
        .map_err(err)?;
    for line in report.to_text().lines() {
        println!("    {line}");
    }
    let f = report.proxy_fit;
    let alloc = report
        .alloc_fit
        .map_or("unavailable".to_string(), |a| format!("R^2 {:.4}, slope {:.3e} B/rate", a.r2, a.slope));
    let detail = format!("proxy R^2 {:.4} (min {MIN_PROXY_R2}), slope {:.1}; allocator fit {alloc} (reported)", f.r2, f.slope);
    if f.r2 >= MIN_PROXY_R2 && f.slope > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct LearnRun {
    map: f64,
    report: String,
}

fn train_run(data: &Dataset, rate: f64, frozen: bool) -> Result<LearnRun, String> {
    let cfg = RunConfig {
        sample_rate: rate,
        freeze_encoder: frozen,
        t_cfg: LEARN_T_CFG,
        ..RunConfig::default()
    };
    if cfg.optim.epochs > LEARN_MAX_EPOCHS {
        return Err(format!("config trains {} epochs, more than {LEARN_MAX_EPOCHS}", cfg.optim.epochs));
    }
    let mut trainer = Trainer::new(cfg, data.num_classes(), Some(FeatureMemory::in_memory())).map_err(err)?;
    trainer.init_memory(&data.train).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let summary = run_training(&mut trainer, data, dir.path()).map_err(err)?;
    let report = std::fs::read_to_string(dir.path().join("report.txt")).map_err(err)?;
    Ok(LearnRun {
        map: summary.report.average_map,
        report,
    })
}

fn reference(name: &str) -> f64 {
    REFERENCE_MAP.iter().find(|(n, _)| *n == name).unwrap().1
}

fn learnability(data: &Dataset, full: &mut Option<LearnRun>) -> Outcome {
    let r1 = train_run(data, 1.0, false)?;
    let low = train_run(data, LEARN_LOW_RATE, false)?;
    let gap = r1.map - low.map;
    let detail = format!(
        "avg mAP r=1.0 {:.4} (floor {MIN_MAP_FULL_RATE}, ref {:.4}), r={LEARN_LOW_RATE} {:.4} (ref {:.4}), gap {:.4} (max {MAX_LOW_RATE_GAP})",
        r1.map,
        reference("r=1.0"),
        low.map,
        reference("r=0.4"),
        gap
    );
    let ok = r1.map >= MIN_MAP_FULL_RATE && gap <= MAX_LOW_RATE_GAP;
    *full = Some(r1);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frozen_contrast(data: &Dataset, full: Option<&LearnRun>) -> Outcome {
    let full = full.ok_or("needs the criterion-5 r=1.0 run")?;
    let frozen = train_run(data, 1.0, true)?;
    let detail = format!(
        "frozen {:.4} (ref {:.4}) vs end-to-end {:.4} at equal budget",
        frozen.map,
        reference("frozen"),
        full.map
    );
    if frozen.map < full.map {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn consistency_reported(full: Option<&LearnRun>) -> Outcome {
    let full = full.ok_or("needs the criterion-5 r=1.0 run")?;
    let ratio = full
        .report
        .lines()
        .find_map(|l| l.trim().strip_prefix("ratio "))
        .ok_or("report.txt has no consistency ratio")?;
    let value: f64 = ratio.trim().parse().map_err(err)?;
    Ok(format!("post/pre TCM centroid-distance ratio {value:.4} in report.txt (reported, not thresholded)"))
}

/// Brute-force AP: greedy matching recomputed from scratch for every prefix
/// of the ranking, then the area under the interpolated PR envelope.
fn oracle_ap(dets: &[ScoredSegment], gts: &[GtSegment], thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    ranked.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].start.partial_cmp(&dets[b].start).unwrap())
            .then(a.cmp(&b))
    });
    let overlap = |d: &ScoredSegment, g: &GtSegment| {
        if d.video_id != g.video_id {
            return 0.0;
        }
        let inter = (d.end.min(g.end) - d.start.max(g.start)).max(0.0);
        inter / (d.end - d.start + g.end - g.start - inter)
    };
    let mut curve = Vec::new();
    for k in 1..=ranked.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for &d in &ranked[..k] {
            let best = (0..gts.len())
                .filter(|&g| !taken[g] && overlap(&dets[d], &gts[g]) >= thresh)
                .fold(None, |best: Option<usize>, g| match best {
                    Some(b) if overlap(&dets[d], &gts[b]) >= overlap(&dets[d], &gts[g]) => Some(b),
                    _ => Some(g),
                });
            if let Some(g) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut recall = 0.0;
    for k in 0..curve.len() {
        if curve[k].0 > recall {
            let precision = curve[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (curve[k].0 - recall) * precision;
            recall = curve[k].0;
        }
    }
    ap
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<ScoredSegment>, Vec<GtSegment>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for v in 0..rng.random_range(1..=4) {
        let video_id = format!("v{v}");
        for _ in 0..rng.random_range(0..=8) {
            let start = rng.random_range(0.0..40.0f64);
            let end = start + rng.random_range(0.5..15.0);
            gts.push(GtSegment {
                video_id: video_id.clone(),
                start,
                end,
            });
        }
        for _ in 0..rng.random_range(0..=12) {
            let start = rng.random_range(0.0..40.0f64);
            let end = start + rng.random_range(0.5..15.0);
            // a coarse score grid forces ties
            let score = rng.random_range(0..6) as f64 / 5.0;
            dets.push(ScoredSegment {
                video_id: video_id.clone(),
                start,
                end,
                score,
            });
        }
    }
    (dets, gts)
}

fn evaluator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst = 0.0f64;
    for case in 0..AP_ORACLE_CASES {
        let (dets, gts) = random_instance(&mut rng);
        let t = rng.random_range(0.1..0.9);
        let (fast, slow) = (average_precision(&dets, &gts, t), oracle_ap(&dets, &gts, t));
        let d = (fast - slow).abs();
        if !(d <= AP_ORACLE_TOL) {
            return Err(format!("case {case}: AP {fast} vs oracle {slow}"));
        }
        worst = worst.max(d);
    }

    let fixture: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/eval_golden.json")).map_err(err)?;
    let pinned = fixture["average_map"].as_f64().ok_or("fixture lacks average_map")?;
    let labels: Vec<String> = serde_json::from_value(fixture["labels"].clone()).map_err(err)?;
    let preds: Predictions = serde_json::from_value(fixture["predictions"].clone()).map_err(err)?;
    let gt: BTreeMap<String, Vec<(f64, f64, usize)>> =
        serde_json::from_value(fixture["ground_truth"].clone()).map_err(err)?;
    let records: Vec<VideoRecord> = gt
        .iter()
        .map(|(id, actions)| VideoRecord {
            video_id: id.clone(),
            duration: fixture["duration"].as_f64().unwrap(),
            fps: fixture["fps"].as_f64().unwrap(),
            subset: None,
            actions: actions
                .iter()
                .map(|&(start, end, label)| GroundTruthAction { start, end, label })
                .collect(),
        })
        .collect();
    let protocol = EvalProtocol::thumos();
    let report = evaluate(&preds, &records, &labels, &protocol).map_err(err)?;
    let per_class: Vec<(Vec<ScoredSegment>, Vec<GtSegment>)> = (0..labels.len())
        .map(|c| {
            let dets = preds
                .results
                .values()
                .flatten()
                .filter(|p| p.label == labels[c])
                .map(|p| ScoredSegment {
                    video_id: p.video_id.clone(),
                    start: p.start,
                    end: p.end,
                    score: p.score,
                })
                .collect();
            let gts = records
                .iter()
                .flat_map(|r| r.actions.iter().filter(|a| a.label == c).map(|a| (r.video_id.clone(), a)))
                .map(|(video_id, a)| GtSegment {
                    video_id,
                    start: a.start,
                    end: a.end,
                })
                .collect();
            (dets, gts)
        })
        .collect();
    let present: Vec<&(Vec<ScoredSegment>, Vec<GtSegment>)> = per_class.iter().filter(|(_, g)| !g.is_empty()).collect();
    let oracle = protocol
        .iou_thresholds
        .iter()
        .map(|&t| present.iter().map(|(d, g)| oracle_ap(d, g, t)).sum::<f64>() / present.len() as f64)
        .sum::<f64>()
        / protocol.iou_thresholds.len() as f64;
    if (report.average_map - pinned).abs() > GOLDEN_TOL || (oracle - pinned).abs() > GOLDEN_TOL {
        return Err(format!("golden fixture: evaluator {} / oracle {oracle} vs pinned {pinned}", report.average_map));
    }
    Ok(format!(
        "{AP_ORACLE_CASES} random cases within {worst:.1e} (tol {AP_ORACLE_TOL:e}); golden avg mAP {:.12} matches pin",
        report.average_map
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn loss_checks() -> Outcome {
    let focal = focal_loss(0.5, true, 0.25, 2.0);
    if (focal - FOCAL_HALF).abs() > FOCAL_TOL {
        return Err(format!("focal(0.5, 1) = {focal}"));
    }
    let touching = diou_loss((0.0, 2.0), (2.0, 4.0)).map_err(err)?;
    if (touching - DIOU_TOUCHING).abs() > DIOU_TOUCHING_TOL {
        return Err(format!("diou([0,2],[2,4]) = {touching}"));
    }
    let overlap = diou_loss((0.0, 10.0), (5.0, 15.0)).map_err(err)?;
    if (overlap - DIOU_OVERLAP).abs() > DIOU_OVERLAP_TOL {
        return Err(format!("diou([0,10],[5,15]) = {overlap}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    // focal: gradient w.r.t. the logit through the sigmoid
    for case in 0..GRAD_CASES {
        let x: f64 = rng.random_range(-4.0..4.0);
        let target = rng.random_bool(0.5);
        let f = |x: f64| focal_loss(1.0 / (1.0 + (-x).exp()), target, 0.25, 2.0);
        let numeric = (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP);
        let var = Var::new(&[x], &cpu()).map_err(err)?;
        let t = Tensor::new(&[if target { 1.0 } else { 0.0 }], &cpu()).map_err(err)?;
        let w = Tensor::new(&[1.0], &cpu()).map_err(err)?;
        let loss = focal_loss_tensor(var.as_tensor(), &t, &w, 1, 0.25, 2.0).map_err(err)?;
        let analytic = loss.backward().map_err(err)?.get(var.as_tensor()).unwrap().to_vec1::<f64>().map_err(err)?[0];
        let e = rel_err(analytic, numeric);
        if e > GRAD_REL_TOL {
            return Err(format!("focal case {case}: analytic {analytic} vs numeric {numeric}"));
        }
        worst = worst.max(e);
    }
    // diou: both endpoints of the prediction, away from min/max/relu kinks
    let mut done = 0;
    while done < GRAD_CASES {
        let p = {
            let s = rng.random_range(0.0..20.0f64);
            [s, s + rng.random_range(0.5..10.0)]
        };
        let g = {
            let s = rng.random_range(0.0..20.0f64);
            [s, s + rng.random_range(0.5..10.0)]
        };
        let edges = [p[0], p[1], g[0], g[1]];
        if (0..4).any(|i| (i + 1..4).any(|j| (edges[i] - edges[j]).abs() < 1e-2)) {
            continue;
        }
        let var = Var::new(&[p], &cpu()).map_err(err)?;
        let gt = Tensor::new(&[g], &cpu()).map_err(err)?;
        let loss = diou_loss_tensor(var.as_tensor(), &gt).map_err(err)?.sum_all().map_err(err)?;
        let grads = loss.backward().map_err(err)?;
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?;
        for (k, a) in analytic.iter().enumerate() {
            let at = |h: f64| {
                let mut q = p;
                q[k] += h;
                diou_loss((q[0], q[1]), (g[0], g[1])).unwrap()
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let e = rel_err(*a, numeric);
            if e > GRAD_REL_TOL {
                return Err(format!("diou {p:?} vs {g:?}: analytic {a} vs numeric {numeric}"));
            }
            worst = worst.max(e);
        }
        done += 1;
    }
    Ok(format!(
        "focal {focal:.6}, diou {touching} / {overlap:.6}; {GRAD_CASES}+{GRAD_CASES} gradient checks, max relative error {worst:.1e} (tol {GRAD_REL_TOL:e})"
    ))
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + x.iter().enumerate().map(|(i, xi)| w[o * x.len() + i] * xi).sum::<f64>())
        .collect()
}

fn seeded_tokens(n: usize, c: usize, seed: u64) -> Result<Tensor, String> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..n * c).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>(), (n, c), &cpu()).map_err(err)
}

fn tcm_properties() -> Outcome {
    let c = 8;
    // shape preservation
    for n in [1, 2, 7, 32] {
        let mut store = ParamStore::new(n as u64);
        let tcm = TemporalConsistency::new(&mut store, c, &TcmConfig::new(n)).map_err(err)?;
        let x = seeded_tokens(n, c, n as u64)?;
        let y = tcm.forward(&x, None).map_err(err)?;
        if y.dims() != [n, c] {
            return Err(format!("[{n}, {c}] became {:?}", y.dims()));
        }
    }
    // eval mode ignores droppath
    let mut cfg = TcmConfig::new(16);
    cfg.droppath_rate = 0.5;
    let mut store = ParamStore::new(9);
    let tcm = TemporalConsistency::new(&mut store, c, &cfg).map_err(err)?;
    let x = seeded_tokens(16, c, 16)?;
    let a: Vec<Vec<f32>> = tcm.forward(&x, None).map_err(err)?.to_vec2().map_err(err)?;
    let b: Vec<Vec<f32>> = tcm.forward(&x, None).map_err(err)?.to_vec2().map_err(err)?;
    if a != b {
        return Err("eval-mode outputs differ between calls".into());
    }
    let differs = (0..8u64).any(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        tcm.forward(&x, Some(&mut rng)).unwrap().to_vec2::<f32>().unwrap() != a
    });
    if !differs {
        return Err("droppath never fired in training mode".into());
    }

    // one token, one layer, fixed weights, evaluated by hand
    let c = 4;
    let mut cfg = TcmConfig::new(1);
    cfg.num_layers = 1;
    cfg.droppath_rate = 0.0;
    let mut store = ParamStore::new(0);
    let tcm = TemporalConsistency::new(&mut store, c, &cfg).map_err(err)?;
    let mut w: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, (name, var)) in store.vars().enumerate() {
        let vals: Vec<f32> = (0..var.elem_count())
            .map(|i| {
                let v = 0.2 * ((i as f64 * 1.1 + k as f64 * 0.3).cos());
                (if name.ends_with("gamma") { 1.0 + v } else { v }) as f32
            })
            .collect();
        store.set(name, &vals).map_err(err)?;
        w.insert(name.trim_start_matches("tcm.layer0.").to_string(), vals.iter().map(|&v| v as f64).collect());
    }
    let x = [0.75, -0.5, 1.25, -2.0];
    // a lone key gets softmax weight 1, so attention reduces to the V path
    let h = layer_norm(&x, &w["norm1.gamma"], &w["norm1.beta"]);
    let qkv = affine(&w["qkv.weight"], &w["qkv.bias"], &h);
    let attn = affine(&w["proj.weight"], &w["proj.bias"], &qkv[2 * c..]);
    let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let h2 = layer_norm(&x1, &w["norm2.gamma"], &w["norm2.beta"]);
    let hidden: Vec<f64> = affine(&w["fc1.weight"], &w["fc1.bias"], &h2).into_iter().map(gelu_tanh).collect();
    let ffn = affine(&w["fc2.weight"], &w["fc2.bias"], &hidden);
    let want: Vec<f64> = x1.iter().zip(&ffn).map(|(a, b)| a + b).collect();
    let input = Tensor::from_vec(x.map(|v| v as f32).to_vec(), (1, c), &cpu()).map_err(err)?;
    let got = tcm.forward(&input, None).map_err(err)?.to_vec2::<f32>().map_err(err)?;
    let worst = got[0].iter().zip(&want).map(|(g, e)| (*g as f64 - e).abs()).fold(0.0, f64::max);
    if worst > TCM_HAND_TOL {
        return Err(format!("single-token layer off by {worst:e}: {:?} vs {want:?}", got[0]));
    }
    Ok(format!(
        "shapes preserved for n in {{1,2,7,32}}; eval deterministic at droppath 0.5; single-token layer within {worst:.1e} (tol {TCM_HAND_TOL:e})"
    ))
}
