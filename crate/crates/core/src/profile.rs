//! Training-step memory profile over a grid of sampling rates.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::train::Trainer;
use crate::video::AnnotatedVideo;

/// Source of peak heap statistics.
pub trait AllocProbe {
    /// Starts a new measurement window.
    fn reset_peak(&self);
    /// Largest live-byte excess over the window's starting level.
    fn peak_bytes(&self) -> usize;
    fn is_active(&self) -> bool;
}

/// A [`System`] wrapper that tracks live and peak bytes. Install it with
/// `#[global_allocator]` to enable allocator statistics.
#[derive(Debug)]
pub struct CountingAlloc {
    live: AtomicUsize,
    peak: AtomicUsize,
    base: AtomicUsize,
    used: AtomicBool,
}

impl CountingAlloc {
    pub const fn new() -> Self {
        CountingAlloc {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            base: AtomicUsize::new(0),
            used: AtomicBool::new(false),
        }
    }

    pub fn live_bytes(&self) -> usize {
        self.live.load(Ordering::Relaxed)
    }
}

impl Default for CountingAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = self.live.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            self.peak.fetch_max(now, Ordering::Relaxed);
            self.used.store(true, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        self.live.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

impl AllocProbe for CountingAlloc {
    fn reset_peak(&self) {
        let now = self.live.load(Ordering::Relaxed);
        self.base.store(now, Ordering::Relaxed);
        self.peak.store(now, Ordering::Relaxed);
    }

    fn peak_bytes(&self) -> usize {
        self.peak
            .load(Ordering::Relaxed)
            .saturating_sub(self.base.load(Ordering::Relaxed))
    }

    fn is_active(&self) -> bool {
        self.used.load(Ordering::Relaxed)
    }
}

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LineFit { slope, intercept, r2 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub rate: f64,
    pub sampled_clips: usize,
    /// Encoder activation elements retained for backprop (mean per step).
    pub proxy_elements: f64,
    pub peak_bytes: Option<usize>,
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub proxy_fit: LineFit,
    pub alloc_fit: Option<LineFit>,
}

impl ProfileReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("rate  clips  proxy_elements  peak_bytes  step_ms\n");
        for r in &self.rows {
            let peak = r.peak_bytes.map_or("n/a".to_string(), |b| b.to_string());
            let _ = writeln!(
                out,
                "{:<5.2} {:>5}  {:>14.0}  {:>10}  {:>7.1}",
                r.rate, r.sampled_clips, r.proxy_elements, peak, r.step_ms
            );
        }
        let f = self.proxy_fit;
        let _ = writeln!(out, "proxy fit: slope {:.1} intercept {:.1} R^2 {:.4}", f.slope, f.intercept, f.r2);
        match self.alloc_fit {
            Some(f) => {
                let _ = writeln!(out, "alloc fit: slope {:.1} intercept {:.1} R^2 {:.4}", f.slope, f.intercept, f.r2);
            }
            None => out.push_str("alloc fit: unavailable (proxy-only mode)\n"),
        }
        out
    }
}

/// Runs `steps` training steps on `videos` (batch 1) at each rate with a
/// fresh model and memory, recording the activation proxy, the peak extra
/// heap during each step and wall time.
pub fn profile_memory(
    cfg: &RunConfig,
    num_classes: usize,
    videos: &[AnnotatedVideo],
    rates: &[f64],
    steps: usize,
    probe: Option<&dyn AllocProbe>,
) -> Result<ProfileReport> {
    if rates.is_empty() || videos.is_empty() || steps == 0 {
        return Err(Error::InvalidConfig("profile needs rates, videos and at least one step".into()));
    }
    let probe = match probe {
        Some(p) if p.is_active() => Some(p),
        _ => {
            log::warn!("allocator statistics unavailable; reporting the activation proxy only");
            None
        }
    };
    let mut rows = Vec::new();
    for &rate in rates {
        let mut c = cfg.clone();
        c.sample_rate = rate;
        c.optim.batch = 1;
        c.validate()?;
        let mut trainer = Trainer::new(c, num_classes, Some(FeatureMemory::in_memory()))?;
        trainer.init_memory(videos)?;
        let (mut proxy, mut peak, mut ms) = (0usize, 0usize, 0.0);
        for s in 0..steps {
            let video = &videos[s % videos.len()];
            if let Some(p) = probe {
                p.reset_peak();
            }
            let t0 = Instant::now();
            let r = trainer.train_step(&[video], 0, s as u64)?;
            ms += t0.elapsed().as_secs_f64() * 1e3;
            proxy += r.activations;
            if let Some(p) = probe {
                peak += p.peak_bytes();
            }
        }
        rows.push(ProfileRow {
            rate,
            sampled_clips: crate::video::num_sampled(cfg.num_clips(), rate),
            proxy_elements: proxy as f64 / steps as f64,
            peak_bytes: probe.map(|_| peak / steps),
            step_ms: ms / steps as f64,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.rate).collect();
    let proxy_fit = fit_line(&xs, &rows.iter().map(|r| r.proxy_elements).collect::<Vec<_>>());
    let alloc_fit = probe.map(|_| fit_line(&xs, &rows.iter().map(|r| r.peak_bytes.unwrap_or(0) as f64).collect::<Vec<_>>()));
    Ok(ProfileReport {
        rows,
        proxy_fit,
        alloc_fit,
    })
}
