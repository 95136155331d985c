//! Runtime and memory measurement: warmup plus repeated runs with per-stage samples, mean and
//! 95% t-interval summaries, and resident-set probes for open/zoom/pan scenarios.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::patchflow::{RunStatus, RunSummary, Stage};
use crate::pyramid::{virtual_synthetic_slide, SyntheticSpec, TileKey};
use crate::tilecache::{tiles_for_viewport, CacheBudget, TileCache, Viewport};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("run {run} failed: {message}")]
    Run { run: usize, message: String },
    #[error("resident-set sampling is not supported on this platform")]
    Unsupported,
    #[error(transparent)]
    Cache(#[from] crate::tilecache::CacheError),
    #[error(transparent)]
    Pyramid(#[from] crate::pyramid::PyramidError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Measured samples of the non-warmup runs, in milliseconds per stage and seconds per run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: [Vec<f64>; 5],
    pub total_s: Vec<f64>,
}

impl StageTimings {
    pub fn push(&mut self, s: &RunSummary) {
        for (samples, ms) in self.stages.iter_mut().zip(s.stage_ms) {
            samples.push(ms);
        }
        self.total_s.push(s.wall_ms / 1e3);
    }

    pub fn runs(&self) -> usize {
        self.total_s.len()
    }

    pub fn samples(&self, stage: Stage) -> &[f64] {
        &self.stages[stage as usize]
    }

    /// CSV with columns `run,stage,sample_ms`, runs numbered from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "stage", "sample_ms"]).map_err(csv_io)?;
        for run in 0..self.runs() {
            for stage in Stage::ALL {
                let v = self.stages[stage as usize][run];
                w.write_record([(run + 1).to_string(), stage.name().to_string(), v.to_string()]).map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> BenchError {
    BenchError::Io(std::io::Error::other(e))
}

/// Runs `launcher` `warmups` times, discarding the results, then `runs` times, recording each
/// run's stage times. Runs are strictly sequential. Any failure or halted run aborts the
/// benchmark.
pub fn run_benchmark<F, E>(mut launcher: F, warmups: usize, runs: usize) -> Result<StageTimings, BenchError>
where
    F: FnMut() -> Result<RunSummary, E>,
    E: std::fmt::Display,
{
    if runs == 0 {
        return Err(BenchError::Argument("runs must be at least 1".into()));
    }
    let mut once = |run: usize| -> Result<RunSummary, BenchError> {
        let s = launcher().map_err(|e| BenchError::Run { run, message: e.to_string() })?;
        if s.status != RunStatus::Finished {
            return Err(BenchError::Run { run, message: "run was halted".into() });
        }
        Ok(s)
    };
    for w in 0..warmups {
        once(w)?;
    }
    let mut timings = StageTimings::default();
    for r in 0..runs {
        timings.push(&once(warmups + r)?);
    }
    Ok(timings)
}

/// Mean and 95% confidence half-width of one sample set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub half_width: f64,
    /// Set when n < 2 and the interval is undefined; `half_width` is then 0.
    pub degenerate: bool,
}

/// Two-sided 97.5% quantile of Student's t with `dof` degrees of freedom.
pub fn t_quantile_975(dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64).expect("dof >= 1").inverse_cdf(0.975)
}

pub fn mean_ci(samples: &[f64]) -> MeanCi {
    let n = samples.len();
    assert!(n >= 1, "mean_ci needs at least one sample");
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MeanCi { n, mean, std_dev: 0.0, half_width: 0.0, degenerate: true };
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let half_width = t_quantile_975(n - 1) * std_dev / (n as f64).sqrt();
    MeanCi { n, mean, std_dev, half_width, degenerate: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    #[serde(flatten)]
    pub ci: MeanCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stages: Vec<StageSummary>,
    pub total_s: MeanCi,
}

pub fn summarize(t: &StageTimings) -> Summary {
    let stages = Stage::ALL
        .into_iter()
        .map(|s| StageSummary { stage: s.name().into(), ci: mean_ci(t.samples(s)) })
        .collect();
    Summary { stages, total_s: mean_ci(&t.total_s) }
}

/// Resident-set size of this process in bytes, from `/proc/self/statm`.
pub fn resident_bytes() -> Result<u64, BenchError> {
    let statm = std::fs::read_to_string("/proc/self/statm").map_err(|_| BenchError::Unsupported)?;
    let pages: u64 = statm.split_whitespace().nth(1).and_then(|v| v.parse().ok()).ok_or(BenchError::Unsupported)?;
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if page <= 0 {
        return Err(BenchError::Unsupported);
    }
    Ok(pages * page as u64)
}

pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

/// Samples the resident set on a background thread until dropped.
struct Sampler {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<(u64, usize)>>,
}

impl Sampler {
    fn start() -> Result<Self, BenchError> {
        resident_bytes()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let (mut peak, mut count) = (0u64, 0usize);
            loop {
                if let Ok(b) = resident_bytes() {
                    peak = peak.max(b);
                    count += 1;
                }
                if flag.load(Ordering::Relaxed) {
                    break (peak, count);
                }
                std::thread::sleep(SAMPLE_INTERVAL);
            }
        });
        Ok(Self { stop, handle: Some(handle) })
    }

    fn finish(mut self) -> (u64, usize) {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().expect("joined once").join().expect("sampler thread")
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scenario")]
pub enum MemoryScenario {
    Startup,
    OpenSlide,
    ZoomPan { seconds: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub slide_width: u32,
    pub slide_height: u32,
    pub seed: u64,
    pub budget_bytes: u64,
    /// Viewer steps per simulated second.
    pub steps_per_second: u32,
    /// Sleep between steps so the trace takes its nominal wall time.
    pub paced: bool,
    pub out_width: u32,
    pub out_height: u32,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            slide_width: 100_000,
            slide_height: 100_000,
            seed: 42,
            budget_bytes: 256 << 20,
            steps_per_second: 4,
            paced: false,
            out_width: 1920,
            out_height: 1080,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub scenario: MemoryScenario,
    pub peak_bytes: u64,
    pub final_bytes: u64,
    pub samples: usize,
    pub steps: usize,
    pub tile_loads: u64,
    pub cache_peak_bytes: u64,
    pub budget_bytes: u64,
}

/// The deterministic viewer trace: a seeded random walk over centre and zoom.
pub fn zoom_pan_trace(cfg: &MemoryConfig, steps: usize) -> Vec<Viewport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (f64::from(cfg.slide_width), f64::from(cfg.slide_height));
    let min_view = f64::from(cfg.out_width) / 2.0;
    let max_view = w.max(h);
    let mut view = max_view;
    let (mut cx, mut cy) = (w / 2.0, h / 2.0);
    (0..steps)
        .map(|_| {
            if rng.gen_bool(0.3) {
                view = (view * 2f64.powf(rng.gen_range(-1.0..1.0))).clamp(min_view, max_view);
            }
            cx = (cx + rng.gen_range(-0.5..0.5) * view).clamp(0.0, w);
            cy = (cy + rng.gen_range(-0.5..0.5) * view).clamp(0.0, h);
            Viewport {
                center_x: cx,
                center_y: cy,
                view_width_l0: view,
                out_width_px: cfg.out_width,
                out_height_px: cfg.out_height,
            }
        })
        .collect()
}

/// Runs a scenario in this process and reports its resident-set peak and final value.
///
/// Scenarios are cumulative: `OpenSlide` starts up, `ZoomPan` also opens the slide.
pub fn memory_scenario(scenario: MemoryScenario, cfg: &MemoryConfig) -> Result<MemoryReport, BenchError> {
    let sampler = Sampler::start()?;
    let mut report = MemoryReport {
        scenario,
        peak_bytes: 0,
        final_bytes: 0,
        samples: 0,
        steps: 0,
        tile_loads: 0,
        cache_peak_bytes: 0,
        budget_bytes: cfg.budget_bytes,
    };
    let mut cache = None;
    if scenario != MemoryScenario::Startup {
        let spec = SyntheticSpec::default();
        let slide = Arc::new(virtual_synthetic_slide(cfg.seed, cfg.slide_width, cfg.slide_height, &spec)?);
        cache = Some(TileCache::new(slide, CacheBudget { max_bytes: cfg.budget_bytes })?);
    }
    if let (MemoryScenario::ZoomPan { seconds }, Some(cache)) = (scenario, cache.as_ref()) {
        if !(seconds >= 0.0) {
            return Err(BenchError::Argument("seconds must be non-negative".into()));
        }
        let steps = (seconds * f64::from(cfg.steps_per_second)).round() as usize;
        let step_time = Duration::from_secs_f64(1.0 / f64::from(cfg.steps_per_second.max(1)));
        let start = Instant::now();
        for (i, v) in zoom_pan_trace(cfg, steps).iter().enumerate() {
            view_step(cache, v)?;
            report.cache_peak_bytes = report.cache_peak_bytes.max(cache.resident_bytes());
            if cfg.paced {
                let due = step_time * (i as u32 + 1);
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        }
        report.steps = steps;
        report.tile_loads = cache.stats().loads;
    }
    report.final_bytes = resident_bytes()?;
    let (peak, samples) = sampler.finish();
    report.peak_bytes = peak.max(report.final_bytes);
    report.samples = samples + 1;
    drop(cache);
    Ok(report)
}

/// One frame: resolve every visible tile (fallbacks schedule the misses), load the misses in
/// parallel, then touch them in row-major order so the queue order does not depend on which
/// load finished first.
fn view_step(cache: &TileCache, v: &Viewport) -> Result<(), BenchError> {
    let keys = tiles_for_viewport(cache.pyramid(), v);
    let mut missing: Vec<TileKey> = Vec::new();
    for &k in &keys {
        if cache.resolve_with_fallback(k)?.actual_level != k.level {
            missing.push(k);
        }
    }
    missing.par_iter().try_for_each(|&k| cache.get_tile(k).map(drop))?;
    for &k in &missing {
        cache.get_tile(k)?;
    }
    cache.drain_scheduled()?;
    Ok(())
}
