//! Staged real-time reconstruction: acquire → grid → denoise → emit.
//!
//! Stages are threads joined by bounded FIFO channels, so gridding of frame
//! `k` overlaps denoising of the window ending at frame `k − 1`. Serial mode
//! runs grid, denoise and emit back to back on one worker for comparison.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, DenoiserModel, WINDOW};
use crate::error::{Error, Result};
use crate::nufft::FrameGridder;
use crate::phantom::ImageSeries;

/// Frames in flight beyond the denoiser's history: one held by each of the
/// four stages plus a full queue between each pair of stages.
pub const fn in_flight_bound(queue_capacity: usize) -> usize {
    4 + 3 * queue_capacity
}

/// What a source yields for one frame.
#[derive(Clone, Debug)]
pub enum FrameInput {
    /// Coil samples `[coils, samples]` for the trajectory frame `frame % T`.
    KSpace(Array2<Complex64>),
    /// Already gridded magnitude image (replay mode).
    Image(Array2<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timestamps {
    pub enqueue: Option<Instant>,
    pub grid_start: Option<Instant>,
    pub grid_end: Option<Instant>,
    pub denoise_start: Option<Instant>,
    pub denoise_end: Option<Instant>,
    pub emit: Option<Instant>,
}

#[derive(Debug)]
pub struct FramePacket<T> {
    /// 0-indexed acquisition frame.
    pub frame_index: usize,
    pub payload: T,
    pub times: Timestamps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Parallel,
    Serial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamOptions {
    pub mode: Mode,
    /// Extra time spent in each stage per frame.
    pub inject_grid_ms: f64,
    pub inject_denoise_ms: f64,
    pub inject_emit_ms: f64,
    /// Longest wait for the source before failing with a stall.
    pub stall_timeout_ms: u64,
    pub queue_capacity: usize,
    /// Output frames ignored when measuring the steady-state period.
    pub warmup_frames: usize,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            mode: Mode::Parallel,
            inject_grid_ms: 0.0,
            inject_denoise_ms: 0.0,
            inject_emit_ms: 0.0,
            stall_timeout_ms: 5000,
            queue_capacity: 2,
            warmup_frames: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn of(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return LatencyStats::default();
        }
        let mut v = samples_ms.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        // Nearest-rank percentile.
        let p95 = v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats { mean_ms: v.iter().sum::<f64>() / n as f64, median_ms: median, p95_ms: p95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub mode: Mode,
    pub frames_in: usize,
    pub frames_out: usize,
    pub grid: LatencyStats,
    pub denoise: LatencyStats,
    /// Scaling, formatting and hand-off to the sink.
    pub emit: LatencyStats,
    /// Acquisition of the latest frame to its emission.
    pub end_to_end: LatencyStats,
    /// Mean interval between emitted frames after warm-up.
    pub steady_period_ms: Option<f64>,
    pub max_in_flight: usize,
    pub injected_ms: [f64; 3],
}

/// Text table and JSON for a run's latency decomposition.
pub fn latency_report(stats: &PipelineStats) -> Result<(String, String)> {
    let mut text = format!(
        "mode {:?}, {} frames in, {} out\n{:<10}{:>10}{:>10}{:>10}\n",
        stats.mode, stats.frames_in, stats.frames_out, "stage", "mean", "median", "p95"
    );
    for (name, s) in [("grid", stats.grid), ("denoise", stats.denoise), ("other", stats.emit), ("total", stats.end_to_end)] {
        text.push_str(&format!("{name:<10}{:>10.2}{:>10.2}{:>10.2}\n", s.mean_ms, s.median_ms, s.p95_ms));
    }
    match stats.steady_period_ms {
        Some(p) => text.push_str(&format!("output period {p:.2} ms ({:.1} frames/s)\n", 1000.0 / p)),
        None => text.push_str("output period n/a (too few frames)\n"),
    }
    Ok((text, serde_json::to_string_pretty(stats)?))
}

fn ms(a: Option<Instant>, b: Option<Instant>) -> Option<f64> {
    Some(b?.duration_since(a?).as_secs_f64() * 1e3)
}

fn pause(ms: f64) {
    if ms > 0.0 {
        thread::sleep(Duration::from_secs_f64(ms / 1e3));
    }
}

struct Grid<'a> {
    gridder: Option<&'a FrameGridder>,
    inject_ms: f64,
}

impl Grid<'_> {
    fn run(&self, p: FramePacket<FrameInput>) -> Result<FramePacket<Array2<f64>>> {
        let mut times = p.times;
        times.grid_start = Some(Instant::now());
        let image = match p.payload {
            FrameInput::Image(img) => img,
            FrameInput::KSpace(samples) => {
                let g = self.gridder.ok_or_else(|| Error::StageError {
                    stage: "grid",
                    frame: p.frame_index,
                    message: "k-space input needs a trajectory".into(),
                })?;
                let traj_frame = p.frame_index % g.n_traj_frames();
                g.reconstruct(&samples, traj_frame).map_err(|e| Error::StageError {
                    stage: "grid",
                    frame: p.frame_index,
                    message: e.to_string(),
                })?
            }
        };
        pause(self.inject_ms);
        times.grid_end = Some(Instant::now());
        Ok(FramePacket { frame_index: p.frame_index, payload: image, times })
    }
}

struct Denoise<'a> {
    model: &'a DenoiserModel,
    inject_ms: f64,
    history: VecDeque<Array2<f64>>,
}

impl Denoise<'_> {
    /// Adds a gridded frame; returns the estimate once five frames are held.
    fn push(&mut self, p: FramePacket<Array2<f64>>) -> Result<Option<FramePacket<Array2<f64>>>> {
        let mut times = p.times;
        times.denoise_start = Some(Instant::now());
        if let Some(first) = self.history.front() {
            if first.dim() != p.payload.dim() {
                return Err(Error::StageError {
                    stage: "denoise",
                    frame: p.frame_index,
                    message: format!("frame shape {:?} differs from {:?}", p.payload.dim(), first.dim()),
                });
            }
        }
        self.history.push_back(p.payload);
        if self.history.len() > WINDOW {
            self.history.pop_front();
        }
        if self.history.len() < WINDOW {
            return Ok(None);
        }
        let (h, w) = self.history[0].dim();
        let mut window = Array3::zeros((WINDOW, h, w));
        for (k, f) in self.history.iter().enumerate() {
            window.index_axis_mut(Axis(0), k).assign(f);
        }
        let out = forward(self.model, window.view()).map_err(|e| Error::StageError {
            stage: "denoise",
            frame: p.frame_index,
            message: e.to_string(),
        })?;
        pause(self.inject_ms);
        times.denoise_end = Some(Instant::now());
        Ok(Some(FramePacket { frame_index: p.frame_index, payload: out, times }))
    }
}

struct Collector<'s> {
    sink: &'s mut dyn FnMut(usize, &Array2<f64>),
    inject_ms: f64,
    frames: Vec<Array2<f64>>,
    packets: Vec<(usize, Timestamps)>,
    acquired: Arc<AtomicUsize>,
    max_in_flight: usize,
}

impl Collector<'_> {
    fn emit(&mut self, p: FramePacket<Array2<f64>>) -> Result<()> {
        let expected = self.frames.len() + WINDOW - 1;
        if p.frame_index != expected {
            return Err(Error::StageError {
                stage: "emit",
                frame: p.frame_index,
                message: format!("out of order, expected frame {expected}"),
            });
        }
        pause(self.inject_ms);
        (self.sink)(p.frame_index, &p.payload);
        let mut times = p.times;
        times.emit = Some(Instant::now());
        self.frames.push(p.payload);
        self.packets.push((p.frame_index, times));
        let in_flight = self.acquired.load(Ordering::SeqCst).saturating_sub(self.frames.len() + WINDOW - 1);
        self.max_in_flight = self.max_in_flight.max(in_flight);
        Ok(())
    }
}

fn spawn_source(
    source: Box<dyn Iterator<Item = FrameInput> + Send>,
    tx: SyncSender<FramePacket<FrameInput>>,
    acquired: Arc<AtomicUsize>,
) {
    // Detached: a stalled source must not block the pipeline's shutdown.
    thread::spawn(move || {
        for (frame_index, payload) in source.enumerate() {
            acquired.fetch_add(1, Ordering::SeqCst);
            let times = Timestamps { enqueue: Some(Instant::now()), ..Default::default() };
            if tx.send(FramePacket { frame_index, payload, times }).is_err() {
                break;
            }
        }
    });
}

fn recv_source(rx: &Receiver<FramePacket<FrameInput>>, timeout_ms: u64) -> Result<Option<FramePacket<FrameInput>>> {
    match rx.recv_timeout(Duration::from_millis(timeout_ms)) {
        Ok(p) => Ok(Some(p)),
        Err(RecvTimeoutError::Disconnected) => Ok(None),
        Err(RecvTimeoutError::Timeout) => Err(Error::SourceStall { timeout_ms }),
    }
}

/// Result of a streaming run.
pub struct StreamRun {
    /// Estimates of input frames 5..T (1-indexed).
    pub series: ImageSeries,
    pub stats: PipelineStats,
}

/// Streams `source` through the pipeline. `gridder` is required for k-space
/// input; `sink` sees each output frame (by 0-indexed input frame) as soon
/// as it is emitted.
pub fn run_stream(
    source: Box<dyn Iterator<Item = FrameInput> + Send>,
    gridder: Option<&FrameGridder>,
    model: &DenoiserModel,
    options: &StreamOptions,
    frame_period_ms: f64,
    sink: &mut dyn FnMut(usize, &Array2<f64>),
) -> Result<StreamRun> {
    if options.queue_capacity == 0 {
        return Err(Error::Config("queue_capacity must be at least 1".into()));
    }
    let acquired = Arc::new(AtomicUsize::new(0));
    let (src_tx, src_rx) = sync_channel(options.queue_capacity);
    spawn_source(source, src_tx, acquired.clone());
    let grid = Grid { gridder, inject_ms: options.inject_grid_ms };
    let mut denoise = Denoise { model, inject_ms: options.inject_denoise_ms, history: VecDeque::new() };
    let mut collector = Collector {
        sink,
        inject_ms: options.inject_emit_ms,
        frames: Vec::new(),
        packets: Vec::new(),
        acquired: acquired.clone(),
        max_in_flight: 0,
    };
    let mut grid_times = Vec::new();
    let mut denoise_times = Vec::new();

    match options.mode {
        Mode::Serial => {
            while let Some(p) = recv_source(&src_rx, options.stall_timeout_ms)? {
                let g = grid.run(p)?;
                grid_times.push(ms(g.times.grid_start, g.times.grid_end).unwrap_or(0.0));
                if let Some(d) = denoise.push(g)? {
                    denoise_times.push(ms(d.times.denoise_start, d.times.denoise_end).unwrap_or(0.0));
                    collector.emit(d)?;
                }
            }
        }
        Mode::Parallel => {
            let (grid_tx, grid_rx) = sync_channel::<FramePacket<Array2<f64>>>(options.queue_capacity);
            let (den_tx, den_rx) = sync_channel::<FramePacket<Array2<f64>>>(options.queue_capacity);
            let (grid, denoise, collector) = (&grid, &mut denoise, &mut collector);
            let (grid_res, den_res, emit_res) = thread::scope(move |scope| {
                let grid_worker = scope.spawn(move || -> Result<Vec<f64>> {
                    let mut times = Vec::new();
                    while let Some(p) = recv_source(&src_rx, options.stall_timeout_ms)? {
                        let g = grid.run(p)?;
                        times.push(ms(g.times.grid_start, g.times.grid_end).unwrap_or(0.0));
                        if grid_tx.send(g).is_err() {
                            break;
                        }
                    }
                    drop(grid_tx);
                    Ok(times)
                });
                let denoise_worker = scope.spawn(move || -> Result<Vec<f64>> {
                    let mut times = Vec::new();
                    for g in grid_rx.iter() {
                        if let Some(d) = denoise.push(g)? {
                            times.push(ms(d.times.denoise_start, d.times.denoise_end).unwrap_or(0.0));
                            if den_tx.send(d).is_err() {
                                break;
                            }
                        }
                    }
                    drop(den_tx);
                    Ok(times)
                });
                let mut emit_res = Ok(());
                for d in den_rx.iter() {
                    if let Err(e) = collector.emit(d) {
                        emit_res = Err(e);
                        break;
                    }
                }
                drop(den_rx);
                (
                    grid_worker.join().expect("grid worker panicked"),
                    denoise_worker.join().expect("denoise worker panicked"),
                    emit_res,
                )
            });
            grid_times = grid_res?;
            denoise_times = den_res?;
            emit_res?;
        }
    }

    let frames_in = acquired.load(Ordering::SeqCst);
    if frames_in < WINDOW {
        return Err(Error::SeriesTooShort(frames_in));
    }
    let emit_times: Vec<f64> = collector.packets.iter().filter_map(|(_, t)| ms(t.denoise_end, t.emit)).collect();
    let e2e: Vec<f64> = collector.packets.iter().filter_map(|(_, t)| ms(t.enqueue, t.emit)).collect();
    let stamps: Vec<Instant> = collector.packets.iter().filter_map(|(_, t)| t.emit).collect();
    let steady_period_ms = (stamps.len() > options.warmup_frames + 1).then(|| {
        let a = stamps[options.warmup_frames];
        let b = stamps[stamps.len() - 1];
        b.duration_since(a).as_secs_f64() * 1e3 / (stamps.len() - 1 - options.warmup_frames) as f64
    });
    let (h, w) = collector.frames[0].dim();
    let mut data = Array3::zeros((collector.frames.len(), h, w));
    for (k, f) in collector.frames.iter().enumerate() {
        data.index_axis_mut(Axis(0), k).assign(f);
    }
    let stats = PipelineStats {
        mode: options.mode,
        frames_in,
        frames_out: collector.frames.len(),
        grid: LatencyStats::of(&grid_times),
        denoise: LatencyStats::of(&denoise_times),
        emit: LatencyStats::of(&emit_times),
        end_to_end: LatencyStats::of(&e2e),
        steady_period_ms,
        max_in_flight: collector.max_in_flight,
        injected_ms: [options.inject_grid_ms, options.inject_denoise_ms, options.inject_emit_ms],
    };
    Ok(StreamRun { series: ImageSeries::new(data, frame_period_ms), stats })
}

/// Replay source over pre-gridded frames.
pub fn replay_images(series: &ImageSeries) -> Box<dyn Iterator<Item = FrameInput> + Send> {
    let frames: Vec<Array2<f64>> = series.data.outer_iter().map(|f| f.to_owned()).collect();
    Box::new(frames.into_iter().map(FrameInput::Image))
}

/// Replay source that simulates acquisition of each ground-truth frame.
pub fn replay_kspace(gridder: &FrameGridder, series: &ImageSeries) -> Result<Box<dyn Iterator<Item = FrameInput> + Send>> {
    let frames = (0..series.n_frames())
        .map(|t| {
            let img = series.frame(t).to_owned();
            gridder.acquire(&img, t % gridder.n_traj_frames(), t as u64).map(FrameInput::KSpace)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Box::new(frames.into_iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{sliding_window_apply, Architecture};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> DenoiserModel {
        DenoiserModel::seeded(Architecture { widths: [2, 2, 2], ..Default::default() }, 1).unwrap()
    }

    fn random_series(t: usize, n: usize) -> ImageSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        ImageSeries::new(Array3::from_shape_fn((t, n, n), |_| rng.gen()), 55.0)
    }

    #[test]
    fn streamed_output_equals_offline_in_both_modes() {
        let model = tiny_model();
        let series = random_series(30, 16);
        let offline = sliding_window_apply(&model, &series).unwrap();
        for mode in [Mode::Parallel, Mode::Serial] {
            let mut seen = Vec::new();
            let opts = StreamOptions { mode, ..Default::default() };
            let run = run_stream(replay_images(&series), None, &model, &opts, 55.0, &mut |k, _| seen.push(k)).unwrap();
            assert_eq!(run.series.data, offline.data);
            assert_eq!(seen, (4..30).collect::<Vec<_>>());
            assert_eq!((run.stats.frames_in, run.stats.frames_out), (30, 26));
        }
    }

    #[test]
    fn slow_sink_keeps_memory_bounded() {
        let model = tiny_model();
        let series = random_series(120, 8);
        let opts = StreamOptions::default();
        let run = run_stream(replay_images(&series), None, &model, &opts, 55.0, &mut |_, _| {
            thread::sleep(Duration::from_millis(2))
        })
        .unwrap();
        assert_eq!(run.stats.frames_out, 116);
        assert!(run.stats.max_in_flight <= in_flight_bound(opts.queue_capacity), "{}", run.stats.max_in_flight);
    }

    #[test]
    fn stalled_source_times_out() {
        let model = tiny_model();
        let frames: Vec<FrameInput> = random_series(6, 8).data.outer_iter().map(|f| FrameInput::Image(f.to_owned())).collect();
        let source = frames.into_iter().chain(std::iter::from_fn(|| {
            thread::sleep(Duration::from_secs(3600));
            None
        }));
        let opts = StreamOptions { stall_timeout_ms: 100, ..Default::default() };
        let r = run_stream(Box::new(source), None, &model, &opts, 55.0, &mut |_, _| {});
        assert!(matches!(r, Err(Error::SourceStall { timeout_ms: 100 })));
    }

    #[test]
    fn stage_errors_carry_the_frame() {
        let model = tiny_model();
        let mut frames: Vec<FrameInput> = random_series(8, 8).data.outer_iter().map(|f| FrameInput::Image(f.to_owned())).collect();
        frames[6] = FrameInput::Image(Array2::zeros((4, 4)));
        let r = run_stream(Box::new(frames.into_iter()), None, &model, &StreamOptions::default(), 55.0, &mut |_, _| {});
        assert!(matches!(r, Err(Error::StageError { stage: "denoise", frame: 6, .. })), "{:?}", r.err());
        let k = vec![FrameInput::KSpace(Array2::zeros((1, 3)))];
        let r = run_stream(Box::new(k.into_iter()), None, &model, &StreamOptions::default(), 55.0, &mut |_, _| {});
        assert!(matches!(r, Err(Error::StageError { stage: "grid", frame: 0, .. })));
    }

    #[test]
    fn latency_stats_and_report() {
        let s = LatencyStats::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.mean_ms, s.median_ms, s.p95_ms), (2.5, 2.5, 4.0));
        let model = tiny_model();
        let run = run_stream(replay_images(&random_series(12, 8)), None, &model, &StreamOptions::default(), 55.0, &mut |_, _| {})
            .unwrap();
        let (text, json) = latency_report(&run.stats).unwrap();
        assert!(text.contains("denoise") && run.stats.frames_out == 8);
        let back: PipelineStats = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
        assert!(run.stats.grid.mean_ms < 5.0);
    }
}
