//! `spiralforge` command line: trajectory design, data simulation, training,
//! search, evaluation and streaming.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spiralforge::config::{RunConfig, TrajectoryKind};
use spiralforge::denoiser::{sliding_window_apply, train_epochs, TrainState};
use spiralforge::hyperband::{
    run_search, schedule, total_epochs, RungSummary, SearchOptions, SearchOutcome, SpiralEvaluator, LEDGER_FILE,
};
use spiralforge::metrics::{evaluate_series, MetricsReport};
use spiralforge::nufft::FrameGridder;
use spiralforge::phantom::{build_dataset, Dataset, ImageSeries};
use spiralforge::stream::{latency_report, replay_images, replay_kspace, run_stream, FrameInput, Mode};
use spiralforge::trajgen::{InterleaveOrdering, Trajectory, Transition};
use spiralforge::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "spiralforge", version, about = "Variable-density spiral design with a learned sliding-window denoiser")]
struct Cli {
    /// Run configuration (JSON); defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trajectory and write its manifest and tensors.
    Trajgen(TrajgenArgs),
    /// Simulate ground-truth and gridded series for a trajectory.
    Simulate(SimulateArgs),
    /// Train the denoiser on a simulated dataset.
    Train(TrainArgs),
    /// Joint trajectory/network search.
    Hyperband(HyperbandArgs),
    /// Score reconstructions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the real-time reconstruction pipeline on a replayed series.
    Stream(StreamArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Spiral,
    Uniform,
    Radial,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransitionArg {
    Linear,
    Hanning,
    Quadratic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OrderingArg {
    Linear,
    TinyGolden,
}

#[derive(Args, Debug)]
struct TrajgenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Frames to generate (defaults to the dataset's frame count).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    r_inner: Option<f64>,
    #[arg(long)]
    u_inner: Option<f64>,
    #[arg(long)]
    r_outer: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    transition: Option<TransitionArg>,
    #[arg(long, value_enum)]
    ordering: Option<OrderingArg>,
    #[arg(long)]
    tr_ms: Option<f64>,
    #[arg(long)]
    radial_spokes: Option<usize>,
    /// Also write a scatter plot of the first frame's samples (binary PGM).
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    /// 75/10/15 train/validation/test split.
    Final,
    /// Search subset (30/10/0 by default).
    Search,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Trajectory manifest written by `trajgen`.
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "final")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total epochs (defaults to the configured final budget).
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HyperbandArgs {
    /// Checkpoint directory holding the ledger, trials and report.
    #[arg(long)]
    out: PathBuf,
    /// Continue the search recorded in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed rungs (for staged runs).
    #[arg(long)]
    stop_after_rungs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset directory; its test split is reconstructed with `--model`.
    #[arg(long, requires = "model", conflicts_with_all = ["gt", "recon"])]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ground-truth series tensor (with `--recon`).
    #[arg(long, requires = "recon")]
    gt: Option<PathBuf>,
    /// Reconstructed series tensor, aligned to the end of `--gt`.
    #[arg(long, requires = "gt")]
    recon: Option<PathBuf>,
    /// 1-indexed ground-truth frames to score (comma separated).
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Parallel,
    Serial,
}

#[derive(Args, Debug)]
struct StreamArgs {
    /// Image series tensor `[T, H, W]`. With `--traj` it is treated as ground
    /// truth and acquired on the trajectory; otherwise it is replayed as
    /// already gridded frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Dataset series whose coil maps and noise are used with `--traj`.
    #[arg(long, default_value_t = 0, requires = "traj")]
    series_id: usize,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "parallel")]
    mode: ModeArg,
    #[arg(long)]
    inject_grid_ms: Option<f64>,
    #[arg(long)]
    inject_denoise_ms: Option<f64>,
    /// Stream this many frames, cycling through the input.
    #[arg(long)]
    frames: Option<usize>,
    /// JSON latency report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Reconstructed series tensor.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("SPIRALFORGE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                par::init_global_threads(n);
            }
            _ => return fail_usage(&format!("SPIRALFORGE_THREADS must be a positive integer, got {v:?}")),
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail_usage(first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {} {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn fail_usage(msg: &str) -> ExitCode {
    eprintln!("ERROR USAGE {msg}");
    ExitCode::from(1)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        1
    } else if e.is_numerical() {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Trajgen(a) => cmd_trajgen(cfg, a),
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Hyperband(a) => cmd_hyperband(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Stream(a) => cmd_stream(cfg, a),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_trajgen(mut cfg: RunConfig, a: TrajgenArgs) -> Result<()> {
    let t = &mut cfg.trajectory;
    if let Some(k) = a.kind {
        t.kind = match k {
            KindArg::Spiral => TrajectoryKind::Spiral,
            KindArg::Uniform => TrajectoryKind::Uniform,
            KindArg::Radial => TrajectoryKind::Radial,
        };
    }
    let s = &mut t.spiral;
    s.r_inner = a.r_inner.unwrap_or(s.r_inner);
    s.u_inner = a.u_inner.unwrap_or(s.u_inner);
    s.r_outer = a.r_outer.unwrap_or(s.r_outer);
    s.rho = a.rho.unwrap_or(s.rho);
    s.tr_ms = a.tr_ms.unwrap_or(s.tr_ms);
    if let Some(tr) = a.transition {
        s.transition = match tr {
            TransitionArg::Linear => Transition::Linear,
            TransitionArg::Hanning => Transition::Hanning,
            TransitionArg::Quadratic => Transition::Quadratic,
        };
    }
    if let Some(o) = a.ordering {
        s.ordering = match o {
            OrderingArg::Linear => InterleaveOrdering::Linear,
            OrderingArg::TinyGolden => InterleaveOrdering::TinyGolden,
        };
    }
    t.radial_spokes = a.radial_spokes.unwrap_or(t.radial_spokes);
    let n_frames = a.frames.unwrap_or(cfg.dataset.n_frames);
    let traj = cfg.trajectory.build(&cfg.system, n_frames)?;
    traj.save(&a.out, "trajectory", &cfg.system)?;
    if let Some(p) = &a.scatter {
        std::fs::write(p, scatter_pgm(&traj.frame_coords(0), 512))?;
    }
    println!(
        "{}: {} frames, {} interleaves, {} samples per interleave -> {}",
        traj.meta.label(),
        traj.n_frames(),
        traj.n_interleaves(),
        traj.n_samples(),
        a.out.join("trajectory.json").display()
    );
    Ok(())
}

fn cmd_simulate(cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    let (traj, manifest) = Trajectory::load(&a.traj)?;
    if manifest.system.matrix != cfg.dataset.matrix {
        return Err(Error::Config(format!(
            "trajectory matrix {} differs from dataset matrix {}",
            manifest.system.matrix, cfg.dataset.matrix
        )));
    }
    let split = match a.split {
        SplitArg::Final => cfg.dataset.final_split()?,
        SplitArg::Search => cfg.dataset.search_split()?,
    };
    let data = build_dataset(&cfg.dataset, &split, &traj)?;
    data.save(&a.out, &cfg.dataset, &split, traj.meta.label())?;
    println!(
        "{} train / {} val / {} test series of {} frames at {}x{} -> {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.dataset.n_frames,
        cfg.dataset.matrix,
        cfg.dataset.matrix,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let (data, _) = Dataset::load(&a.data)?;
    let opts = &cfg.training.final_training;
    let epochs = a.epochs.unwrap_or(opts.epochs);
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::new(cfg.training.arch, opts.model_seed)?,
    };
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    while state.epoch < epochs {
        let n = opts.val_every.max(1).min(epochs - state.epoch);
        state = train_epochs(state, &data.train, &data.val, n, &cfg.training.hyper)?;
        state.save(&ckpt)?;
        println!(
            "epoch {:>4}  loss {:.5}  val ssim {}",
            state.epoch,
            state.loss_history.last().copied().unwrap_or(f64::NAN),
            state.val_ssim.map_or("n/a".to_string(), |v| format!("{v:.5}"))
        );
    }
    write_json(
        &a.out.join("train_log.json"),
        &serde_json::json!({
            "epochs": state.epoch,
            "loss_history": state.loss_history,
            "val_history": state.val_history,
            "best_val_ssim": state.best_val_ssim,
        }),
    )?;
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn cmd_hyperband(cfg: RunConfig, a: HyperbandArgs) -> Result<()> {
    if a.out.join(LEDGER_FILE).exists() && !a.resume {
        return Err(Error::Config(format!("{} already holds a search; pass --resume", a.out.display())));
    }
    if a.resume && !a.out.join(LEDGER_FILE).exists() {
        return Err(Error::Config(format!("nothing to resume in {}", a.out.display())));
    }
    let params = cfg.hyperband.params;
    let table = schedule(&params)?;
    println!("hyperband R={} eta={}: {} brackets, {} epochs scheduled", params.max_epochs, params.eta, table.len(), total_epochs(&table));
    println!("{:>7} {:>4} {:>7} {:>7} {:>10}  promoted", "bracket", "rung", "trials", "epochs", "best ssim");
    let evaluator = SpiralEvaluator {
        dataset: cfg.dataset.clone(),
        system: cfg.system,
        arch: cfg.training.arch,
        hyper: cfg.training.hyper.clone(),
        model_seed: cfg.training.final_training.model_seed,
    };
    let mut progress = |r: &RungSummary| {
        println!(
            "{:>7} {:>4} {:>7} {:>7} {:>10}  {:?}{}",
            r.bracket,
            r.rung,
            r.n_trials,
            r.cumulative_epochs,
            r.best_score.map_or("-".into(), |s| format!("{s:.5}")),
            r.promoted,
            if r.replayed { "  (replayed)" } else { "" }
        )
    };
    let options = SearchOptions { stop_after_rungs: a.stop_after_rungs };
    match run_search(&cfg.hyperband.space, &params, &cfg.system, &evaluator, &a.out, &options, &mut progress)? {
        SearchOutcome::Completed(report) => {
            println!(
                "best trial {} (validation SSIM {:.5}), {} epochs consumed: {}",
                report.best_trial,
                report.best_score,
                report.consumed_epochs,
                serde_json::to_string(&report.best_config)?
            );
        }
        SearchOutcome::Interrupted { rungs_completed } => {
            println!("stopped after {rungs_completed} rungs; continue with --resume");
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    let frames = a.frames.unwrap_or_else(|| cfg.training.final_training.metric_frames.clone());
    let rows = match (&a.data, &a.model, &a.gt, &a.recon) {
        (Some(data), Some(model), _, _) => {
            let (ds, _) = Dataset::load(data)?;
            let state = TrainState::load(model)?;
            let model = state.best_model();
            if ds.test.is_empty() {
                return Err(Error::EmptySplit("test"));
            }
            let rows = par::try_map_range(ds.test.len(), |k| {
                let pair = &ds.test[k];
                let recon = sliding_window_apply(&model, &pair.gridded)?;
                evaluate_series(pair.id, &pair.gt, &recon, &frames)
            })?;
            rows.into_iter().flatten().collect()
        }
        (None, _, Some(gt), Some(recon)) => {
            let gt = ImageSeries::load(gt, 0.0)?;
            let recon = ImageSeries::load(recon, 0.0)?;
            evaluate_series(0, &gt, &recon, &frames)?
        }
        _ => return Err(Error::Config("evaluate needs --data with --model, or --gt with --recon".into())),
    };
    let report = MetricsReport::from_rows(rows);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(a.out.join("summary.json"), report.summary_json()? + "\n")?;
    let s = &report.summary;
    println!("{} series, frames {:?}", s.n_series, s.frames);
    println!("NRMSE {:.4} ± {:.4}", s.nrmse.mean, s.nrmse.std);
    println!("PSNR  {:.2} ± {:.2} dB", s.psnr_db.mean, s.psnr_db.std);
    println!("SSIM  {:.4} ± {:.4}", s.ssim.mean, s.ssim.std);
    println!("LAPE  {:.4} ± {:.4}", s.lape_ratio.mean, s.lape_ratio.std);
    Ok(())
}

fn cmd_stream(cfg: RunConfig, a: StreamArgs) -> Result<()> {
    let period = cfg.trajectory.spiral.t_acq_ms;
    let series = ImageSeries::load(&a.input, period)?;
    let model = TrainState::load(&a.model)?.best_model();
    let n = a.frames.unwrap_or(series.n_frames());
    let cycled = ImageSeries::new(
        ndarray_cycle(&series, n),
        period,
    );
    let mut options = cfg.stream.clone();
    options.mode = match a.mode {
        ModeArg::Parallel => Mode::Parallel,
        ModeArg::Serial => Mode::Serial,
    };
    options.inject_grid_ms = a.inject_grid_ms.unwrap_or(options.inject_grid_ms);
    options.inject_denoise_ms = a.inject_denoise_ms.unwrap_or(options.inject_denoise_ms);
    let gridder;
    let (source, gridder_ref): (Box<dyn Iterator<Item = FrameInput> + Send>, _) = match &a.traj {
        Some(t) => {
            let (traj, _) = Trajectory::load(t)?;
            let maps = cfg.dataset.coil_maps_for(a.series_id)?;
            gridder = FrameGridder::new(&maps, &traj, cfg.dataset.grid_options(a.series_id))?;
            (replay_kspace(&gridder, &cycled)?, Some(&gridder))
        }
        None => (replay_images(&cycled), None),
    };
    let run = run_stream(source, gridder_ref, &model, &options, period, &mut |_, _| {})?;
    let (text, json) = latency_report(&run.stats)?;
    print!("{text}");
    if let Some(p) = &a.report {
        std::fs::write(p, json + "\n")?;
    }
    if let Some(p) = &a.output {
        run.series.save(p)?;
    }
    Ok(())
}

/// White background with one dark pixel per sample; k-space centre in the middle.
fn scatter_pgm(coords: &[[f64; 2]], side: usize) -> Vec<u8> {
    let mut pixels = vec![255u8; side * side];
    for &[kx, ky] in coords {
        let col = ((kx + 0.5) * side as f64).floor().clamp(0.0, side as f64 - 1.0) as usize;
        let row = ((0.5 - ky) * side as f64).floor().clamp(0.0, side as f64 - 1.0) as usize;
        pixels[row * side + col] = 0;
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

/// First `n` frames of the input repeated cyclically.
fn ndarray_cycle(series: &ImageSeries, n: usize) -> ndarray::Array3<f64> {
    let (t, h, w) = series.data.dim();
    ndarray::Array3::from_shape_fn((n, h, w), |(k, r, c)| series.data[[k % t, r, c]])
}
