//! Minibatch Adam on the SSIM loss, plus checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::Tensor3;
use super::{record, Architecture, DenoiserModel, WINDOW};
use crate::error::{Error, Result};
use crate::metrics::{self, SsimParams};
use crate::par;
use crate::phantom::SeriesPair;
use crate::tensorfile::Tensor;

pub const CHECKPOINT_MAJOR: u32 = 1;
pub const CHECKPOINT_MINOR: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Random target frames drawn per training series each epoch; `None`
    /// uses every window once.
    pub windows_per_series: Option<usize>,
    /// Random square crop side for training samples (multiple of 4, at least
    /// the SSIM window); `None` trains on full frames.
    pub crop: Option<usize>,
    /// 1-indexed ground-truth frames scored during validation.
    pub val_frames: Vec<usize>,
    pub ssim: SsimParams,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            windows_per_series: None,
            crop: None,
            val_frames: vec![5, 6, 7, 8, 9],
            ssim: SsimParams::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::Config("lr must be positive and batch at least 1".into()));
        }
        if let Some(c) = self.crop {
            if c % 4 != 0 || c < self.ssim.window {
                return Err(Error::Config(format!("crop {c} must be a multiple of 4 and at least {}", self.ssim.window)));
            }
        }
        if self.windows_per_series == Some(0) {
            return Err(Error::Config("windows_per_series must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Validation SSIM after the most recent `train_epochs` call.
    pub val_ssim: Option<f64>,
    pub best_val_ssim: Option<f64>,
    pub best_params: Vec<Vec<f64>>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// `(epoch, validation SSIM)` per `train_epochs` call.
    pub val_history: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DenoiserModel::new(arch, &mut rng)?;
        let zeros = model.zero_grads();
        Ok(TrainState {
            best_params: model.params.clone(),
            model,
            adam_m: zeros.clone(),
            adam_v: zeros,
            epoch: 0,
            step: 0,
            rng,
            val_ssim: None,
            best_val_ssim: None,
            loss_history: Vec::new(),
            val_history: Vec::new(),
        })
    }

    /// Model carrying the best validation parameters seen so far.
    pub fn best_model(&self) -> DenoiserModel {
        DenoiserModel { arch: self.model.arch, params: self.best_params.clone() }
    }

    fn adam_step(&mut self, grads: &[Vec<f64>], hyper: &TrainHyper) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (((p, g), m), v) in self.model.params.iter_mut().zip(grads).zip(&mut self.adam_m).zip(&mut self.adam_v) {
            for i in 0..p.len() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                p[i] -= hyper.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + hyper.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    series: usize,
    /// First frame of the 5-frame input window (0-indexed).
    start: usize,
    row: usize,
    col: usize,
}

fn draw_samples(rng: &mut ChaCha8Rng, train: &[SeriesPair], hyper: &TrainHyper) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (series, pair) in train.iter().enumerate() {
        let (t, h, w) = pair.gridded.data.dim();
        if t < WINDOW {
            return Err(Error::SeriesTooShort(t));
        }
        let n_windows = t - WINDOW + 1;
        let starts: Vec<usize> = match hyper.windows_per_series {
            Some(n) => (0..n).map(|_| rng.gen_range(0..n_windows)).collect(),
            None => (0..n_windows).collect(),
        };
        for start in starts {
            let (row, col) = match hyper.crop {
                Some(c) if c < h || c < w => {
                    if c > h || c > w {
                        return Err(Error::InvalidDims(format!("crop {c} exceeds frame {h}×{w}")));
                    }
                    (rng.gen_range(0..=h - c), rng.gen_range(0..=w - c))
                }
                _ => (0, 0),
            };
            out.push(Sample { series, start, row, col });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Loss and parameter gradients for one (window, target) pair.
pub fn loss_and_grad(
    model: &DenoiserModel,
    window: ndarray::ArrayView3<f64>,
    target: ndarray::ArrayView2<f64>,
    ssim: &SsimParams,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let rec = record(model, window)?;
    let out = rec.tape.value(rec.output);
    let pred = Array2::from_shape_vec((out.h, out.w), out.data.clone()).expect("single channel");
    let (loss, g) = metrics::ssim_loss(pred.view(), target, ssim)?;
    let mut grads = model.zero_grads();
    let seed = Tensor3::from_vec(1, out.h, out.w, g.into_iter().collect());
    rec.tape.backward(rec.output, seed, &mut grads);
    Ok((loss, grads))
}

fn sample_loss(model: &DenoiserModel, train: &[SeriesPair], s: Sample, hyper: &TrainHyper) -> Result<(f64, Vec<Vec<f64>>)> {
    let pair = &train[s.series];
    let (_, h, w) = pair.gridded.data.dim();
    let (ch, cw) = match hyper.crop {
        Some(c) if c <= h && c <= w => (c, c),
        _ => (h, w),
    };
    let window = pair.gridded.data.slice(s![s.start..s.start + WINDOW, s.row..s.row + ch, s.col..s.col + cw]);
    let target = pair.gt.data.slice(s![s.start + WINDOW - 1, s.row..s.row + ch, s.col..s.col + cw]);
    loss_and_grad(model, window, target, &hyper.ssim)
}

/// Mean validation SSIM: per-series mean over `frames`, then mean across
/// series. Frames before the first full window are skipped.
pub fn validation_ssim(model: &DenoiserModel, val: &[SeriesPair], frames: &[usize]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let per_series = par::try_map_range(val.len(), |i| -> Result<f64> {
        let pair = &val[i];
        let t = pair.gt.n_frames();
        let usable: Vec<usize> = frames.iter().copied().filter(|&f| f >= WINDOW && f <= t).collect();
        if usable.is_empty() {
            return Err(Error::SeriesTooShort(t));
        }
        let mut total = 0.0;
        for &f in &usable {
            let pred = super::forward(model, pair.gridded.data.slice(s![f - WINDOW..f, .., ..]))?;
            total += metrics::ssim(pred.view(), pair.gt.frame(f - 1))?;
        }
        Ok(total / usable.len() as f64)
    })?;
    Ok(per_series.iter().sum::<f64>() / per_series.len() as f64)
}

/// Runs `n_epochs` epochs and recomputes validation SSIM (when `val` is
/// non-empty). Deterministic given the state.
pub fn train_epochs(
    mut state: TrainState,
    train: &[SeriesPair],
    val: &[SeriesPair],
    n_epochs: usize,
    hyper: &TrainHyper,
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if n_epochs == 0 {
        return Err(Error::Config("n_epochs must be at least 1".into()));
    }
    hyper.validate()?;
    for _ in 0..n_epochs {
        let samples = draw_samples(&mut state.rng, train, hyper)?;
        let mut epoch_loss = 0.0;
        for batch in samples.chunks(hyper.batch) {
            let results = par::try_map_range(batch.len(), |k| sample_loss(&state.model, train, batch[k], hyper))?;
            let mut grads = state.model.zero_grads();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: state.epoch + 1 });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            state.adam_step(&grads, hyper);
            if !state.model.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: state.epoch + 1 });
            }
            epoch_loss += batch_loss;
        }
        state.epoch += 1;
        state.loss_history.push(epoch_loss / samples.len() as f64);
    }
    if !val.is_empty() {
        let score = validation_ssim(&state.model, val, &hyper.val_frames)?;
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: state.epoch });
        }
        state.val_ssim = Some(score);
        state.val_history.push((state.epoch, score));
        if state.best_val_ssim.map_or(true, |b| score > b) {
            state.best_val_ssim = Some(score);
            state.best_params = state.model.params.clone();
        }
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_major: u32,
    format_minor: u32,
    arch: Architecture,
    epoch: usize,
    step: u64,
    rng: RngState,
    val_ssim: Option<f64>,
    best_val_ssim: Option<f64>,
    loss_history: Vec<f64>,
    val_history: Vec<(usize, f64)>,
    /// Parameter names in tensor order; the tensor section repeats this list
    /// for weights, Adam first moments, Adam second moments, best weights.
    params: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2).ok_or_else(bad)?, 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl TrainState {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            format_major: CHECKPOINT_MAJOR,
            format_minor: CHECKPOINT_MINOR,
            arch: self.model.arch,
            epoch: self.epoch,
            step: self.step,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            val_ssim: self.val_ssim,
            best_val_ssim: self.best_val_ssim,
            loss_history: self.loss_history.clone(),
            val_history: self.val_history.clone(),
            params: self.model.param_names(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for group in [&self.model.params, &self.adam_m, &self.adam_v, &self.best_params] {
            for p in group {
                Tensor::from_f64(&ndarray::Array1::from_vec(p.clone())).write_to(&mut w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Format(format!("checkpoint header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.format_major != CHECKPOINT_MAJOR {
            return Err(Error::Format(format!(
                "checkpoint format {}.{} is not readable by {CHECKPOINT_MAJOR}.{CHECKPOINT_MINOR}",
                header.format_major, header.format_minor
            )));
        }
        let template = DenoiserModel::seeded(header.arch, 0)?;
        if header.params != template.param_names() {
            return Err(Error::Format("checkpoint parameter list does not match its architecture".into()));
        }
        let mut read_group = || -> Result<Vec<Vec<f64>>> {
            template
                .params
                .iter()
                .map(|expected| {
                    let t = Tensor::read_from(&mut r)?;
                    let v: Vec<f64> = t.to_f64()?.into_iter().collect();
                    if v.len() != expected.len() {
                        return Err(Error::Format(format!("tensor of {} values, expected {}", v.len(), expected.len())));
                    }
                    Ok(v)
                })
                .collect()
        };
        let params = read_group()?;
        let adam_m = read_group()?;
        let adam_v = read_group()?;
        let best_params = read_group()?;
        let mut rng = ChaCha8Rng::from_seed(unhex(&header.rng.seed)?);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(
            header.rng.word_pos.parse().map_err(|_| Error::Format(format!("bad rng position {:?}", header.rng.word_pos)))?,
        );
        Ok(TrainState {
            model: DenoiserModel { arch: header.arch, params },
            adam_m,
            adam_v,
            epoch: header.epoch,
            step: header.step,
            rng,
            val_ssim: header.val_ssim,
            best_val_ssim: header.best_val_ssim,
            best_params,
            loss_history: header.loss_history,
            val_history: header.val_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
