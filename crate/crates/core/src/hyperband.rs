//! Joint trajectory/network search with HyperBand.
//!
//! Brackets run synchronous successive halving. Every trial event is appended
//! to a JSON-lines journal (`ledger.json`); a resumed run replays the journal,
//! skips work that is already recorded and continues from the trials' saved
//! training states.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{sliding_window_apply, train_epochs, Architecture, TrainHyper, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_series, FrameMetrics, MetricsReport};
use crate::par;
use crate::phantom::{build_dataset, build_pairs, DatasetSpec};
use crate::trajgen::{
    assemble_trajectory, bounds, generate_interleave, GradientSystem, InterleaveOrdering, SpiralConfig, Trajectory,
    Transition, DEFAULT_T_ACQ_MS,
};

pub const MAX_SAMPLE_RETRIES: usize = 1000;
pub const LEDGER_FILE: &str = "ledger.json";
pub const REPORT_FILE: &str = "search_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub r_inner: (f64, f64),
    pub u_inner: (f64, f64),
    pub rho: (f64, f64),
    pub tr_ms: (f64, f64),
    pub t_acq_ms: f64,
    pub transitions: Vec<Transition>,
    pub orderings: Vec<InterleaveOrdering>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            r_inner: bounds::R_INNER,
            u_inner: bounds::U_INNER,
            rho: bounds::RHO,
            tr_ms: bounds::TR_MS,
            t_acq_ms: DEFAULT_T_ACQ_MS,
            transitions: Transition::ALL.to_vec(),
            orderings: InterleaveOrdering::ALL.to_vec(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a feasible configuration: continuous parameters uniform in range,
/// `r_outer` uniform in `[r_inner, 1 − r_inner]`, categories uniform.
pub fn sample_config(space: &SearchSpace, sys: &GradientSystem, rng: &mut ChaCha8Rng) -> Result<SpiralConfig> {
    if space.transitions.is_empty() || space.orderings.is_empty() {
        return Err(Error::Config("search space needs at least one transition and one ordering".into()));
    }
    for _ in 0..MAX_SAMPLE_RETRIES {
        let r_inner = uniform(rng, space.r_inner);
        let config = SpiralConfig {
            r_inner,
            u_inner: uniform(rng, space.u_inner),
            r_outer: uniform(rng, (r_inner, 1.0 - r_inner)),
            rho: uniform(rng, space.rho),
            transition: space.transitions[rng.gen_range(0..space.transitions.len())],
            ordering: space.orderings[rng.gen_range(0..space.orderings.len())],
            tr_ms: uniform(rng, space.tr_ms),
            t_acq_ms: space.t_acq_ms,
        };
        if config.validate().is_ok() && generate_interleave(&config, sys).is_ok() {
            return Ok(config);
        }
    }
    Err(Error::ExhaustedRetries(MAX_SAMPLE_RETRIES))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBandParams {
    /// Largest per-trial budget, in epochs.
    pub max_epochs: usize,
    pub eta: usize,
    pub seed: u64,
}

impl Default for HyperBandParams {
    fn default() -> Self {
        HyperBandParams { max_epochs: 12, eta: 3, seed: 0 }
    }
}

impl HyperBandParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 || self.eta < 2 {
            return Err(Error::Config(format!(
                "hyperband needs max_epochs >= 1 and eta >= 2, got {} and {}",
                self.max_epochs, self.eta
            )));
        }
        Ok(())
    }

    /// Largest `s` with `eta^s <= max_epochs`.
    pub fn s_max(&self) -> u32 {
        let mut s = 0;
        while (self.eta as u128).pow(s + 1) <= self.max_epochs as u128 {
            s += 1;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n_trials: usize,
    /// Total epochs a trial has trained after this rung.
    pub cumulative_epochs: usize,
    /// Epochs added to each surviving trial in this rung.
    pub incremental_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub n_configs: usize,
    /// Initial per-trial budget `max_epochs / eta^s` before rounding.
    pub r_epochs: f64,
    pub rungs: Vec<Rung>,
}

/// Bracket table. Cumulative budgets are `max(1, round(R / eta^(s−i)))`
/// (halves round up), computed in integers; each rung trains its survivors
/// for the difference to the previous rung's cumulative budget.
pub fn schedule(params: &HyperBandParams) -> Result<Vec<Bracket>> {
    params.validate()?;
    let s_max = params.s_max();
    let (big_r, eta) = (params.max_epochs as u128, params.eta as u128);
    let mut out = Vec::new();
    for s in (0..=s_max).rev() {
        let eta_s = eta.pow(s);
        let n = ((s_max as u128 + 1) * eta_s).div_ceil(s as u128 + 1);
        let mut consumed = 0u128;
        let rungs = (0..=s)
            .map(|i| {
                let div = eta.pow(s - i);
                let cumulative = ((2 * big_r + div) / (2 * div)).max(1);
                let rung = Rung {
                    n_trials: (n / eta.pow(i)) as usize,
                    cumulative_epochs: cumulative as usize,
                    incremental_epochs: (cumulative - consumed) as usize,
                };
                consumed = cumulative;
                rung
            })
            .collect();
        out.push(Bracket { s, n_configs: n as usize, r_epochs: params.max_epochs as f64 / eta_s as f64, rungs });
    }
    Ok(out)
}

pub fn total_epochs(brackets: &[Bracket]) -> usize {
    brackets.iter().flat_map(|b| &b.rungs).map(|r| r.n_trials * r.incremental_epochs).sum()
}

pub fn total_configs(brackets: &[Bracket]) -> usize {
    brackets.iter().map(|b| b.n_configs).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Running,
    Promoted,
    Discarded,
    Failed,
    /// Survived the last rung of its bracket.
    Completed,
}

/// One journal line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum LedgerEvent {
    SearchStarted { params: HyperBandParams, space: SearchSpace, schedule: Vec<Bracket> },
    TrialSampled { trial: usize, bracket: u32, config: SpiralConfig },
    TrialEvaluated {
        trial: usize,
        bracket: u32,
        rung: usize,
        epochs_added: usize,
        epochs_consumed: usize,
        /// `None` marks a failed evaluation (scored as −∞).
        score: Option<f64>,
        error: Option<String>,
    },
    RungCompleted { bracket: u32, rung: usize, promoted: Vec<usize>, discarded: Vec<usize> },
    SearchCompleted { best_trial: usize, best_score: f64 },
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEvent>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// One unit of work handed to a [`TrialEvaluator`].
#[derive(Debug)]
pub struct TrialJob<'a> {
    pub trial: usize,
    pub config: &'a SpiralConfig,
    pub epochs_consumed: usize,
    pub additional_epochs: usize,
    /// Saved state from the previous rung, if any.
    pub prior: Option<&'a Path>,
    /// Where the updated state must be written.
    pub output: &'a Path,
}

/// Trains a configuration further and scores it (higher is better).
pub trait TrialEvaluator: Sync {
    fn evaluate(&self, job: &TrialJob) -> Result<f64>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SearchOptions {
    /// Stop once this many rungs (over the whole search) are complete,
    /// simulating an interruption.
    pub stop_after_rungs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub bracket: u32,
    pub config: SpiralConfig,
    pub epochs_consumed: usize,
    pub latest_score: Option<f64>,
    pub best_score: Option<f64>,
    pub status: TrialStatus,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub params: HyperBandParams,
    pub schedule: Vec<Bracket>,
    pub scheduled_epochs: usize,
    pub consumed_epochs: usize,
    pub n_configs: usize,
    pub best_trial: usize,
    pub best_score: f64,
    pub best_config: SpiralConfig,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchOutcome {
    Completed(SearchReport),
    Interrupted { rungs_completed: usize },
}

/// Progress line for one finished rung.
#[derive(Clone, Debug, PartialEq)]
pub struct RungSummary {
    pub bracket: u32,
    pub rung: usize,
    pub n_trials: usize,
    pub cumulative_epochs: usize,
    pub best_score: Option<f64>,
    pub promoted: Vec<usize>,
    pub replayed: bool,
}

fn trial_dir(dir: &Path, trial: usize) -> PathBuf {
    dir.join("trials").join(format!("{trial:05}"))
}

fn checkpoint_rel(trial: usize) -> String {
    format!("trials/{trial:05}/state.ckpt")
}

fn pending_path(dir: &Path, trial: usize, bracket: u32, rung: usize) -> PathBuf {
    trial_dir(dir, trial).join(format!("state.b{bracket}r{rung}.pending.ckpt"))
}

struct Journal {
    path: PathBuf,
    recorded: Vec<LedgerEvent>,
    cursor: usize,
}

impl Journal {
    /// Next recorded event, if the replay has not caught up yet.
    fn peek(&self) -> Option<&LedgerEvent> {
        self.recorded.get(self.cursor)
    }

    /// Appends `event`, or checks it against the recorded journal.
    fn emit(&mut self, event: LedgerEvent) -> Result<()> {
        if let Some(rec) = self.recorded.get(self.cursor) {
            if *rec != event {
                return Err(Error::Format(format!(
                    "ledger diverges from this run at event {} ({rec:?} vs {event:?})",
                    self.cursor + 1
                )));
            }
            self.cursor += 1;
            return Ok(());
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.recorded.push(event);
        self.cursor += 1;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Trial {
    id: usize,
    bracket: u32,
    config: SpiralConfig,
    epochs: usize,
    latest: Option<f64>,
    best: Option<f64>,
    status: TrialStatus,
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Runs (or resumes) the search recorded in `dir`.
pub fn run_search(
    space: &SearchSpace,
    params: &HyperBandParams,
    sys: &GradientSystem,
    evaluator: &dyn TrialEvaluator,
    dir: &Path,
    options: &SearchOptions,
    progress: &mut dyn FnMut(&RungSummary),
) -> Result<SearchOutcome> {
    let brackets = schedule(params)?;
    fs::create_dir_all(dir.join("trials"))?;
    let ledger_path = dir.join(LEDGER_FILE);
    let mut journal = Journal { recorded: read_ledger(&ledger_path)?, path: ledger_path, cursor: 0 };
    journal.emit(LedgerEvent::SearchStarted { params: *params, space: space.clone(), schedule: brackets.clone() })?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trials: Vec<Trial> = Vec::new();
    let mut rungs_done = 0usize;
    for bracket in &brackets {
        let first = trials.len();
        for k in 0..bracket.n_configs {
            let config = sample_config(space, sys, &mut rng)?;
            let id = first + k;
            journal.emit(LedgerEvent::TrialSampled { trial: id, bracket: bracket.s, config })?;
            fs::create_dir_all(trial_dir(dir, id))?;
            let cfg_path = trial_dir(dir, id).join("config.json");
            if !cfg_path.exists() {
                fs::write(&cfg_path, serde_json::to_string_pretty(&config)?)?;
            }
            trials.push(Trial { id, bracket: bracket.s, config, epochs: 0, latest: None, best: None, status: TrialStatus::Pending });
        }
        let mut alive: Vec<usize> = (first..trials.len()).collect();
        for (ri, rung) in bracket.rungs.iter().enumerate() {
            let replayed = journal.peek().is_some();
            // Work the journal has not seen yet, evaluated concurrently.
            let mut recorded: Vec<Option<LedgerEvent>> = Vec::with_capacity(alive.len());
            for (k, &id) in alive.iter().enumerate() {
                match journal.recorded.get(journal.cursor + k) {
                    Some(ev @ LedgerEvent::TrialEvaluated { trial, rung, .. }) if *trial == id && *rung == ri => {
                        recorded.push(Some(ev.clone()))
                    }
                    _ => break,
                }
            }
            let todo: Vec<usize> = alive[recorded.len()..].to_vec();
            for &id in &todo {
                trials[id].status = TrialStatus::Running;
            }
            let fresh = par::map_range(todo.len(), |k| {
                let t = &trials[todo[k]];
                let prior = trial_dir(dir, t.id).join("state.ckpt");
                let output = pending_path(dir, t.id, bracket.s, ri);
                let job = TrialJob {
                    trial: t.id,
                    config: &t.config,
                    epochs_consumed: t.epochs,
                    additional_epochs: rung.incremental_epochs,
                    prior: (t.epochs > 0).then_some(prior.as_path()),
                    output: &output,
                };
                match evaluator.evaluate(&job) {
                    Ok(score) if score.is_finite() => (Some(score), None),
                    Ok(score) => (None, Some(format!("non-finite score {score}"))),
                    Err(e) => (None, Some(format!("{} {e}", e.code()))),
                }
            });
            let mut events: Vec<LedgerEvent> = recorded.into_iter().flatten().collect();
            for (&id, (score, error)) in todo.iter().zip(fresh) {
                events.push(LedgerEvent::TrialEvaluated {
                    trial: id,
                    bracket: bracket.s,
                    rung: ri,
                    epochs_added: rung.incremental_epochs,
                    epochs_consumed: trials[id].epochs + rung.incremental_epochs,
                    score,
                    error,
                });
            }
            for ev in events {
                let LedgerEvent::TrialEvaluated { trial, score, epochs_consumed, .. } = &ev else { unreachable!() };
                let (id, score, consumed) = (*trial, *score, *epochs_consumed);
                journal.emit(ev)?;
                let pending = pending_path(dir, id, bracket.s, ri);
                if pending.exists() {
                    if score.is_some() {
                        fs::rename(&pending, trial_dir(dir, id).join("state.ckpt"))?;
                    } else {
                        fs::remove_file(&pending)?;
                    }
                }
                let t = &mut trials[id];
                t.epochs = consumed;
                t.latest = score;
                if let Some(s) = score {
                    t.best = Some(t.best.map_or(s, |b: f64| b.max(s)));
                } else {
                    t.status = TrialStatus::Failed;
                }
            }

            // Successive halving: survivors ranked by score, ties to the lower id.
            let keep = bracket.rungs.get(ri + 1).map_or(alive.len(), |r| r.n_trials);
            let mut ranked: Vec<usize> = alive.iter().copied().filter(|&id| trials[id].latest.is_some()).collect();
            ranked.sort_by(|&a, &b| {
                let (sa, sb) = (trials[a].latest.unwrap(), trials[b].latest.unwrap());
                sb.total_cmp(&sa).then(a.cmp(&b))
            });
            let last = ri + 1 == bracket.rungs.len();
            let promoted: Vec<usize> = if last { Vec::new() } else { ranked.iter().copied().take(keep).collect() };
            let discarded: Vec<usize> = if last {
                Vec::new()
            } else {
                alive.iter().copied().filter(|id| !promoted.contains(id)).collect()
            };
            journal.emit(LedgerEvent::RungCompleted {
                bracket: bracket.s,
                rung: ri,
                promoted: promoted.clone(),
                discarded: discarded.clone(),
            })?;
            for &id in &alive {
                if trials[id].status != TrialStatus::Failed {
                    trials[id].status = if last {
                        TrialStatus::Completed
                    } else if promoted.contains(&id) {
                        TrialStatus::Promoted
                    } else {
                        TrialStatus::Discarded
                    };
                }
            }
            rungs_done += 1;
            progress(&RungSummary {
                bracket: bracket.s,
                rung: ri,
                n_trials: alive.len(),
                cumulative_epochs: rung.cumulative_epochs,
                best_score: ranked.first().and_then(|&id| trials[id].latest),
                promoted: promoted.clone(),
                replayed,
            });
            if last {
                break;
            }
            alive = promoted;
            if alive.is_empty() {
                break;
            }
            if options.stop_after_rungs.is_some_and(|n| rungs_done >= n) {
                return Ok(SearchOutcome::Interrupted { rungs_completed: rungs_done });
            }
        }
        if options.stop_after_rungs.is_some_and(|n| rungs_done >= n) && bracket.s != 0 {
            return Ok(SearchOutcome::Interrupted { rungs_completed: rungs_done });
        }
    }

    let mut best: Option<(f64, usize)> = None;
    for t in &trials {
        if let Some(s) = t.best {
            if best.map_or(true, |b| better((s, t.id), b)) {
                best = Some((s, t.id));
            }
        }
    }
    let (best_score, best_trial) = best.ok_or_else(|| Error::EvaluatorFailure("every trial failed".into()))?;
    journal.emit(LedgerEvent::SearchCompleted { best_trial, best_score })?;
    let consumed_epochs = trials.iter().map(|t| t.epochs).sum();
    let report = SearchReport {
        params: *params,
        scheduled_epochs: total_epochs(&brackets),
        n_configs: total_configs(&brackets),
        schedule: brackets,
        consumed_epochs,
        best_trial,
        best_score,
        best_config: trials[best_trial].config,
        trials: trials
            .iter()
            .map(|t| TrialRecord {
                trial: t.id,
                bracket: t.bracket,
                config: t.config,
                epochs_consumed: t.epochs,
                latest_score: t.latest,
                best_score: t.best,
                status: t.status,
                checkpoint: checkpoint_rel(t.id),
            })
            .collect(),
    };
    fs::create_dir_all(dir.join("best"))?;
    let pointer = serde_json::json!({
        "trial": best_trial,
        "score": best_score,
        "config": format!("trials/{best_trial:05}/config.json"),
        "checkpoint": checkpoint_rel(best_trial),
    });
    fs::write(dir.join("best").join("pointer.json"), serde_json::to_string_pretty(&pointer)?)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(SearchOutcome::Completed(report))
}

/// Trains the denoiser on the search subset for one trial and returns its
/// validation SSIM.
#[derive(Clone, Debug)]
pub struct SpiralEvaluator {
    pub dataset: DatasetSpec,
    pub system: GradientSystem,
    pub arch: Architecture,
    pub hyper: TrainHyper,
    pub model_seed: u64,
}

impl TrialEvaluator for SpiralEvaluator {
    fn evaluate(&self, job: &TrialJob) -> Result<f64> {
        let traj = assemble_trajectory(job.config, &self.system, self.dataset.n_frames)?;
        let split = self.dataset.search_split()?;
        let train = build_pairs(&self.dataset, &split.train, &traj)?;
        let val = build_pairs(&self.dataset, &split.val, &traj)?;
        let state = match job.prior {
            Some(p) => TrainState::load(p)?,
            None => TrainState::new(self.arch, self.model_seed ^ job.trial as u64)?,
        };
        if state.epoch != job.epochs_consumed {
            return Err(Error::Format(format!(
                "trial {} checkpoint holds {} epochs, ledger says {}",
                job.trial, state.epoch, job.epochs_consumed
            )));
        }
        let state = train_epochs(state, &train, &val, job.additional_epochs, &self.hyper)?;
        state.save(job.output)?;
        state.val_ssim.ok_or(Error::EmptySplit("validation"))
    }
}

/// Final retraining budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinalizeOptions {
    pub epochs: usize,
    /// Validation (and best-weight selection) interval in epochs.
    pub val_every: usize,
    /// 1-indexed frames scored on the test set.
    pub metric_frames: Vec<usize>,
    pub model_seed: u64,
}

impl Default for FinalizeOptions {
    fn default() -> Self {
        FinalizeOptions { epochs: 30, val_every: 5, metric_frames: vec![5, 6, 7, 8, 9], model_seed: 0 }
    }
}

pub struct FinalRun {
    pub state: TrainState,
    pub report: MetricsReport,
}

/// Retrains from scratch on the full 75/10/15 split with `traj`, keeps the
/// best-validation weights and scores them on the untouched test series.
pub fn finalize(
    traj: &Trajectory,
    dataset: &DatasetSpec,
    arch: Architecture,
    hyper: &TrainHyper,
    options: &FinalizeOptions,
) -> Result<FinalRun> {
    if options.epochs == 0 || options.val_every == 0 {
        return Err(Error::Config("finalize needs epochs >= 1 and val_every >= 1".into()));
    }
    let split = dataset.final_split()?;
    let data = build_dataset(dataset, &split, traj)?;
    let mut state = TrainState::new(arch, options.model_seed)?;
    while state.epoch < options.epochs {
        let n = options.val_every.min(options.epochs - state.epoch);
        state = train_epochs(state, &data.train, &data.val, n, hyper)?;
    }
    let model = state.best_model();
    let rows = par::try_map_range(data.test.len(), |k| -> Result<Vec<FrameMetrics>> {
        let pair = &data.test[k];
        let recon = sliding_window_apply(&model, &pair.gridded)?;
        evaluate_series(pair.id, &pair.gt, &recon, &options.metric_frames)
    })?;
    Ok(FinalRun { state, report: MetricsReport::from_rows(rows.into_iter().flatten().collect()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct transcription of the bracket formulas with floating-point
    /// budgets, used as the oracle for the integer implementation.
    fn oracle(r: usize, eta: usize) -> (Vec<(usize, Vec<usize>, Vec<usize>)>, usize) {
        let s_max = ((r as f64).ln() / (eta as f64).ln() + 1e-9).floor() as i32;
        let b = (s_max + 1) as f64 * r as f64;
        let mut out = Vec::new();
        let mut total = 0;
        for s in (0..=s_max).rev() {
            let n = (b / r as f64 * (eta as f64).powi(s) / (s + 1) as f64 - 1e-9).ceil() as usize;
            let r0 = r as f64 * (eta as f64).powi(-s);
            let mut ns = Vec::new();
            let mut rs = Vec::new();
            let mut prev = 0;
            for i in 0..=s {
                let n_i = (n as f64 / (eta as f64).powi(i) + 1e-9).floor() as usize;
                let r_i = ((r0 * (eta as f64).powi(i) + 1e-9).round() as usize).max(1);
                total += n_i * (r_i - prev);
                prev = r_i;
                ns.push(n_i);
                rs.push(r_i);
            }
            out.push((n, ns, rs));
        }
        (out, total)
    }

    #[test]
    fn schedules_match_the_formula_oracle() {
        for (r, eta) in [(1, 5), (27, 3), (81, 3), (150, 5), (12, 3), (10, 2)] {
            let params = HyperBandParams { max_epochs: r, eta, seed: 0 };
            let table = schedule(&params).unwrap();
            let (expected, total) = oracle(r, eta);
            assert_eq!(table.len(), expected.len());
            for (b, (n, ns, rs)) in table.iter().zip(&expected) {
                assert_eq!(b.n_configs, *n);
                assert_eq!(b.rungs.iter().map(|x| x.n_trials).collect::<Vec<_>>(), *ns);
                assert_eq!(b.rungs.iter().map(|x| x.cumulative_epochs).collect::<Vec<_>>(), *rs);
            }
            assert_eq!(total_epochs(&table), total, "R={r} eta={eta}");
        }
    }

    #[test]
    fn known_schedules() {
        let one = schedule(&HyperBandParams { max_epochs: 1, eta: 5, seed: 0 }).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].n_configs, one[0].rungs[0].cumulative_epochs), (1, 1));

        let t = schedule(&HyperBandParams { max_epochs: 27, eta: 3, seed: 0 }).unwrap();
        assert_eq!(t.iter().map(|b| b.n_configs).collect::<Vec<_>>(), vec![27, 12, 6, 4]);
        assert_eq!(t.iter().map(|b| b.rungs[0].cumulative_epochs).collect::<Vec<_>>(), vec![1, 3, 9, 27]);

        let p = schedule(&HyperBandParams { max_epochs: 150, eta: 5, seed: 0 }).unwrap();
        assert_eq!(p.iter().map(|b| b.n_configs).collect::<Vec<_>>(), vec![125, 34, 10, 4]);
        assert_eq!(total_configs(&p), 173);
        assert_eq!(total_epochs(&p), 2098);
        // The widest bracket: 125 trials at round(1.2)=1 epoch, 25 at 6, 5 at 30, 1 at 150.
        let cum: Vec<usize> = p[0].rungs.iter().map(|r| r.cumulative_epochs).collect();
        assert_eq!(cum, vec![1, 6, 30, 150]);

        let d = schedule(&HyperBandParams::default()).unwrap();
        assert_eq!(total_epochs(&d), 90);
        assert!(schedule(&HyperBandParams { max_epochs: 0, eta: 3, seed: 0 }).is_err());
        assert!(schedule(&HyperBandParams { max_epochs: 9, eta: 1, seed: 0 }).is_err());
    }

    #[test]
    fn sampling_respects_bounds() {
        let space = SearchSpace::default();
        let sys = GradientSystem::desk(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut again = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = sample_config(&space, &sys, &mut rng).unwrap();
            c.validate().unwrap();
            assert!(c.r_outer >= c.r_inner && c.r_outer <= 1.0 - c.r_inner);
            assert!(c.tr_ms >= 2.88 && c.tr_ms <= 3.7 && c.t_acq_ms == 55.0);
            assert_eq!(c, sample_config(&space, &sys, &mut again).unwrap());
        }
    }

    #[test]
    fn infeasible_space_exhausts_retries() {
        let space = SearchSpace { tr_ms: (0.5, 0.9), ..Default::default() };
        let r = sample_config(&space, &GradientSystem::desk(64), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::ExhaustedRetries(_))));
    }

    /// Score depends only on the configuration; trial states are epoch counters.
    struct Mock {
        fail_every: Option<usize>,
    }

    fn mock_score(c: &SpiralConfig) -> f64 {
        -((c.r_inner - 0.2).powi(2) + (c.u_inner - 16.0).powi(2) / 100.0 + (c.rho - 0.1).powi(2) + (c.tr_ms - 3.3).powi(2))
    }

    impl TrialEvaluator for Mock {
        fn evaluate(&self, job: &TrialJob) -> Result<f64> {
            if self.fail_every.is_some_and(|k| job.trial % k == 0) {
                return Err(Error::EvaluatorFailure(format!("trial {} refused", job.trial)));
            }
            let before: usize = match job.prior {
                Some(p) => fs::read_to_string(p)?.trim().parse().unwrap(),
                None => 0,
            };
            assert_eq!(before, job.epochs_consumed);
            fs::write(job.output, (before + job.additional_epochs).to_string())?;
            Ok(mock_score(job.config))
        }
    }

    fn run(dir: &Path, params: &HyperBandParams, mock: &Mock, stop: Option<usize>) -> SearchOutcome {
        let opts = SearchOptions { stop_after_rungs: stop };
        run_search(&SearchSpace::default(), params, &GradientSystem::desk(64), mock, dir, &opts, &mut |_| {}).unwrap()
    }

    #[test]
    fn mock_search_finds_the_ledger_argmax_and_accounts_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let params = HyperBandParams { max_epochs: 27, eta: 3, seed: 5 };
        let SearchOutcome::Completed(report) = run(dir.path(), &params, &Mock { fail_every: None }, None) else {
            panic!("search did not complete")
        };
        let events = read_ledger(&dir.path().join(LEDGER_FILE)).unwrap();
        let mut best: Option<(f64, usize)> = None;
        let mut added = 0;
        for ev in &events {
            match ev {
                LedgerEvent::TrialSampled { trial, config, .. } => {
                    let s = mock_score(config);
                    if best.map_or(true, |b| better((s, *trial), b)) {
                        best = Some((s, *trial));
                    }
                }
                LedgerEvent::TrialEvaluated { epochs_added, .. } => added += epochs_added,
                LedgerEvent::RungCompleted { promoted, discarded, .. } => {
                    let worst_kept = promoted.iter().map(|&t| mock_score(&report.trials[t].config)).fold(f64::INFINITY, f64::min);
                    for &d in discarded {
                        assert!(mock_score(&report.trials[d].config) <= worst_kept);
                    }
                }
                _ => {}
            }
        }
        assert_eq!(best.unwrap().1, report.best_trial);
        assert_eq!(added, total_epochs(&report.schedule));
        assert_eq!(report.consumed_epochs, report.scheduled_epochs);
        // Survivors of each bracket hold the full budget.
        for t in report.trials.iter().filter(|t| t.status == TrialStatus::Completed) {
            assert_eq!(t.epochs_consumed, 27);
            let saved: usize = fs::read_to_string(dir.path().join(&t.checkpoint)).unwrap().parse().unwrap();
            assert_eq!(saved, 27);
        }
        let pointer: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("best/pointer.json")).unwrap()).unwrap();
        assert_eq!(pointer["trial"], report.best_trial);
    }

    #[test]
    fn interrupt_and_resume_at_every_rung_reproduces_the_report() {
        let params = HyperBandParams { max_epochs: 9, eta: 3, seed: 2 };
        let mock = Mock { fail_every: Some(7) };
        let straight = tempfile::tempdir().unwrap();
        run(straight.path(), &params, &mock, None);
        let report = fs::read(straight.path().join(REPORT_FILE)).unwrap();
        let ledger = fs::read(straight.path().join(LEDGER_FILE)).unwrap();
        let n_rungs: usize = schedule(&params).unwrap().iter().map(|b| b.rungs.len()).sum();
        for stop in 1..n_rungs {
            let dir = tempfile::tempdir().unwrap();
            assert!(matches!(run(dir.path(), &params, &mock, Some(stop)), SearchOutcome::Interrupted { .. }));
            assert!(!dir.path().join(REPORT_FILE).exists());
            run(dir.path(), &params, &mock, None);
            assert_eq!(fs::read(dir.path().join(REPORT_FILE)).unwrap(), report, "stop after {stop}");
            assert_eq!(fs::read(dir.path().join(LEDGER_FILE)).unwrap(), ledger);
        }
    }

    #[test]
    fn failed_trials_are_never_promoted() {
        let dir = tempfile::tempdir().unwrap();
        let params = HyperBandParams { max_epochs: 27, eta: 3, seed: 8 };
        let SearchOutcome::Completed(report) = run(dir.path(), &params, &Mock { fail_every: Some(3) }, None) else {
            panic!()
        };
        for ev in read_ledger(&dir.path().join(LEDGER_FILE)).unwrap() {
            if let LedgerEvent::RungCompleted { promoted, .. } = ev {
                assert!(promoted.iter().all(|t| t % 3 != 0));
            }
        }
        assert!(report.trials.iter().filter(|t| t.trial % 3 == 0).all(|t| t.status == TrialStatus::Failed));
        assert_ne!(report.best_trial % 3, 0);
    }

    #[test]
    fn single_rung_reduces_to_random_search() {
        let dir = tempfile::tempdir().unwrap();
        let params = HyperBandParams { max_epochs: 4, eta: 100, seed: 1 };
        let SearchOutcome::Completed(report) = run(dir.path(), &params, &Mock { fail_every: None }, None) else {
            panic!()
        };
        assert_eq!(report.schedule.len(), 1);
        let best = report.trials.iter().map(|t| mock_score(&t.config)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_score, best);
    }

    #[test]
    fn resume_rejects_a_different_search() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Mock { fail_every: None };
        run(dir.path(), &HyperBandParams { max_epochs: 3, eta: 3, seed: 1 }, &mock, Some(1));
        let r = run_search(
            &SearchSpace::default(),
            &HyperBandParams { max_epochs: 3, eta: 3, seed: 2 },
            &GradientSystem::desk(64),
            &mock,
            dir.path(),
            &SearchOptions::default(),
            &mut |_| {},
        );
        assert!(matches!(r, Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn schedule_invariants(r in 1usize..400, eta in 2usize..7) {
            let table = schedule(&HyperBandParams { max_epochs: r, eta, seed: 0 }).unwrap();
            for b in &table {
                prop_assert_eq!(b.rungs.last().unwrap().cumulative_epochs, r);
                for w in b.rungs.windows(2) {
                    prop_assert_eq!(w[1].n_trials, w[0].n_trials / eta);
                    prop_assert!(w[1].cumulative_epochs >= w[0].cumulative_epochs);
                    prop_assert!(w[1].n_trials >= 1);
                }
                prop_assert!(b.rungs[0].cumulative_epochs >= 1);
            }
        }
    }
}
