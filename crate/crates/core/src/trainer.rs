//! Training loop: batch assembly, curriculum, stopping rules and evaluation.
//!
//! One iteration draws receivers from the active curriculum blocks, casts
//! every noisy positive DoA and every negative direction as a ray, runs the
//! coarse and fine stages through the shared network and takes one Adam
//! step. Every random draw is keyed by `(seed, stream, iteration, ...)`, so
//! the run is a pure function of dataset, config and seed, and a run resumed
//! from a checkpoint continues exactly where the original would have.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, RunConfig, TrainerConfig};
use crate::dataset::{Dataset, Split};
use crate::network::Mlp;
use crate::optim::{Optimizer, StepOutcome};
use crate::par::Execution;
use crate::pipeline::{self, RayQuery, RenderSettings, TrainingBatch};
use crate::seed::{self, stream};
use crate::synthesis::{self, LossWeights};
use crate::vec3::Vec3;
use crate::{Complex64, Error, Result};

/// Curriculum over consecutive blocks of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub active_blocks: usize,
    pub total_blocks: usize,
    pub last_block_added_at: u64,
}

impl CurriculumState {
    pub fn new(n_train: usize, block_size: usize) -> Self {
        CurriculumState {
            active_blocks: 1,
            total_blocks: n_train.div_ceil(block_size.max(1)).max(1),
            last_block_added_at: 0,
        }
    }

    pub fn complete(&self) -> bool {
        self.active_blocks >= self.total_blocks
    }

    /// Number of training receivers currently eligible, out of `n_train`.
    pub fn active_receivers(&self, n_train: usize, block_size: usize) -> usize {
        (self.active_blocks * block_size).min(n_train)
    }
}

/// Adds one block when validation is below the threshold and enough
/// iterations have passed since the last addition. Never removes blocks.
pub fn curriculum_step(state: CurriculumState, validation_db: f64, iteration: u64, cfg: &TrainerConfig) -> CurriculumState {
    if state.complete() {
        return state;
    }
    let gap = iteration.saturating_sub(state.last_block_added_at);
    if validation_db < cfg.curriculum_threshold_db && gap >= cfg.curriculum_min_gap_iters {
        return CurriculumState {
            active_blocks: state.active_blocks + 1,
            last_block_added_at: iteration,
            ..state
        };
    }
    state
}

/// Validation scores seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationHistory {
    /// `(iteration, mean validation NMSE dB)` in evaluation order.
    pub evals: Vec<(u64, f64)>,
    pub best_db: Option<f64>,
    pub best_iter: u64,
}

impl ValidationHistory {
    /// Records a score; a new best must beat the old one by `eps` dB.
    pub fn record(&mut self, iteration: u64, db: f64, eps: f64) {
        self.evals.push((iteration, db));
        let improved = match self.best_db {
            None => true,
            Some(b) => db < b - eps,
        };
        if improved {
            self.best_db = Some(db);
            self.best_iter = iteration;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    IterationCap,
    Interrupted,
    /// Reached the caller's `stop_at` iteration.
    Paused,
}

/// Convergence test: best validation at or below the gate, stale for the
/// patience window, curriculum complete; or the iteration cap.
pub fn should_stop(
    history: &ValidationHistory,
    curriculum: &CurriculumState,
    iteration: u64,
    cfg: &TrainerConfig,
) -> Option<StopReason> {
    if let Some(best) = history.best_db {
        let stale = iteration.saturating_sub(history.best_iter) >= cfg.convergence_patience_iters;
        if best <= cfg.convergence_db && stale && curriculum.complete() {
            return Some(StopReason::Converged);
        }
    }
    if iteration >= cfg.max_iters {
        return Some(StopReason::IterationCap);
    }
    None
}

/// One assembled iteration batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch {
    /// Dataset indices of the selected receivers, in target order.
    pub receivers: Vec<usize>,
    pub batch: TrainingBatch,
}

/// Selects receivers uniformly (without replacement) from the active
/// blocks and builds their rays. Targets `0..receivers.len()` are the
/// receivers; every negative ray is an extra zero-label target.
pub fn assemble_batch(
    dataset: &Dataset,
    train: &[usize],
    curriculum: &CurriculumState,
    cfg: &TrainerConfig,
    iteration: u64,
) -> Result<AssembledBatch> {
    let pool = curriculum.active_receivers(train.len(), cfg.block_size);
    if pool == 0 {
        return Err(Error::invalid("no training receivers in the active blocks"));
    }
    let mut rng = seed::rng_from(&[cfg.seed, stream::BATCH, iteration]);
    let mut picks = index::sample(&mut rng, pool, cfg.receivers_per_iter.min(pool)).into_vec();
    picks.sort_unstable();
    let receivers: Vec<usize> = picks.iter().map(|&i| train[i]).collect();

    let mut rays = Vec::new();
    let mut ray_target = Vec::new();
    let mut targets: Vec<Complex64> = receivers.iter().map(|&r| dataset.samples[r].cfr).collect();
    let next_seed = |rays: &Vec<RayQuery>| seed::derive_seed(&[cfg.seed, stream::BATCH, iteration, rays.len() as u64]);
    for (t, &r) in receivers.iter().enumerate() {
        let s = &dataset.samples[r];
        for (p, &(theta, phi)) in s.paths.iter().zip(&s.noisy_doas) {
            let seed = next_seed(&rays);
            rays.push(RayQuery {
                origin: s.receiver,
                theta,
                phi,
                zeta: p.zeta,
                seed,
            });
            ray_target.push(t);
        }
    }
    for &r in &receivers {
        let s = &dataset.samples[r];
        for &(theta, phi) in &s.negative_doas {
            let seed = next_seed(&rays);
            rays.push(RayQuery {
                origin: s.receiver,
                theta,
                phi,
                zeta: 1.0,
                seed,
            });
            ray_target.push(targets.len());
            targets.push(Complex64::new(0.0, 0.0));
        }
    }
    Ok(AssembledBatch {
        receivers,
        batch: TrainingBatch {
            rays,
            ray_target,
            targets,
        },
    })
}

/// Rays for a receiver at `origin` along `(θ, φ, ζ)` directions, with the
/// evaluation seeds shared by `evaluate` and prediction.
pub fn receiver_rays(origin: Vec3, doas: &[(f64, f64, f64)], run_seed: u64) -> Vec<RayQuery> {
    doas.iter()
        .enumerate()
        .map(|(k, &(theta, phi, zeta))| RayQuery {
            origin,
            theta,
            phi,
            zeta,
            seed: seed::derive_seed(&[
                run_seed,
                stream::EVAL,
                origin[0].to_bits(),
                origin[1].to_bits(),
                origin[2].to_bits(),
                k as u64,
            ]),
        })
        .collect()
}

/// Per-receiver evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverResult {
    pub index: usize,
    pub receiver: Vec3,
    pub n_rays: usize,
    pub h_true: Complex64,
    pub h_pred: Complex64,
    pub nmse_db: f64,
}

/// Per-ray evaluation detail.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub index: usize,
    pub path: usize,
    pub order: usize,
    pub theta: f64,
    pub phi: f64,
    pub true_distance: f64,
    pub h_true: Complex64,
    pub h_pred: Complex64,
    pub peak_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub mean_db: f64,
    pub p10_db: f64,
    pub median_db: f64,
    pub p90_db: f64,
    /// NMSE of the whole split summed over receivers.
    pub aggregate_db: f64,
    pub receivers: Vec<ReceiverResult>,
    pub paths: Vec<PathResult>,
}

pub const RECEIVERS_CSV_HEADER: &str = "index,x,y,z,n_rays,h_true_re,h_true_im,h_pred_re,h_pred_im,nmse_db";
pub const PATHS_EVAL_CSV_HEADER: &str =
    "index,path,order,theta,phi,true_distance,h_true_re,h_true_im,h_pred_re,h_pred_im,peak_depth";

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "split={} receivers={} mean_db={:.4} p10_db={:.4} median_db={:.4} p90_db={:.4} aggregate_db={:.4}",
            self.split.name(),
            self.receivers.len(),
            self.mean_db,
            self.p10_db,
            self.median_db,
            self.p90_db,
            self.aggregate_db
        )
    }

    pub fn receivers_csv(&self) -> String {
        let mut s = String::from(RECEIVERS_CSV_HEADER);
        s.push('\n');
        for r in &self.receivers {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.index,
                r.receiver[0],
                r.receiver[1],
                r.receiver[2],
                r.n_rays,
                r.h_true.re,
                r.h_true.im,
                r.h_pred.re,
                r.h_pred.im,
                r.nmse_db
            ));
        }
        s
    }

    pub fn paths_csv(&self) -> String {
        let mut s = String::from(PATHS_EVAL_CSV_HEADER);
        s.push('\n');
        for p in &self.paths {
            let peak = p.peak_depth.map(|d| d.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                p.index,
                p.path,
                p.order,
                p.theta,
                p.phi,
                p.true_distance,
                p.h_true.re,
                p.h_true.im,
                p.h_pred.re,
                p.h_pred.im,
                peak
            ));
        }
        s
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fine-stage NMSE of the given receivers under the current parameters.
pub fn evaluate(
    mlp: &Mlp,
    settings: &RenderSettings,
    dataset: &Dataset,
    split: Split,
    indices: &[usize],
    run_seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.name())));
    }
    let mut rays = Vec::new();
    let mut spans = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        let doas: Vec<(f64, f64, f64)> = s
            .paths
            .iter()
            .zip(&s.noisy_doas)
            .map(|(p, &(t, f))| (t, f, p.zeta))
            .collect();
        let start = rays.len();
        rays.extend(receiver_rays(s.receiver, &doas, run_seed));
        spans.push(start..rays.len());
    }
    let renders = pipeline::render_rays(mlp, settings, &rays, exec)?;

    let mut receivers = Vec::with_capacity(indices.len());
    let mut paths = Vec::new();
    let mut preds = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    for (&i, span) in indices.iter().zip(spans) {
        let s = &dataset.samples[i];
        let mut h_pred = Complex64::new(0.0, 0.0);
        for (k, r) in renders[span.clone()].iter().enumerate() {
            h_pred += r.h_fine;
            let p = &s.paths[k];
            paths.push(PathResult {
                index: i,
                path: k,
                order: p.reflection_order(),
                theta: rays[span.start + k].theta,
                phi: rays[span.start + k].phi,
                true_distance: p.distance,
                h_true: p.gain,
                h_pred: r.h_fine,
                peak_depth: r.peak_depth(),
            });
        }
        receivers.push(ReceiverResult {
            index: i,
            receiver: s.receiver,
            n_rays: span.len(),
            h_true: s.cfr,
            h_pred,
            nmse_db: synthesis::nmse_db(&[h_pred], &[s.cfr])?,
        });
        preds.push(h_pred);
        truths.push(s.cfr);
    }
    let mut sorted: Vec<f64> = receivers.iter().map(|r| r.nmse_db).collect();
    let mean_db = sorted.iter().sum::<f64>() / sorted.len() as f64;
    sorted.sort_by(f64::total_cmp);
    Ok(EvalReport {
        split,
        mean_db,
        p10_db: percentile(&sorted, 0.1),
        median_db: percentile(&sorted, 0.5),
        p90_db: percentile(&sorted, 0.9),
        aggregate_db: synthesis::nmse_db(&preds, &truths)?,
        receivers,
        paths,
    })
}

/// One training-log row. `val_db` is present on evaluation iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    /// `None` when the step was skipped for a non-finite loss.
    pub train_loss_db: Option<f64>,
    pub val_db: Option<f64>,
    pub lr: f64,
    pub active_blocks: usize,
    pub wall_time: f64,
}

pub const LOG_CSV_HEADER: &str = "iteration,train_loss_db,val_db,lr,active_blocks,wall_time";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.3}",
            self.iteration,
            opt(self.train_loss_db),
            opt(self.val_db),
            self.lr,
            self.active_blocks,
            self.wall_time
        )
    }

    /// Row content without the wall-clock column.
    pub fn deterministic_part(&self) -> (u64, Option<f64>, Option<f64>, f64, usize) {
        (self.iteration, self.train_loss_db, self.val_db, self.lr, self.active_blocks)
    }
}

/// Log file preamble: a comment line with the ablation flags, then the
/// column header.
pub fn log_csv_preamble(flags: &AblationFlags) -> String {
    format!("# ablation {}\n{LOG_CSV_HEADER}\n", flags.describe())
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub mlp: Mlp,
    pub optimizer: Optimizer,
    pub curriculum: CurriculumState,
    pub history: ValidationHistory,
    pub log: Vec<LogRow>,
    /// Completed iterations.
    pub iteration: u64,
    /// Wall time accumulated by earlier sessions (s).
    pub elapsed: f64,
}

/// Result of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOutcome {
    pub loss: f64,
    pub coarse_nmse: f64,
    pub fine_nmse: f64,
    pub rays: usize,
    pub applied: bool,
}

/// Hooks called by [`Trainer::run`].
pub type LogHook<'a> = dyn FnMut(&LogRow) -> Result<()> + 'a;
pub type CheckpointHook<'a> = dyn FnMut(&Trainer) -> Result<()> + 'a;

#[derive(Default)]
pub struct RunHooks<'a> {
    /// Returns early with [`StopReason::Paused`] once this many iterations
    /// are complete.
    pub stop_at: Option<u64>,
    pub interrupt: Option<&'a AtomicBool>,
    pub on_log: Option<&'a mut LogHook<'a>>,
    /// Called on the checkpoint cadence.
    pub on_checkpoint: Option<&'a mut CheckpointHook<'a>>,
}


pub struct Trainer<'d> {
    pub dataset: &'d Dataset,
    pub config: RunConfig,
    pub settings: RenderSettings,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub exec: Execution,
    pub state: TrainerState,
}

impl<'d> Trainer<'d> {
    /// Fresh trainer with parameters initialized from the run seed.
    pub fn new(dataset: &'d Dataset, config: RunConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let settings = config.render_settings(&dataset.room)?;
        let arch = config.architecture(&settings.encoding);
        let mlp = Mlp::new(arch, config.trainer.seed)?;
        let optimizer = Optimizer::new(
            mlp.param_count(),
            config.trainer.lr,
            config.trainer.adam(),
            config.trainer.plateau(),
        )?;
        let train = dataset.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("dataset has no training receivers"));
        }
        let mut val = dataset.indices(Split::Val);
        if val.is_empty() {
            return Err(Error::invalid("dataset has no validation receivers"));
        }
        if config.trainer.val_receivers > 0 {
            val.truncate(config.trainer.val_receivers);
        }
        let curriculum = CurriculumState::new(train.len(), config.trainer.block_size);
        Ok(Trainer {
            dataset,
            config,
            settings,
            train,
            val,
            exec,
            state: TrainerState {
                mlp,
                optimizer,
                curriculum,
                history: ValidationHistory::default(),
                log: Vec::new(),
                iteration: 0,
                elapsed: 0.0,
            },
        })
    }

    /// Trainer continuing from saved state. The state's architecture must
    /// match the one the config implies for this dataset.
    pub fn with_state(dataset: &'d Dataset, config: RunConfig, state: TrainerState, exec: Execution) -> Result<Self> {
        let mut t = Trainer::new(dataset, config, exec)?;
        if state.mlp.architecture() != t.state.mlp.architecture() {
            return Err(Error::Config(
                "checkpoint architecture does not match the config and dataset".into(),
            ));
        }
        let total = t.state.curriculum.total_blocks;
        t.state = state;
        // A new dataset may have a different block count.
        t.state.curriculum.total_blocks = total;
        t.state.curriculum.active_blocks = t.state.curriculum.active_blocks.clamp(1, total);
        Ok(t)
    }

    pub fn flags(&self) -> AblationFlags {
        self.config.ablation
    }

    pub fn weights(&self) -> LossWeights {
        self.config.trainer.loss_weights()
    }

    pub fn assemble(&self, iteration: u64) -> Result<AssembledBatch> {
        assemble_batch(self.dataset, &self.train, &self.state.curriculum, &self.config.trainer, iteration)
    }

    /// Runs iteration `state.iteration + 1`: loss, gradient and one
    /// optimizer step. A non-finite loss skips the step.
    pub fn train_iteration(&mut self) -> Result<IterationOutcome> {
        let it = self.state.iteration + 1;
        let ab = self.assemble(it)?;
        let bg = pipeline::loss_and_gradient(&self.state.mlp, &self.settings, &ab.batch, self.weights(), self.exec)?;
        let mut applied = false;
        if bg.loss.is_finite() {
            let mut grad = bg.grad;
            let st = &mut self.state;
            applied = matches!(st.optimizer.step(st.mlp.params_mut(), &mut grad)?, StepOutcome::Applied { .. });
        } else {
            self.state.optimizer.skipped_steps += 1;
        }
        self.state.iteration = it;
        Ok(IterationOutcome {
            loss: bg.loss,
            coarse_nmse: bg.coarse_nmse,
            fine_nmse: bg.fine_nmse,
            rays: ab.batch.rays.len(),
            applied,
        })
    }

    pub fn evaluate_split(&self, split: Split, limit: Option<usize>) -> Result<EvalReport> {
        let mut idx = if split == Split::Val {
            self.val.clone()
        } else {
            self.dataset.indices(split)
        };
        if let Some(n) = limit {
            idx.truncate(n);
        }
        evaluate(
            &self.state.mlp,
            &self.settings,
            self.dataset,
            split,
            &idx,
            self.config.trainer.seed,
            self.exec,
        )
    }

    /// Trains until a stop condition. Each completed iteration appends one
    /// log row; validation, scheduler and curriculum updates happen every
    /// `eval_every` iterations.
    pub fn run(&mut self, mut hooks: RunHooks<'_>) -> Result<StopReason> {
        let session = Instant::now();
        let cfg = self.config.trainer.clone();
        loop {
            let it = self.state.iteration;
            if let Some(reason) = should_stop(&self.state.history, &self.state.curriculum, it, &cfg) {
                return Ok(reason);
            }
            if hooks.stop_at.is_some_and(|s| it >= s) {
                return Ok(StopReason::Paused);
            }
            if hooks.interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                return Ok(StopReason::Interrupted);
            }
            let lr = self.state.optimizer.current_lr();
            let out = self.train_iteration()?;
            let it = self.state.iteration;
            let mut val_db = None;
            if it.is_multiple_of(cfg.eval_every) {
                let db = self.evaluate_split(Split::Val, None)?.mean_db;
                self.state.history.record(it, db, cfg.improvement_db);
                self.state.optimizer.observe_validation(db)?;
                self.state.curriculum = curriculum_step(self.state.curriculum, db, it, &cfg);
                val_db = Some(db);
            }
            let row = LogRow {
                iteration: it,
                train_loss_db: out.loss.is_finite().then(|| synthesis::to_db(out.loss)),
                val_db,
                lr,
                active_blocks: self.state.curriculum.active_blocks,
                wall_time: self.state.elapsed + session.elapsed().as_secs_f64(),
            };
            if let Some(f) = hooks.on_log.as_mut() {
                f(&row)?;
            }
            self.state.log.push(row);
            if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every) {
                if let Some(f) = hooks.on_checkpoint.as_mut() {
                    let elapsed = self.state.elapsed;
                    self.state.elapsed += session.elapsed().as_secs_f64();
                    let r = f(self);
                    self.state.elapsed = elapsed;
                    r?;
                }
            }
        }
    }

    /// Wall time at the last completed iteration (s).
    pub fn wall_time(&self) -> f64 {
        self.state.log.last().map(|r| r.wall_time).unwrap_or(self.state.elapsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{builtin_room, generate_dataset, GenerationConfig};

    fn small_config() -> RunConfig {
        let mut c = RunConfig::preset("scene-a").unwrap();
        c.sampler.m = 8;
        c.sampler.fine_m = 8;
        c.model.trunk_layers = 4;
        c.model.trunk_width = 32;
        c.model.feature_width = 16;
        c.model.head_width = 16;
        c.model.skip_at = 2;
        c.trainer.receivers_per_iter = 4;
        c.trainer.eval_every = 5;
        c.trainer.max_iters = 12;
        c.trainer.val_receivers = 3;
        c.trainer.warmup_iters = 2;
        c.trainer.block_size = 10;
        c.trainer.seed = 3;
        c
    }

    fn small_dataset() -> Dataset {
        let room = builtin_room([8.0, 5.0, 3.0], "gypsum", 2.4e9).unwrap();
        let mut g = GenerationConfig {
            n_receivers: 40,
            seed: 5,
            ..GenerationConfig::default()
        };
        g.sample.max_order = 1;
        generate_dataset(&room, [2.0, 1.5, 2.0], &g, Execution::Parallel).unwrap()
    }

    fn tcfg() -> TrainerConfig {
        RunConfig::preset("scene-a").unwrap().trainer
    }

    #[test]
    fn curriculum_rules() {
        let cfg = tcfg();
        let s = CurriculumState::new(9000, 3000);
        assert_eq!((s.active_blocks, s.total_blocks), (1, 3));
        let added = curriculum_step(s, -12.0, 1500, &cfg);
        assert_eq!((added.active_blocks, added.last_block_added_at), (2, 1500));
        assert_eq!(curriculum_step(s, -8.0, 1500, &cfg), s);
        assert_eq!(curriculum_step(added, -12.0, 2000, &cfg), added);
        let full = CurriculumState {
            active_blocks: 3,
            ..s
        };
        assert_eq!(curriculum_step(full, -50.0, 99_999, &cfg), full);
        assert_eq!(CurriculumState::new(10, 3000).total_blocks, 1);
    }

    #[test]
    fn stopping_rules() {
        let cfg = tcfg();
        let done = CurriculumState {
            active_blocks: 1,
            total_blocks: 1,
            last_block_added_at: 0,
        };
        let mut h = ValidationHistory::default();
        for (i, db) in [-1.0, -5.0, -9.0, -15.0].iter().enumerate() {
            h.record((i as u64 + 1) * 100, *db, 0.01);
            assert_eq!(should_stop(&h, &done, (i as u64 + 1) * 100, &cfg), None);
        }
        assert_eq!(should_stop(&h, &done, 400 + 1200, &cfg), Some(StopReason::Converged));
        let partial = CurriculumState {
            total_blocks: 2,
            ..done
        };
        assert_eq!(should_stop(&h, &partial, 1600, &cfg), None);
        let mut weak = ValidationHistory::default();
        weak.record(100, -2.0, 0.01);
        assert_eq!(should_stop(&weak, &done, 5000, &cfg), None);
        assert_eq!(should_stop(&weak, &done, cfg.max_iters, &cfg), Some(StopReason::IterationCap));
        // Improvements smaller than eps do not reset staleness.
        h.record(1000, -15.005, 0.01);
        assert_eq!(h.best_iter, 400);
    }

    #[test]
    fn batch_contents() {
        let ds = small_dataset();
        let cfg = small_config().trainer;
        let train = ds.indices(Split::Train);
        let cur = CurriculumState::new(train.len(), cfg.block_size);
        assert_eq!(cur.total_blocks, 4);
        let a = assemble_batch(&ds, &train, &cur, &cfg, 7).unwrap();
        assert_eq!(a, assemble_batch(&ds, &train, &cur, &cfg, 7).unwrap());
        assert_ne!(a.receivers, assemble_batch(&ds, &train, &cur, &cfg, 8).unwrap().receivers);
        assert_eq!(a.receivers.len(), 4);
        // Only block 0 is active.
        assert!(a.receivers.iter().all(|r| train[..10].contains(r)));
        let n_pos: usize = a.receivers.iter().map(|&r| ds.samples[r].paths.len()).sum();
        let n_neg: usize = a.receivers.iter().map(|&r| ds.samples[r].negative_doas.len()).sum();
        assert_eq!(a.batch.rays.len(), n_pos + n_neg);
        assert_eq!(a.batch.targets.len(), 4 + n_neg);
        assert!(a.batch.targets[4..].iter().all(|t| t.norm() == 0.0));
        for (k, &r) in a.receivers.iter().enumerate() {
            assert_eq!(a.batch.targets[k], ds.samples[r].cfr);
            let rays = a.batch.ray_target.iter().filter(|&&t| t == k).count();
            assert_eq!(rays, ds.samples[r].paths.len());
        }
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.1), 1.4);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }

    #[test]
    fn run_is_deterministic_and_resumable() {
        let ds = small_dataset();
        let cfg = small_config();
        let mut a = Trainer::new(&ds, cfg.clone(), Execution::Parallel).unwrap();
        assert_eq!(a.run(RunHooks::default()).unwrap(), StopReason::IterationCap);
        let mut b = Trainer::new(&ds, cfg.clone(), Execution::Sequential).unwrap();
        let hooks = RunHooks {
            stop_at: Some(5),
            ..RunHooks::default()
        };
        assert_eq!(b.run(hooks).unwrap(), StopReason::Paused);
        let saved = b.state.clone();
        let mut c = Trainer::with_state(&ds, cfg, saved, Execution::Parallel).unwrap();
        c.run(RunHooks::default()).unwrap();
        let key = |t: &Trainer| t.state.log.iter().map(LogRow::deterministic_part).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&c));
        assert_eq!(a.state.mlp.params(), c.state.mlp.params());
        assert_eq!(a.state.log.len(), 12);
        assert!(a.state.log[4].val_db.is_some() && a.state.log[3].val_db.is_none());
    }

    #[test]
    fn evaluation_is_repeatable_and_ordered() {
        let ds = small_dataset();
        let t = Trainer::new(&ds, small_config(), Execution::Parallel).unwrap();
        let r1 = t.evaluate_split(Split::Test, None).unwrap();
        let r2 = t.evaluate_split(Split::Test, None).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.p10_db <= r1.median_db && r1.median_db <= r1.p90_db);
        assert_eq!(r1.receivers.len(), ds.indices(Split::Test).len());
        assert_eq!(r1.receivers_csv().lines().count(), r1.receivers.len() + 1);
        let n_paths: usize = r1.receivers.iter().map(|r| r.n_rays).sum();
        assert_eq!(r1.paths.len(), n_paths);
    }

    #[test]
    fn interrupt_stops_before_next_iteration() {
        let ds = small_dataset();
        let mut t = Trainer::new(&ds, small_config(), Execution::Parallel).unwrap();
        let flag = AtomicBool::new(true);
        let hooks = RunHooks {
            interrupt: Some(&flag),
            ..RunHooks::default()
        };
        assert_eq!(t.run(hooks).unwrap(), StopReason::Interrupted);
        assert_eq!(t.state.iteration, 0);
    }
}
