//! Stage-1 pretraining and stage-2 adaptation loops.
//!
//! Stage 1 matches projector outputs to pad-extended target embeddings and
//! never runs the decoder. Stage 2 feeds projector outputs through the frozen
//! decoder inside the repeat-task context and mixes cross entropy with the
//! stage-1 MSE.
//!
//! Randomness is derived from `(seed, epoch)` for batching and from
//! `(seed, step)` for dropout, so a run resumed from a checkpoint replays the
//! uninterrupted run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbones::{SynthSfm, ToyDecoder};
use crate::checkpoint::Checkpoint;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::losses::{stage1_loss, stage2_loss, LossBreakdown, LossWeights};
use crate::nn::Mode;
use crate::optim::{AdamWConfig, OptimizerState, ScheduleConfig};
use crate::projector::{output_length, ProjectorModel};
use crate::seed;
use crate::targets::{build_target_from_ids, TargetSequence, Vocab, EOS};
use crate::tensor::Tensor;

const DROPOUT_STREAM: u64 = 0xd20f;
const EPOCH_STREAM: u64 = 0xe90c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthPolicy {
    SkipWarn,
    Abort,
}

/// One training sample with its averaged frames and target.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: u64,
    pub token_ids: Vec<u32>,
    pub frames: Tensor,
    pub target: TargetSequence,
}

impl PreparedSample {
    pub fn frame_len(&self) -> usize {
        self.frames.rows()
    }
}

/// Synthesises and averages frames and builds each target at the
/// projector's output length. Returns prepared samples and skipped ids.
pub fn prepare_samples(
    samples: &[Sample],
    vocab: &Vocab,
    sfm: &SynthSfm,
    projector: &crate::projector::ProjectorConfig,
    embed_table: &Tensor,
    policy: LengthPolicy,
) -> Result<(Vec<PreparedSample>, Vec<u64>)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for s in samples {
        let ids = vocab.tokenize(&s.transcript)?;
        let frames = sfm.averaged(&ids, s.id, projector.avg_factor)?;
        let built = output_length(frames.rows(), projector).and_then(|l| build_target_from_ids(&ids, embed_table, l));
        match built {
            Ok(target) => out.push(PreparedSample {
                id: s.id,
                token_ids: ids,
                frames,
                target,
            }),
            Err(e @ (Error::Length(_) | Error::InputLength { .. })) => match policy {
                LengthPolicy::Abort => return Err(Error::Length(format!("sample {}: {e}", s.id))),
                LengthPolicy::SkipWarn => {
                    log::warn!("skipping sample {}: {e}", s.id);
                    skipped.push(s.id);
                }
            },
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

/// Replaces freshly built targets with cached ones where ids match.
pub fn use_cached_targets(samples: &mut [PreparedSample], cached: Vec<(u64, TargetSequence)>) -> Result<usize> {
    let map: std::collections::HashMap<u64, TargetSequence> = cached.into_iter().collect();
    let mut used = 0;
    for s in samples.iter_mut() {
        if let Some(t) = map.get(&s.id) {
            if t.len() != s.target.len() || t.token_ids != s.token_ids {
                return Err(Error::StaleCache(format!("cached target for sample {} does not match", s.id)));
            }
            s.target = t.clone();
            used += 1;
        }
    }
    Ok(used)
}

/// Length-bucketed packing. Indices are shuffled, stably sorted by length,
/// greedily packed while the summed length stays within `cap`, and the
/// resulting batches are shuffled. Every index appears exactly once.
pub fn dynamic_batches<R: Rng + ?Sized>(lengths: &[usize], cap: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if let Some(i) = lengths.iter().position(|&l| l > cap) {
        return Err(Error::Length(format!(
            "sample {i} has {} frames, more than the batch cap {cap}",
            lengths[i]
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut sum = 0;
    for i in order {
        if !cur.is_empty() && sum + lengths[i] > cap {
            batches.push(std::mem::take(&mut cur));
            sum = 0;
        }
        sum += lengths[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Endless epoch-wise batch stream; epoch `e` is a pure function of
/// `(seed, e)`.
struct BatchStream<'a> {
    lengths: &'a [usize],
    cap: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl<'a> BatchStream<'a> {
    fn new(lengths: &'a [usize], cap: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Argument("no training samples".into()));
        }
        let mut s = Self {
            lengths,
            cap,
            seed,
            epoch: 0,
            batches: Vec::new(),
            next: 0,
        };
        s.fill()?;
        Ok(s)
    }

    fn fill(&mut self) -> Result<()> {
        let mut rng = seed::rng(self.seed ^ EPOCH_STREAM, self.epoch);
        self.batches = dynamic_batches(self.lengths, self.cap, &mut rng)?;
        self.next = 0;
        Ok(())
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.fill()?;
        }
        self.next += 1;
        Ok(self.batches[self.next - 1].clone())
    }
}

/// Fixed-size batches over an epoch-wise shuffled order.
struct FixedStream {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    next: usize,
}

impl FixedStream {
    fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("no training samples".into()));
        }
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            next: 0,
        };
        s.fill();
        Ok(s)
    }

    fn fill(&mut self) {
        let mut rng = seed::rng(self.seed ^ EPOCH_STREAM, self.epoch);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.next = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.next == self.n {
                    self.epoch += 1;
                    self.fill();
                }
                self.next += 1;
                self.order[self.next - 1]
            })
            .collect()
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub batch_frames: usize,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        let b = &self.loss;
        format!(
            "step={} lr={} mse_word={} mse_pad={} l_mse={} l_cosine={} l_ce={} total={} batch_frames={} grad_norm={} zero_norm={}",
            self.step,
            self.lr,
            b.mse_word,
            b.mse_pad,
            b.l_mse,
            b.l_cosine,
            b.l_ce,
            b.total,
            self.batch_frames,
            self.grad_norm,
            b.zero_norm
        )
    }
}

pub fn log_text(logs: &[StepLog]) -> String {
    let mut s = String::new();
    for l in logs {
        let _ = writeln!(s, "{}", l.line());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub schedule: ScheduleConfig,
    pub batch_cap: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub mse_scale: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub on_length_mismatch: LengthPolicy,
    pub adamw: AdamWConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            batch_cap: 1024,
            alpha: 5.0,
            gamma: 100.0,
            mse_scale: 1e3,
            clip_norm: 1.0,
            seed: 1,
            checkpoint_every: 1000,
            on_length_mismatch: LengthPolicy::SkipWarn,
            adamw: AdamWConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.gamma, 0.0, self.mse_scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule
            .validate()
            .map_err(|e| Error::config("stage1.schedule", e.to_string()))?;
        self.weights().map_err(|e| Error::config("stage1.alpha", e.to_string()))?;
        if self.batch_cap == 0 {
            return Err(Error::config("stage1.batch_cap", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("stage1.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Where a training loop writes checkpoints, and what it resumes from.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub config_hash: [u8; 32],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub last_checkpoint: Option<PathBuf>,
    pub optimizer: OptimizerState,
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    params: &crate::params::ParamSet,
    opt: &OptimizerState,
    step: u64,
    hash: [u8; 32],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    Checkpoint::capture(params, Some(opt), step, hash).save(&path)?;
    Ok(path)
}

fn attach_checkpoint(e: Error, last: &Option<PathBuf>) -> Error {
    match e {
        Error::Numeric { message, .. } => Error::Numeric {
            message,
            last_checkpoint: last.clone(),
        },
        other => other,
    }
}

/// Stage-1 loop: forward, stage-1 loss, backward, clip, AdamW.
pub fn train_stage1(projector: &mut ProjectorModel, data: &[PreparedSample], cfg: &Stage1Config, run: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let w = cfg.weights()?;
    let lengths: Vec<usize> = data.iter().map(PreparedSample::frame_len).collect();
    let mut stream = BatchStream::new(&lengths, cfg.batch_cap, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.adamw, &projector.params);
    let mut start = 0;
    if let Some(ck) = &run.resume {
        ck.restore(&mut projector.params, Some(&mut opt), Some(&run.config_hash))?;
        start = ck.step;
        for _ in 0..start {
            stream.next_batch()?;
        }
    }
    let mut logs = Vec::new();
    let mut last_checkpoint = None;
    let mut tape = Tape::new();
    for step in start + 1..=cfg.schedule.total_steps {
        let result = (|| -> Result<StepLog> {
            let batch = stream.next_batch()?;
            let mut rng = seed::rng(cfg.seed ^ DROPOUT_STREAM, step);
            let dropout = projector.config.dropout;
            projector.params.zero_grad();
            let mut parts = Vec::with_capacity(batch.len());
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                let s = &data[i];
                tape.reset();
                let x = tape.constant(s.frames.clone())?;
                let mut mode = Mode::Train { rng: &mut rng, dropout };
                let y = projector.forward(&mut tape, x, &mut mode)?;
                let (loss, b) = stage1_loss(&mut tape, y, &s.target, &w)?;
                let scaled = tape.scale(loss, inv)?;
                tape.backward(scaled)?;
                tape.accumulate_into(&mut projector.params);
                parts.push(b);
            }
            let grad_norm = projector.params.clip_grad_norm(cfg.clip_norm);
            let lr = cfg.schedule.lr_at(step)?;
            opt.step(&mut projector.params, lr)?;
            Ok(StepLog {
                step,
                lr,
                loss: LossBreakdown::mean(&parts),
                batch_frames: batch.iter().map(|&i| lengths[i]).sum(),
                grad_norm,
            })
        })();
        let entry = result.map_err(|e| attach_checkpoint(e, &last_checkpoint))?;
        if !entry.loss.total.is_finite() {
            return Err(Error::Numeric {
                message: format!("non-finite loss at step {step}"),
                last_checkpoint,
            });
        }
        log::debug!("{}", entry.line());
        logs.push(entry);
        if let Some(dir) = &run.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                last_checkpoint = Some(save_checkpoint(
                    dir,
                    &format!("stage1-{step:07}.smck"),
                    &projector.params,
                    &opt,
                    step,
                    run.config_hash,
                )?);
            }
        }
    }
    Ok(TrainOutcome {
        logs,
        last_checkpoint,
        optimizer: opt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `(1 − σ)·CE + σ·L_mse`.
    Mixed,
    /// Cross entropy alone; the MSE terms are still computed for logging.
    CeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub steps: u64,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub mse_scale: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub objective: Objective,
    pub adamw: AdamWConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 1000,
            grad_accum: 8,
            batch_size: 12,
            sigma: 0.9,
            alpha: 5.0,
            mse_scale: 1e3,
            clip_norm: 1.0,
            seed: 2,
            checkpoint_every: 500,
            objective: Objective::Mixed,
            adamw: AdamWConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, 0.0, self.sigma, self.mse_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::config("stage2.sigma", format!("{} outside [0, 1]", self.sigma)));
        }
        if !(self.sigma == 0.0 || self.sigma > 0.8) {
            log::warn!(
                "stage2.sigma = {} is neither task-specific (0) nor task-agnostic (> 0.8)",
                self.sigma
            );
        }
        self.weights().map_err(|e| Error::config("stage2.alpha", e.to_string()))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("stage2.lr", "must be finite and >= 0"));
        }
        if self.steps == 0 || self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::config("stage2", "steps, grad_accum and batch_size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("stage2.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Stage-2 loop against a frozen decoder. Each optimizer step accumulates
/// `grad_accum` micro-batches of `batch_size` samples.
pub fn train_stage2(
    projector: &mut ProjectorModel,
    dec: &ToyDecoder,
    data: &[PreparedSample],
    cfg: &Stage2Config,
    run: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !dec.is_frozen() {
        return Err(Error::Contract("stage 2 needs a frozen decoder".into()));
    }
    if dec.d_model() != projector.config.d_out {
        return Err(Error::Dimension(format!(
            "projector emits width {}, decoder embeds at {}",
            projector.config.d_out,
            dec.d_model()
        )));
    }
    let before = dec.checksum();
    let w = cfg.weights()?;
    let schedule = ScheduleConfig::constant(cfg.lr, cfg.steps);
    let mut stream = FixedStream::new(data.len(), cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.adamw, &projector.params);
    let mut start = 0;
    let per_step = cfg.grad_accum * cfg.batch_size;
    if let Some(ck) = &run.resume {
        ck.restore(&mut projector.params, Some(&mut opt), Some(&run.config_hash))?;
        start = ck.step;
        for _ in 0..start {
            stream.take(per_step);
        }
    }
    let inv = 1.0 / per_step as f64;
    let mut logs = Vec::new();
    let mut last_checkpoint = None;
    let mut tape = Tape::new();
    for step in start + 1..=cfg.steps {
        let result = (|| -> Result<StepLog> {
            let mut rng = seed::rng(cfg.seed ^ DROPOUT_STREAM, step);
            let dropout = projector.config.dropout;
            projector.params.zero_grad();
            let mut parts = Vec::with_capacity(per_step);
            let mut frames = 0;
            for _ in 0..cfg.grad_accum {
                for i in stream.take(cfg.batch_size) {
                    let s = &data[i];
                    frames += s.frame_len();
                    tape.reset();
                    let x = tape.constant(s.frames.clone())?;
                    let mut mode = Mode::Train { rng: &mut rng, dropout };
                    let y = projector.forward(&mut tape, x, &mut mode)?;
                    let ctx = dec.context_var(&mut tape, y)?;
                    let mut targets = s.token_ids.clone();
                    targets.push(EOS);
                    let (_, ce) = dec.decoder_forward(&mut tape, ctx, &targets)?;
                    let (total, mut b) = stage2_loss(&mut tape, ce, y, &s.target, &w)?;
                    let objective = match cfg.objective {
                        Objective::Mixed => total,
                        Objective::CeOnly => {
                            b.total = b.l_ce;
                            ce
                        }
                    };
                    let scaled = tape.scale(objective, inv)?;
                    tape.backward(scaled)?;
                    tape.accumulate_into(&mut projector.params);
                    parts.push(b);
                }
            }
            let grad_norm = projector.params.clip_grad_norm(cfg.clip_norm);
            let lr = schedule.lr_at(step)?;
            opt.step(&mut projector.params, lr)?;
            Ok(StepLog {
                step,
                lr,
                loss: LossBreakdown::mean(&parts),
                batch_frames: frames,
                grad_norm,
            })
        })();
        let entry = result.map_err(|e| attach_checkpoint(e, &last_checkpoint))?;
        if !entry.loss.total.is_finite() {
            return Err(Error::Numeric {
                message: format!("non-finite loss at step {step}"),
                last_checkpoint,
            });
        }
        log::debug!("{}", entry.line());
        logs.push(entry);
        if let Some(dir) = &run.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                last_checkpoint = Some(save_checkpoint(
                    dir,
                    &format!("stage2-{step:07}.smck"),
                    &projector.params,
                    &opt,
                    step,
                    run.config_hash,
                )?);
            }
        }
    }
    if dec.checksum() != before {
        return Err(Error::Contract("decoder parameters changed during stage 2".into()));
    }
    Ok(TrainOutcome {
        logs,
        last_checkpoint,
        optimizer: opt,
    })
}

/// Moving average of `f` over the first and last `window` logs.
pub fn ends_average(logs: &[StepLog], window: usize, f: impl Fn(&StepLog) -> f64) -> Option<(f64, f64)> {
    if logs.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(logs.len());
    let avg = |s: &[StepLog]| s.iter().map(&f).sum::<f64>() / s.len() as f64;
    Some((avg(&logs[..w]), avg(&logs[logs.len() - w..])))
}
