//! AdamW optimization, stage-specific learning-rate schedules, and the
//! stage runner that carries checkpoints through the pretrain, midtrain
//! and finetune chain.

pub mod checkpoint;

pub use checkpoint::Checkpoint;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::denoise::{corrupt, DenoiseError};
use crate::model::{nll, ModelError};
use crate::rng;
use crate::tensor::{Tape, TensorError};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage expects {expected} data but received {got}")]
    ObjectiveMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("training dataset is empty (or smaller than one batch)")]
    EmptyDataset,
    #[error("bad stage config: {0}")]
    BadStage(String),
    #[error("schedule step {step} beyond total steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("optimizer state length {state} does not match parameter length {param}")]
    MomentShape { state: usize, param: usize },
    #[error("checkpoint format error at byte {offset}: {reason}")]
    CheckpointFormat { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretrain,
    Midtrain,
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Midtrain => "midtrain",
            StageKind::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        match self {
            StageKind::Pretrain => 1,
            StageKind::Midtrain => 2,
            StageKind::Finetune => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Denoise,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Warmup {
    /// Fraction of total steps, rounded.
    Fraction(f64),
    Steps(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    /// Linear from max_lr down to min_lr at the final step.
    AnnealToMin,
    /// Linear from max_lr down to zero at the final step.
    LinearToZero,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(u32),
    Steps(u64),
}

/// Convergence-based stopping: evaluated on a held-out set every
/// `eval_every` steps, stopping after `patience` evaluations without an
/// improvement larger than `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub eval_every: u64,
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            eval_every: 50,
            patience: 3,
            min_delta: 1e-3,
        }
    }
}

/// One training stage's optimizer, schedule, batch and truncation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub kind: StageKind,
    pub objective: Objective,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup: Warmup,
    pub decay: Decay,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub budget: Budget,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Span corruption settings; only read by the denoise objective.
    pub corruption_rate: f64,
    pub corruption_mean_span: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip, when set.
    pub clip_norm: Option<f64>,
    pub early_stop: Option<EarlyStop>,
}

impl StageConfig {
    /// Reference pretrain settings: peak 1e-4 annealing to 1e-5 with a
    /// warmup of 0.01 of total steps, weight decay 0.01.
    pub fn pretrain_reference(seed: u64) -> Self {
        StageConfig {
            kind: StageKind::Pretrain,
            objective: Objective::Denoise,
            max_lr: 1e-4,
            min_lr: 1e-5,
            warmup: Warmup::Fraction(0.01),
            decay: Decay::AnnealToMin,
            weight_decay: 0.01,
            batch_size: 16,
            budget: Budget::Epochs(1),
            max_src_len: 512,
            max_tgt_len: 512,
            corruption_rate: 0.15,
            corruption_mean_span: 3.0,
            seed,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: Some(1.0),
            early_stop: None,
        }
    }

    /// Reference midtrain settings: conservative peak 1e-6, 200 warmup
    /// steps, linear decay, global batch 16, two epochs.
    pub fn midtrain_reference(seed: u64) -> Self {
        StageConfig {
            kind: StageKind::Midtrain,
            objective: Objective::Denoise,
            max_lr: 1e-6,
            min_lr: 0.0,
            warmup: Warmup::Steps(200),
            decay: Decay::LinearToZero,
            weight_decay: 0.01,
            batch_size: 16,
            budget: Budget::Epochs(2),
            max_src_len: 512,
            max_tgt_len: 512,
            corruption_rate: 0.15,
            corruption_mean_span: 3.0,
            seed,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: Some(1.0),
            early_stop: None,
        }
    }

    /// Reference finetune settings: constant 5e-5, batch 16, inputs
    /// truncated to 512 and targets to 128 tokens.
    pub fn finetune_reference(seed: u64) -> Self {
        StageConfig {
            kind: StageKind::Finetune,
            objective: Objective::Supervised,
            max_lr: 5e-5,
            min_lr: 5e-5,
            warmup: Warmup::Steps(0),
            decay: Decay::Constant,
            weight_decay: 0.01,
            batch_size: 16,
            budget: Budget::Epochs(1),
            max_src_len: 512,
            max_tgt_len: 128,
            corruption_rate: 0.0,
            corruption_mean_span: 1.0,
            seed,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: Some(1.0),
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.min_lr > self.max_lr {
            return Err(TrainError::BadStage(format!(
                "min_lr {} above max_lr {}",
                self.min_lr, self.max_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadStage("batch_size is zero".into()));
        }
        if self.max_src_len > 512 {
            return Err(TrainError::BadStage(format!(
                "max_src_len {} exceeds the 512-token ceiling",
                self.max_src_len
            )));
        }
        if self.objective == Objective::Denoise {
            if !(0.0..1.0).contains(&self.corruption_rate) || self.corruption_rate == 0.0 {
                return Err(TrainError::BadStage(format!(
                    "denoise stage needs corruption rate in (0, 1), got {}",
                    self.corruption_rate
                )));
            }
            if self.corruption_mean_span < 1.0 {
                return Err(TrainError::BadStage(format!(
                    "mean span {} below 1",
                    self.corruption_mean_span
                )));
            }
        }
        Ok(())
    }

    fn warmup_steps(&self, total: u64) -> u64 {
        match self.warmup {
            Warmup::Fraction(f) => ((total as f64) * f).round() as u64,
            Warmup::Steps(s) => s,
        }
        .min(total)
    }
}

/// Learning rate at a step: linear warmup from zero to max_lr over the
/// warmup interval, then the configured decay. Warmup end and final step
/// hit their anchors exactly.
pub fn lr_at(cfg: &StageConfig, step: u64, total_steps: u64) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let w = cfg.warmup_steps(total_steps);
    if step < w {
        return Ok(cfg.max_lr * step as f64 / w as f64);
    }
    if step == w {
        return Ok(cfg.max_lr);
    }
    Ok(match cfg.decay {
        Decay::Constant => cfg.max_lr,
        Decay::AnnealToMin => {
            if step == total_steps {
                cfg.min_lr
            } else {
                let t = (step - w) as f64 / (total_steps - w) as f64;
                cfg.max_lr + t * (cfg.min_lr - cfg.max_lr)
            }
        }
        Decay::LinearToZero => {
            let t = (step - w) as f64 / (total_steps - w) as f64;
            cfg.max_lr * (1.0 - t)
        }
    })
}

/// Decoupled-weight-decay update with bias-corrected moments. `t` is the
/// 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(TrainError::MomentShape {
            state: grad.len().min(m.len()).min(v.len()),
            param: param.len(),
        });
    }
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = param[i] as f64;
        param[i] = (p - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p)) as f32;
    }
    Ok(())
}

/// Dataset for one stage: raw sequences for the denoising objective or
/// findings/impression token pairs for the supervised objective.
#[derive(Debug, Clone)]
pub enum StageData {
    Denoise(Vec<Vec<u32>>),
    Supervised(Vec<(Vec<u32>, Vec<u32>)>),
}

impl StageData {
    pub fn len(&self) -> usize {
        match self {
            StageData::Denoise(v) => v.len(),
            StageData::Supervised(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn objective(&self) -> Objective {
        match self {
            StageData::Denoise(_) => Objective::Denoise,
            StageData::Supervised(_) => Objective::Supervised,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Renders a training log as CSV `step,lr,loss`.
pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for entry in log {
        out.push_str(&format!("{},{:e},{:.6}\n", entry.step, entry.lr, entry.loss));
    }
    out
}

/// One (src, tgt) token pair ready for the model.
fn materialize(
    data: &StageData,
    idx: usize,
    cfg: &StageConfig,
    vocab: &Vocabulary,
    epoch: u64,
) -> Result<(Vec<u32>, Vec<u32>), TrainError> {
    match data {
        StageData::Denoise(seqs) => {
            let mut seq = seqs[idx].clone();
            seq.truncate(cfg.max_src_len);
            let mut rng = rng::stream(&[cfg.seed, cfg.kind.tag(), epoch, idx as u64]);
            let ex = corrupt(
                &seq,
                cfg.corruption_rate,
                cfg.corruption_mean_span,
                vocab,
                &mut rng,
            )?;
            // nll appends eos itself.
            let mut tgt = ex.target_ids;
            tgt.pop();
            tgt.truncate(cfg.max_tgt_len);
            Ok((ex.input_ids, tgt))
        }
        StageData::Supervised(pairs) => {
            let (src, tgt) = &pairs[idx];
            let mut src = src.clone();
            let mut tgt = tgt.clone();
            src.truncate(cfg.max_src_len);
            tgt.truncate(cfg.max_tgt_len);
            Ok((src, tgt))
        }
    }
}

/// Mean NLL over a dataset without touching gradients; drives early
/// stopping.
pub fn eval_loss(
    params: &crate::model::ModelParams,
    data: &StageData,
    cfg: &StageConfig,
    vocab: &Vocabulary,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let losses: Vec<Result<f64, TrainError>> = (0..data.len())
        .into_par_iter()
        .map(|idx| {
            // Fixed epoch key so evaluation corruption is stable.
            let (src, tgt) = materialize(data, idx, cfg, vocab, u64::MAX)?;
            let mut tape = Tape::new();
            let (loss, _) = nll(&mut tape, params, &src, &tgt)?;
            Ok(tape.scalar_value(loss))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

/// Runs one training stage from a checkpoint. Deterministic given
/// (start, cfg, data): batches come from a fixed-order seeded shuffle per
/// epoch with drop-last, per-example gradients are reduced in batch
/// order, and the stage kind is appended to the checkpoint provenance.
pub fn run_stage(
    start: Checkpoint,
    cfg: &StageConfig,
    data: &StageData,
    vocab: &Vocabulary,
    holdout: Option<&StageData>,
) -> Result<(Checkpoint, Vec<StepLog>), TrainError> {
    cfg.validate()?;
    if data.objective() != cfg.objective {
        return Err(TrainError::ObjectiveMismatch {
            expected: match cfg.objective {
                Objective::Denoise => "denoise",
                Objective::Supervised => "supervised",
            },
            got: match data.objective() {
                Objective::Denoise => "denoise",
                Objective::Supervised => "supervised",
            },
        });
    }
    let n = data.len();
    let steps_per_epoch = (n / cfg.batch_size) as u64;
    if n == 0 || steps_per_epoch == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let total_steps = match cfg.budget {
        Budget::Epochs(e) => e as u64 * steps_per_epoch,
        Budget::Steps(s) => s,
    };
    if total_steps == 0 {
        return Err(TrainError::BadStage("zero total steps".into()));
    }

    let mut ckpt = start;
    // A new stage always starts with fresh optimizer state.
    let mut named = ckpt.params.named_tensors_mut();
    let mut moments_m: Vec<Vec<f32>> = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut moments_v: Vec<Vec<f32>> = moments_m.clone();

    let mut log = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_holdout = f64::INFINITY;
    let mut evals_without_gain = 0u32;
    let mut stopped_early = false;

    let mut step = 0u64;
    'training: for epoch in 0.. {
        let mut shuffle_rng = rng::stream(&[cfg.seed, cfg.kind.tag(), 0x6f72_646572, epoch]);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            step += 1;
            if step > total_steps {
                break 'training;
            }
            drop(named);
            let examples: Vec<Result<(Vec<u32>, Vec<u32>), TrainError>> = chunk
                .iter()
                .map(|&idx| materialize(data, idx, cfg, vocab, epoch))
                .collect();
            let mut batch = Vec::with_capacity(chunk.len());
            for e in examples {
                batch.push(e?);
            }
            let params_ref = &ckpt.params;
            let results: Vec<Result<(f64, Vec<Option<Vec<f32>>>), TrainError>> = batch
                .par_iter()
                .map(|(src, tgt)| {
                    let mut tape = Tape::new();
                    let (loss, bound) = nll(&mut tape, params_ref, src, tgt)?;
                    let grads = tape.backward(loss)?;
                    let by_param: Vec<Option<Vec<f32>>> = bound
                        .named_ids()
                        .into_iter()
                        .map(|(_, id)| grads.get(id).map(|g| g.to_vec()))
                        .collect();
                    Ok((tape.scalar_value(loss), by_param))
                })
                .collect();

            named = ckpt.params.named_tensors_mut();
            let mut grad_sums: Vec<Vec<f64>> =
                named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut loss_sum = 0.0f64;
            // Reduction in batch order keeps runs bit-identical.
            for r in results {
                let (loss, by_param) = r?;
                loss_sum += loss;
                for (sum, g) in grad_sums.iter_mut().zip(by_param) {
                    if let Some(g) = g {
                        for (s, x) in sum.iter_mut().zip(g) {
                            *s += x as f64;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Vec<f32>> = grad_sums
                .into_iter()
                .map(|g| g.into_iter().map(|x| (x * scale) as f32).collect())
                .collect();
            if let Some(clip) = cfg.clip_norm {
                let norm_sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|&x| x as f64 * x as f64)
                    .sum();
                let norm = norm_sq.sqrt();
                if norm > clip {
                    let factor = (clip / norm) as f32;
                    for g in grads.iter_mut() {
                        for x in g.iter_mut() {
                            *x *= factor;
                        }
                    }
                }
            }
            let lr = lr_at(cfg, step, total_steps)?;
            for (i, (_, tensor)) in named.iter_mut().enumerate() {
                adamw_update(
                    tensor.data_mut(),
                    &grads[i],
                    &mut moments_m[i],
                    &mut moments_v[i],
                    step,
                    lr,
                    cfg.betas,
                    cfg.eps,
                    cfg.weight_decay,
                )?;
            }
            log.push(StepLog {
                step,
                lr,
                loss: loss_sum / chunk.len() as f64,
            });

            if let (Some(es), Some(held)) = (cfg.early_stop, holdout) {
                if step % es.eval_every == 0 {
                    drop(named);
                    let held_loss = eval_loss(&ckpt.params, held, cfg, vocab)?;
                    named = ckpt.params.named_tensors_mut();
                    if held_loss < best_holdout - es.min_delta {
                        best_holdout = held_loss;
                        evals_without_gain = 0;
                    } else {
                        evals_without_gain += 1;
                        if evals_without_gain >= es.patience {
                            stopped_early = true;
                            break 'training;
                        }
                    }
                }
            }
        }
        if step >= total_steps {
            break;
        }
    }
    let _ = stopped_early;
    drop(named);

    ckpt.moments_m = moments_m;
    ckpt.moments_v = moments_v;
    ckpt.step = step.min(total_steps);
    ckpt.provenance.push(cfg.kind.name().to_string());
    Ok((ckpt, log))
}
