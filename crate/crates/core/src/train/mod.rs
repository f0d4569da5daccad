//! Seeded character-level training: corpus ingestion, batching, AdamW with
//! decay groups and an EMA-smoothed loss report.

mod corpus;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ForwardOptions, Model};
use crate::numerics::Scalar;

pub use corpus::{batches, ingest, Batch, Batcher, Corpus, Split, DEFAULT_VAL_FRACTION};
pub use optim::{AdamW, OptimConfig, Schedule, StepStats};

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub ema_decay: f64,
    /// Validation every this many steps (and at the last step); 0 disables.
    pub eval_every: usize,
    pub eval_batches: usize,
    /// When false the `wall_ms` column is written as 0 so reports of
    /// identical runs are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            seq_len: 128,
            lr: 3e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            schedule: Schedule::Cosine,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            ema_decay: 0.999,
            eval_every: 100,
            eval_batches: 4,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("steps, batch_size and seq_len must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!(
                "warmup_steps={} exceeds steps={}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) || self.weight_decay < 0.0 {
            return bad("lr must be positive, min_lr_ratio in [0, 1], weight_decay >= 0".into());
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            min_lr_ratio: self.min_lr_ratio,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            schedule: self.schedule,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

/// One line of the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Per-step trace of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

/// `ema_t = decay·ema_{t−1} + (1 − decay)·x_t`, started at the first value.
pub fn ema(values: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &x in values {
        let next = match out.last() {
            None => x,
            Some(&prev) => decay * prev + (1.0 - decay) * x,
        };
        out.push(next);
    }
    out
}

impl RunReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn final_ema(&self) -> Option<f64> {
        self.rows.last().map(|r| r.ema_loss)
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_loss)
    }

    /// CSV with a header row and LF line endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "loss", "ema_loss", "val_loss", "lr", "grad_norm", "wall_ms"])
                .map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::input(format!("bad run report: {e}")))?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Optional side effects of [`train_with`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Written once training finishes.
    pub checkpoint: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&ReportRow)>,
}

/// Mean validation loss over a fixed set of windows.
pub fn evaluate<T: Scalar>(model: &Model<T>, windows: &[Batch], seq: usize) -> Result<f64> {
    let mut total = 0.0;
    for b in windows {
        let l = model.loss(&b.inputs, &b.targets, seq, &ForwardOptions::default())?;
        total += l.to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / windows.len().max(1) as f64)
}

pub fn train<T: Scalar>(model: &mut Model<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<RunReport> {
    train_with(model, corpus, cfg, TrainHooks::default())
}

/// Trains `model` in place. Identical inputs give a bit-identical report
/// apart from `wall_ms`.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    if corpus.vocab_size() > model.config().vocab_size {
        return Err(Error::config(format!(
            "corpus has {} symbols but the model vocabulary is {}",
            corpus.vocab_size(),
            model.config().vocab_size
        )));
    }
    let mut train_batches = batches(corpus, cfg.seq_len, cfg.batch_size, cfg.seed, Split::Train)?;
    let val: Vec<Batch> = if cfg.eval_every > 0 && cfg.eval_batches > 0 {
        batches(corpus, cfg.seq_len, cfg.batch_size, cfg.seed ^ 0x5EED_F00D, Split::Validation)?
            .take(cfg.eval_batches)
            .collect()
    } else {
        Vec::new()
    };
    let mut opt = AdamW::new(cfg.optim(), model.params().params());
    let mut report = RunReport::default();
    let mut last_finite: Option<f64> = None;
    let mut ema_prev: Option<f64> = None;
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let batch = train_batches.next().expect("endless batches");
        let opts = ForwardOptions {
            train: true,
            dropout_seed: cfg.seed ^ (step as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            record_taps: false,
        };
        let (loss, grads) = model.loss_and_grads(&batch.inputs, &batch.targets, cfg.seq_len, &opts)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at step {step}; last finite loss {}",
                last_finite.map_or("none".into(), |l| l.to_string())
            )));
        }
        last_finite = Some(loss);
        let stats = opt.step(model.params_mut().params_mut(), &grads, step)?;
        let ema_loss = match ema_prev {
            None => loss,
            Some(p) => cfg.ema_decay * p + (1.0 - cfg.ema_decay) * loss,
        };
        ema_prev = Some(ema_loss);
        let val_loss = if !val.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            Some(evaluate(model, &val, cfg.seq_len)?)
        } else {
            None
        };
        let row = ReportRow {
            step,
            loss,
            ema_loss,
            val_loss,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        if let Some(f) = hooks.on_step.as_mut() {
            f(&row);
        }
        report.rows.push(row);
    }
    if let Some(path) = hooks.checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(report)
}
