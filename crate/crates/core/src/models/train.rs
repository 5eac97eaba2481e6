use nalgebra::DMatrix;

use super::record::{RunMetadata, StepMetrics, StopReason, TrainRecord};
use crate::data_model::LabeledData;
use crate::error::Error;
use crate::iterative_opt::{regularized_gn_step_from, sgd_step_from, BatchSize, Differentiable, OptimizerConfig};
use crate::loss::accuracy;
use crate::random::{rng, shuffled, Rng};

pub const DEFAULT_CUTOFF: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    /// Full-batch Gauss-Newton with preconditioner `((1−λ)B + λI)⁻¹`.
    RegularizedGn,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RegularizedGn => "gauss_newton",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub opt: OptimizerConfig,
    pub cutoff: f64,
    pub max_steps: usize,
    /// Record val/test metrics every this many steps (and at the end).
    pub record_every: usize,
    pub batch_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            opt: OptimizerConfig::default(),
            cutoff: DEFAULT_CUTOFF,
            max_steps: 10_000,
            record_every: 1,
            batch_seed: 0,
        }
    }
}

/// Deterministic minibatch order: one seeded shuffle per epoch, batches are
/// consecutive slices of it (the last one may be short).
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch: batch.clamp(1, n.max(1)),
            rng: rng(seed),
            order: Vec::new(),
            pos: n,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = shuffled(&mut self.rng, self.n);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

pub(crate) fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_columns(idx)
}

/// Trains until training accuracy reaches `cfg.cutoff` or `cfg.max_steps`
/// steps have been taken. Failures end the run and are recorded, not returned.
pub fn train_to_cutoff<M: Differentiable>(
    model: &mut M,
    train: &LabeledData,
    val: Option<&LabeledData>,
    test: Option<&LabeledData>,
    cfg: &TrainConfig,
) -> TrainRecord {
    let x = train.x.values();
    let y = train.y.targets();
    let n = train.sample_count();
    let mut record = TrainRecord::default().with_metadata(RunMetadata {
        optimizer: cfg.optimizer.as_str().into(),
        dataset_size: n,
        batch_order_seed: cfg.batch_seed,
        ..RunMetadata::default()
    });
    if let Err(e) = cfg.opt.validate() {
        record.error = Some(e.to_string());
        record.finish(StopReason::Error, None);
        return record;
    }

    let full_batch = match (cfg.optimizer, cfg.opt.batch_size) {
        (OptimizerKind::RegularizedGn, _) | (_, BatchSize::Full) => true,
        (_, BatchSize::Mini(b)) => b >= n,
    };
    let mut schedule = match cfg.opt.batch_size {
        BatchSize::Mini(b) if !full_batch => Some(BatchSchedule::new(n, b, cfg.batch_seed)),
        _ => None,
    };
    let check_every = schedule.as_ref().map_or(1, BatchSchedule::steps_per_epoch);
    let record_every = cfg.record_every.max(1);
    let loss = model.loss_fn();

    let metrics = |model: &M, step: usize, train_pred: &DMatrix<f64>| {
        let v = val.map(|v| loss.value(&model.predict(v.x.values()), v.y.targets()));
        let t = test.map(|t| {
            let p = model.predict(t.x.values());
            (loss.value(&p, t.y.targets()), 1.0 - accuracy(&p, t.y.targets()))
        });
        StepMetrics {
            step,
            time: step as f64,
            train_loss: loss.value(train_pred, y),
            train_accuracy: Some(accuracy(train_pred, y)),
            val_loss: v,
            test_loss: t.map(|t| t.0),
            test_error: t.map(|t| t.1),
        }
    };

    let mut step = 0;
    loop {
        let checkpoint = step % check_every == 0;
        let full_eval = if full_batch { Some(model.evaluate(x, y)) } else { None };
        let train_pred = match (&full_eval, checkpoint) {
            (Some(e), _) => Some(e.predictions.clone()),
            (None, true) => Some(model.predict(x)),
            (None, false) => None,
        };

        if let Some(pred) = &train_pred {
            let acc = accuracy(pred, y);
            let done = checkpoint && acc >= cfg.cutoff;
            let capped = step >= cfg.max_steps;
            if done || capped || step % record_every == 0 {
                record.push(metrics(model, step, pred));
            }
            if done {
                record.steps_to_cutoff = Some(step);
                record.finish(StopReason::Cutoff, None);
                return record;
            }
        }
        if step >= cfg.max_steps {
            if train_pred.is_none() {
                let pred = model.predict(x);
                record.push(metrics(model, step, &pred));
            }
            record.finish(StopReason::Cap, None);
            return record;
        }

        let result = match (&full_eval, schedule.as_mut()) {
            (Some(eval), _) => match cfg.optimizer {
                OptimizerKind::Sgd => sgd_step_from(model, x, y, eval, &cfg.opt),
                OptimizerKind::RegularizedGn => regularized_gn_step_from(model, x, y, eval, &cfg.opt),
            },
            (None, Some(s)) => {
                let idx = s.next_batch();
                let xb = select_columns(x, &idx);
                let yb = select_columns(y, &idx);
                let eval = model.evaluate(&xb, &yb);
                sgd_step_from(model, &xb, &yb, &eval, &cfg.opt)
            }
            (None, None) => unreachable!("minibatch runs always have a schedule"),
        };
        if let Err(e) = result {
            let reason = match e {
                Error::Divergence { .. } => StopReason::Divergence,
                _ => StopReason::Error,
            };
            record.error = Some(match e {
                Error::Divergence { detail, .. } => format!("training diverged at step {step}: {detail}"),
                other => other.to_string(),
            });
            record.finish(reason, None);
            return record;
        }
        step += 1;
    }
}
