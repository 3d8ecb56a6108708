//! AdamW with warmup and linear decay, synthetic tasks, and the training loop.

mod optim;
mod task;

pub use optim::{adamw_update, lr_schedule, AdamWConfig, AdamWState};
pub use task::{majority_label, make_task, Example, TaskGenerator, TaskKind, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, model_loss_and_grad, scored_logits};
use crate::blocks::{model_forward, ModelParams, ParamKind};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            seed: 0,
            eval_every: 50,
            val_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 || self.val_size == 0 {
            return Err(Error::InvalidArgument("batch, eval_every and val_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..=1.0).contains(&self.warmup_frac)) {
            return Err(Error::InvalidArgument("lr, weight_decay >= 0 and warmup_frac in [0, 1] required".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub lambda_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<MetricRecord>,
}

/// A run that hit a non-finite value; `last_good` is the model before the
/// failing update.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: usize,
    pub last_good: ModelParams,
    pub log: Vec<MetricRecord>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Mean loss and accuracy on `data`. Sequence targets are scored by the
/// argmax of the pooled logits, position targets per labelled position.
pub fn evaluate(m: &ModelParams, data: &[Example]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let (mut hits, mut total) = (0usize, 0usize);
    for (tokens, target) in data {
        let out = model_forward(tokens, m)?;
        let (logits, targets) = scored_logits(&out.logits, target);
        loss += cross_entropy(&logits, &targets)?;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = logits.row(i);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(arg == t);
            total += 1;
        }
    }
    Ok((loss / data.len() as f64, hits as f64 / total.max(1) as f64))
}

/// Held-out examples drawn from a stream independent of training batches.
pub fn validation_set(task: &TaskSpec, size: usize) -> Result<Vec<Example>> {
    let spec = TaskSpec {
        seed: task.seed ^ 0x5EED_0F_7A11_DA7E,
        ..task.clone()
    };
    Ok(make_task(&spec)?.batch(size))
}

/// Batch-mean loss and gradient, accumulated in example order.
pub fn batch_gradient(m: &ModelParams, batch: &[Example]) -> Result<(f64, Vec<Matrix>)> {
    let mut acc: Vec<Matrix> = m.tensors().iter().map(|(_, t)| Matrix::zeros(t.rows(), t.cols())).collect();
    let mut loss = 0.0;
    for (tokens, target) in batch {
        let (l, g) = model_loss_and_grad(m, tokens, target)?;
        loss += l;
        for (a, g) in acc.iter_mut().zip(&g) {
            a.add_scaled_assign(g, 1.0)?;
        }
    }
    let s = 1.0 / batch.len() as f64;
    Ok((loss * s, acc.into_iter().map(|g| g.scale(s)).collect()))
}

/// Parameters that receive weight decay: embeddings and weight matrices.
pub fn decay_mask(m: &ModelParams) -> Vec<bool> {
    m.tensors()
        .iter()
        .map(|(k, _)| matches!(k, ParamKind::Embedding | ParamKind::Positional | ParamKind::Weight))
        .collect()
}

/// Trains `model` on `task`. Logs validation loss and accuracy every
/// `eval_every` steps and after the last step.
pub fn train(
    model: &ModelParams,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let fail = |error: Error, step: usize, last_good: &ModelParams, log: &[MetricRecord]| {
        Box::new(TrainFailure {
            error,
            step,
            last_good: last_good.clone(),
            log: log.to_vec(),
        })
    };
    let mut m = model.clone();
    let mut log = Vec::new();
    if let Err(e) = cfg.validate() {
        return Err(fail(e, 0, &m, &log));
    }
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model: m, log });
    }
    let mut gen = match make_task(&TaskSpec {
        seed: task.seed ^ cfg.seed.rotate_left(17),
        ..task.clone()
    }) {
        Ok(g) => g,
        Err(e) => return Err(fail(e, 0, &m, &log)),
    };
    let val = validation_set(task, cfg.val_size).map_err(|e| fail(e, 0, model, &[]))?;
    let shapes: Vec<_> = m.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut opt = AdamWState::new(
        &shapes,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let update = m.trainable_mask();
    let decay = decay_mask(&m);

    for step in 0..cfg.steps {
        let batch = gen.batch(cfg.batch);
        let lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        let grads = match batch_gradient(&m, &batch) {
            Ok((l, g)) if l.is_finite() && g.iter().all(Matrix::is_finite) => g,
            Ok(_) => return Err(fail(Error::NonFinite("training loss"), step, &m, &log)),
            Err(e) => return Err(fail(e, step, &m, &log)),
        };
        let mut next = m.clone();
        if let Err(e) = opt.step(next.tensors_mut(), &grads, lr, &update, &decay) {
            return Err(fail(e, step, &m, &log));
        }
        if !next.tensors().iter().all(|(_, t)| t.is_finite()) {
            return Err(fail(Error::NonFinite("parameters"), step, &m, &log));
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let (loss, accuracy) = match evaluate(&next, &val) {
                Ok(r) if r.0.is_finite() => r,
                Ok(_) => return Err(fail(Error::NonFinite("validation loss"), step, &m, &log)),
                Err(e) => return Err(fail(e, step, &m, &log)),
            };
            log.push(MetricRecord {
                step: done,
                loss,
                accuracy,
                lr,
                lambda_mean: next.lambda_mean(),
            });
        }
        m = next;
    }
    Ok(TrainOutcome { model: m, log })
}

/// Serializes a metrics log as JSON lines.
pub fn metrics_jsonl(log: &[MetricRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Sign-carrying gradient of the mean loss on `data` with respect to every
/// gate parameter, averaged over gates.
pub fn mean_gate_gradient(m: &ModelParams, data: &[Example]) -> Result<Option<f64>> {
    let (_, grads) = batch_gradient(m, data)?;
    let gates: Vec<f64> = m
        .tensors()
        .iter()
        .zip(&grads)
        .filter(|((k, _), _)| *k == ParamKind::Gate)
        .zip(m.layers.iter())
        .filter(|(_, l)| l.uses_velocity() && l.step.variant.is_gated())
        .flat_map(|((_, g), _)| g.data().to_vec())
        .collect();
    Ok((!gates.is_empty()).then(|| gates.iter().sum::<f64>() / gates.len() as f64))
}
