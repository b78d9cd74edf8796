use serde::Serialize;

use crate::error::{MlaError, Result};
use crate::model::Model;

use super::backprop::{backward, evaluate_batch};
use super::{Example, Freeze, Optimizer, SyntheticTask, TrainConfig};

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    /// `train` (running average over the epoch) or `heldout`.
    pub split: &'static str,
    pub loss: f64,
    pub token_accuracy: f64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,token_accuracy";

    pub fn to_csv(&self) -> String {
        format!("{},{},{:.6},{:.6}", self.epoch, self.split, self.loss, self.token_accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub token_accuracy: f64,
    pub label_count: usize,
}

/// Teacher-forced loss and token accuracy over `examples`.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<EvalResult> {
    let out = evaluate_batch(model, examples)?;
    Ok(EvalResult {
        loss: out.loss,
        token_accuracy: out.accuracy(),
        label_count: out.label_count,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<MetricRow>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_heldout(&self) -> Option<&MetricRow> {
        self.trace.iter().rev().find(|r| r.split == "heldout")
    }
}

struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Trains on the task's training split and evaluates the held-out split
/// after every epoch. Tensors matched by `freeze` are never written.
pub fn finetune(model: &Model, task: &SyntheticTask, cfg: &TrainConfig, freeze: &Freeze) -> Result<TrainOutcome> {
    task.check_model(&model.spec)?;
    let (train, heldout) = task.split()?;
    finetune_on(model, &train, &heldout, cfg, freeze)
}

/// [`finetune`] over explicit example sets.
pub fn finetune_on(
    model: &Model,
    train: &[Example],
    heldout: &[Example],
    cfg: &TrainConfig,
    freeze: &Freeze,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(MlaError::arg("training and held-out sets must be non-empty"));
    }
    let mut model = model.clone();
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let trainable: Vec<bool> = names.iter().map(|n| !freeze.is_frozen(n)).collect();
    let mut state = OptimizerState {
        m: model.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect(),
        v: model.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect(),
        t: 0,
    };

    let mut trace = Vec::with_capacity(2 * cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut labels, mut correct) = (0.0, 0usize, 0usize);
        for idx in cfg.shuffled_batches(train.len(), epoch) {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            if batch.iter().all(|e| e.label_count() == 0) {
                continue;
            }
            let (out, mut grads) = backward(&model, &batch, freeze)?;
            step += 1;
            if !out.loss.is_finite() {
                return Err(MlaError::Training {
                    step,
                    message: format!("loss became {}", out.loss),
                });
            }
            loss_sum += out.loss * out.label_count as f64;
            labels += out.label_count;
            correct += out.correct;
            apply_update(&mut model, &mut grads, &trainable, cfg, &mut state);
            if model.tensors_mut().iter().any(|t| !t.is_finite()) {
                return Err(MlaError::Training {
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
        }
        trace.push(MetricRow {
            epoch,
            split: "train",
            loss: loss_sum / labels.max(1) as f64,
            token_accuracy: correct as f64 / labels.max(1) as f64,
        });
        let ev = evaluate(&model, heldout)?;
        trace.push(MetricRow {
            epoch,
            split: "heldout",
            loss: ev.loss,
            token_accuracy: ev.token_accuracy,
        });
    }
    Ok(TrainOutcome {
        model,
        trace,
        steps: step,
    })
}

fn apply_update(
    model: &mut Model,
    grads: &mut Model,
    trainable: &[bool],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) {
    let mut gs = grads.tensors_mut();
    if let Some(clip) = cfg.gradient_clip {
        let norm = gs
            .iter()
            .zip(trainable)
            .filter(|(_, &t)| t)
            .flat_map(|(g, _)| g.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            gs.iter_mut().for_each(|g| g.scale(s));
        }
    }
    state.t += 1;
    let lr = cfg.learning_rate;
    for (i, (p, g)) in model.tensors_mut().into_iter().zip(gs).enumerate() {
        if !trainable[i] {
            continue;
        }
        let g = g.as_slice();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, d) in p.as_mut_slice().iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(state.t);
                let c2 = 1.0 - beta2.powi(state.t);
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, x) in p.as_mut_slice().iter_mut().enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
}
