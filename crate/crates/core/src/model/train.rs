use std::fmt::Write as _;

use qvsum_autograd::{Adam, AdamConfig, Graph, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, SelectionMetric, TRUNK_PREFIX};
use crate::dataset::{PreparedDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_video, EvalConfig, MultiGold, VideoPrediction};
use crate::ingest::Split;
use crate::rng::{keyed_rng, keyed_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
        }
    }
}

/// One row of the metrics history. Epoch 0 is the evaluation before any
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// Parameters after the last epoch.
    pub last: ParamStore,
    /// Parameters of the best validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// `epoch,split,loss,accuracy,f1,phase` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy,f1,phase\n");
        for m in &self.history {
            let _ = writeln!(out, "{},{},{},{},{},{}", m.epoch, m.split, m.loss, m.accuracy, m.f1, m.phase.as_str());
        }
        out
    }

    pub fn rows(&self, phase: Phase, split: Split) -> impl Iterator<Item = &EpochMetrics> {
        self.history.iter().filter(move |m| m.phase == phase && m.split == split)
    }

    /// Loss of the given split before any update in the phase.
    pub fn initial_loss(&self, phase: Phase, split: Split) -> Option<f64> {
        self.rows(phase, split).find(|m| m.epoch == 0).map(|m| m.loss)
    }

    pub fn final_loss(&self, phase: Phase, split: Split) -> Option<f64> {
        self.rows(phase, split).last().map(|m| m.loss)
    }
}

fn eval_seed(model: &Model, video_id: &str) -> u64 {
    keyed_seed(model.config.seed, &format!("eval/{video_id}"))
}

/// Deterministic prediction record for one sample.
pub fn predict_sample(model: &Model, s: &Sample) -> Result<VideoPrediction> {
    let (_, predicted) = model.predict(s)?;
    Ok(VideoPrediction {
        video_id: s.video_id.clone(),
        predicted,
        gold: s.gold.clone(),
        annotator_scores: s.annotator_scores.clone(),
        original_len: s.original_len,
    })
}

/// Mean loss, frame accuracy and temporal F1 over samples.
pub fn evaluate_split(model: &Model, samples: &[&Sample], phase: Phase, agg: MultiGold) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let cfg = EvalConfig::default();
    let (mut loss, mut acc, mut f1) = (0.0, 0.0, 0.0);
    for s in samples {
        let mut g = Graph::with_params(&model.store);
        let l = match phase {
            Phase::Pretrain => model.segment_loss(&mut g, s)?,
            Phase::Train => model.loss(&mut g, s, eval_seed(model, &s.video_id))?,
        };
        loss += g.scalar(l);
        if phase == Phase::Pretrain {
            let logits = model.segment_logits(&mut g, s)?;
            let pred = super::argmax_rows(g.value(logits));
            let hits = pred.iter().zip(&s.segment_classes).filter(|(p, c)| **p as usize == **c).count();
            acc += hits as f64 / pred.len() as f64;
        } else {
            let v = evaluate_video(&predict_sample(model, s)?, &cfg, agg)?;
            acc += v.accuracy;
            f1 += v.f1;
        }
    }
    let n = samples.len() as f64;
    Ok(SplitMetrics { loss: loss / n, accuracy: acc / n, f1: f1 / n })
}

fn adam_for(model: &Model, lr: f64) -> Adam {
    Adam::new(AdamConfig {
        learning_rate: lr,
        beta1: model.config.beta1,
        beta2: model.config.beta2,
        eps: model.config.adam_eps,
    })
}

fn selection_score(phase: Phase, metric: SelectionMetric, m: &SplitMetrics) -> f64 {
    if phase == Phase::Pretrain {
        // Segment pre-training only measures class accuracy.
        return m.accuracy;
    }
    match metric {
        SelectionMetric::Accuracy => m.accuracy,
        SelectionMetric::F1 => m.f1,
    }
}

fn run_phase(model: &mut Model, data: &PreparedDataset, phase: Phase, epochs: usize, lr: f64) -> Result<TrainOutcome> {
    let train: Vec<&Sample> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let val: Vec<&Sample> = data.split(Split::Val).collect();
    let select_on = if val.is_empty() { Split::Train } else { Split::Val };
    let agg = MultiGold::for_dataset(data.config.dataset_name);
    let metric = model.config.variant.selection_metric();
    let mut adam = adam_for(model, lr);
    let mut history = Vec::new();

    let record = |model: &Model, epoch: usize, history: &mut Vec<EpochMetrics>| -> Result<f64> {
        let mut score = 0.0;
        for (split, set) in [(Split::Train, &train), (Split::Val, &val)] {
            if set.is_empty() {
                continue;
            }
            let m = evaluate_split(model, set, phase, agg)?;
            if !m.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite {split} loss after epoch {epoch}")));
            }
            history.push(EpochMetrics {
                phase,
                epoch,
                split,
                loss: m.loss,
                accuracy: m.accuracy,
                f1: m.f1,
            });
            if split == select_on {
                score = selection_score(phase, metric, &m);
            }
        }
        Ok(score)
    };

    let mut best_score = record(model, 0, &mut history)?;
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = keyed_rng(model.config.seed, &format!("{}/shuffle/{epoch}", phase.as_str()));
        order.shuffle(&mut rng);
        for (step, &i) in order.iter().enumerate() {
            let s = train[i];
            let seed = keyed_seed(model.config.seed, &format!("latent/{epoch}/{step}"));
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let loss = match phase {
                    Phase::Pretrain => model.segment_loss(&mut g, s)?,
                    Phase::Train => model.loss(&mut g, s, seed)?,
                };
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {value} at epoch {epoch}, step {step} (video `{}`)",
                        s.video_id
                    )));
                }
                g.backward(loss).params(&g)
            };
            if grads.values().any(|gr| gr.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch} (video `{}`)", s.video_id)));
            }
            adam.step(&mut model.store, &grads);
        }
        let score = record(model, epoch, &mut history)?;
        if score > best_score {
            best_score = score;
            best = model.store.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome { history, last: model.store.clone(), best, best_epoch })
}

/// Trains the frame-level objective from the model's current parameters.
pub fn train_with(model: &mut Model, data: &PreparedDataset) -> Result<TrainOutcome> {
    let (epochs, lr) = (model.config.epochs(), model.config.learning_rate());
    run_phase(model, data, Phase::Train, epochs, lr)
}

/// Segment-level pre-training of the shared trunk on pseudo labels.
pub fn pretrain_segments(model: &mut Model, data: &PreparedDataset) -> Result<TrainOutcome> {
    if !matches!(model.arch, super::Arch::PseudoPretrain { .. }) {
        return Err(Error::Config("segment pre-training needs the pseudo_pretrain variant".into()));
    }
    if data.pseudo_labels.is_empty() {
        return Err(Error::Empty("segment pseudo labels"));
    }
    let (epochs, lr) = (model.config.pretrain_epochs(), model.config.pretrain_learning_rate());
    run_phase(model, data, Phase::Pretrain, epochs, lr)
}

/// Fresh model of the same config whose trunk is copied from `pretrained`;
/// the frame head keeps its fresh initialization.
pub fn finetune_from(pretrained: &Model) -> Result<Model> {
    let mut m = Model::new(pretrained.config.clone(), pretrained.shape)?;
    let copied = m.store.copy_prefix_from(&pretrained.store, TRUNK_PREFIX)?;
    if copied == 0 {
        return Err(Error::Checkpoint("pre-trained model has no trunk parameters".into()));
    }
    Ok(m)
}

/// Full training: optional segment pre-training, then frame training. On
/// return `model` holds the best-validation parameters.
pub fn train(model: &mut Model, data: &PreparedDataset) -> Result<TrainOutcome> {
    let pre = if matches!(model.arch, super::Arch::PseudoPretrain { .. }) && model.config.pretrain {
        let out = pretrain_segments(model, data)?;
        model.store = out.best.clone();
        *model = finetune_from(model)?;
        Some(out)
    } else {
        None
    };
    let mut out = train_with(model, data)?;
    model.store = out.best.clone();
    if let Some(p) = pre {
        let mut history = p.history;
        history.extend(out.history);
        out.history = history;
    }
    Ok(out)
}
