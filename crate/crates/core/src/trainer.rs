//! Joint training of the backbone and every exit branch.
//!
//! Mini-batch SGD with optional momentum and gradient-norm clipping on `sum_h w_h * CE_h`, where the sum
//! runs over exit heads and the final head. Gradients are summed in `f64`.
//! The model snapshot kept is the epoch with the best final-head validation
//! accuracy. Ties go to the lower validation joint loss, then to the earliest
//! epoch. Without validation data it is the last epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beatset::{AamiClass, BeatRecord};
use crate::cascade::argmax;
use crate::error::{invalid, Error, Result};
use crate::exit_graph::{ExitGrads, ExitModel};
use crate::nn::{cross_entropy, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
    /// One weight per head, exits first. Empty means all ones.
    pub loss_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.8,
            clip_norm: Some(3.0),
            loss_weights: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn weights(&self, heads: usize) -> Result<Vec<f64>> {
        if self.loss_weights.is_empty() {
            return Ok(vec![1.0; heads]);
        }
        if self.loss_weights.len() != heads {
            return invalid(format!("{heads} heads need {heads} loss weights, got {}", self.loss_weights.len()));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return invalid("loss weights must be finite and positive");
        }
        Ok(self.loss_weights.clone())
    }

    fn validate(&self, train_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if train_len == 0 {
            return invalid("training set is empty");
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return invalid(format!(
                "batch size {} must be in 1..={train_len}",
                self.batch_size
            ));
        }
        self.validate_step()
    }

    fn validate_step(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return invalid("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must be in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return invalid("clip norm must be finite and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean joint loss over the epoch's training beats.
    pub loss: f64,
    /// Accuracy per head on the training beats, measured during the epoch.
    pub train_accuracy: Vec<f64>,
    /// Accuracy per head on the validation set after the epoch.
    pub validation_accuracy: Vec<Option<f64>>,
    /// Mean joint loss on the validation set after the epoch.
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ExitModel<f32>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters `model` holds.
    pub best_epoch: usize,
}

/// Accuracy and per-class recall of every head, each head judged on all beats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMetrics {
    pub accuracy: Vec<f64>,
    /// `recall[head][class]`; `None` for classes absent from the beats.
    pub recall: Vec<Vec<Option<f64>>>,
}

pub fn evaluate_heads(model: &ExitModel<f32>, beats: &[BeatRecord]) -> Result<HeadMetrics> {
    if beats.is_empty() {
        return invalid("no beats to evaluate");
    }
    let heads = model.num_heads();
    let mut correct = vec![0usize; heads];
    let mut class_hits = vec![vec![0usize; AamiClass::COUNT]; heads];
    let mut class_total = vec![0usize; AamiClass::COUNT];
    for b in beats {
        let out = model.forward_heads(&Tensor::from_samples(b.samples()))?;
        let t = b.label.index();
        class_total[t] += 1;
        for (h, p) in out.heads.iter().enumerate() {
            if argmax(p).0 == t {
                correct[h] += 1;
                class_hits[h][t] += 1;
            }
        }
    }
    let n = beats.len();
    Ok(HeadMetrics {
        accuracy: correct
            .iter()
            .map(|&c| c as f64 / n as f64)
            .collect(),
        recall: class_hits
            .iter()
            .map(|hits| {
                hits.iter()
                    .zip(&class_total)
                    .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
                    .collect()
            })
            .collect(),
    })
}

/// Final-head accuracy, then lower validation loss; compared
/// lexicographically, so exact ties fall back to the earliest epoch.
fn selection_score(val_accuracy: &[Option<f64>], val_loss: Option<f64>) -> (f64, f64) {
    let last = val_accuracy.last().copied().flatten();
    (last.unwrap_or(f64::NEG_INFINITY), -val_loss.unwrap_or(f64::INFINITY))
}

fn validation_pass(model: &ExitModel<f32>, beats: &[BeatRecord], weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut correct = vec![0usize; model.num_heads()];
    let mut loss = 0.0;
    for b in beats {
        let out = model.forward_heads(&Tensor::from_samples(b.samples()))?;
        let t = b.label.index();
        for (h, p) in out.heads.iter().enumerate() {
            if argmax(p).0 == t {
                correct[h] += 1;
            }
            loss += weights[h] * cross_entropy(p, t);
        }
    }
    let n = beats.len() as f64;
    Ok((correct.iter().map(|&c| c as f64 / n).collect(), loss / n))
}

/// Per-batch figures measured before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Joint loss summed over the batch.
    pub loss_sum: f64,
    /// Correct predictions per head.
    pub correct: Vec<usize>,
}

/// SGD state: resolved loss weights and the momentum buffer.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: TrainConfig,
    weights: Vec<f64>,
    velocity: ExitGrads,
}

impl Optimizer {
    pub fn new(model: &ExitModel<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate_step()?;
        Ok(Self {
            cfg: cfg.clone(),
            weights: cfg.weights(model.num_heads())?,
            velocity: model.zero_grads(),
        })
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.weights
    }

    /// One update from the mean batch gradient. A non-finite loss reports
    /// `TrainingDiverged` with epoch 0; [`train`] fills in the epoch.
    pub fn step(&mut self, model: &mut ExitModel<f32>, batch: &[&BeatRecord]) -> Result<BatchStats> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let mut grads = model.zero_grads();
        let mut stats = BatchStats {
            loss_sum: 0.0,
            correct: vec![0; model.num_heads()],
        };
        for beat in batch {
            let trace = model.trace(&Tensor::from_samples(beat.samples()))?;
            for (h, p) in trace.head_probs().iter().enumerate() {
                if argmax(p).0 == beat.label.index() {
                    stats.correct[h] += 1;
                }
            }
            stats.loss_sum += model.joint_backward(&trace, beat.label.index(), &self.weights, &mut grads)?;
        }
        if !stats.loss_sum.is_finite() {
            return Err(Error::TrainingDiverged { epoch: 0 });
        }
        grads.scale(1.0 / batch.len() as f64);
        if let Some(max) = self.cfg.clip_norm {
            let norm = grads.norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.velocity.scale(self.cfg.momentum);
        self.velocity.add(&grads);
        model.apply_update(&self.velocity, self.cfg.learning_rate);
        Ok(stats)
    }
}

/// Mean joint loss of `model` over `beats`.
pub fn mean_joint_loss(model: &ExitModel<f32>, beats: &[BeatRecord], weights: &[f64]) -> Result<f64> {
    if beats.is_empty() {
        return invalid("no beats to evaluate");
    }
    if weights.len() != model.num_heads() {
        return invalid("one loss weight per head is required");
    }
    Ok(validation_pass(model, beats, weights)?.1)
}

/// Train of a copy and return the best snapshot.
pub fn train(
    model: &ExitModel<f32>,
    train_set: &[BeatRecord],
    validation: &[BeatRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(train_set.len())?;
    let mut model = model.clone();
    let mut opt = Optimizer::new(&model, cfg)?;
    let weights = opt.weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, ExitModel<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = vec![0usize; model.num_heads()];
        for batch in order.chunks(cfg.batch_size) {
            let beats: Vec<&BeatRecord> = batch.iter().map(|&i| &train_set[i]).collect();
            let stats = opt.step(&mut model, &beats).map_err(|e| match e {
                Error::TrainingDiverged { .. } => Error::TrainingDiverged { epoch },
                other => other,
            })?;
            loss_sum += stats.loss_sum;
            correct.iter_mut().zip(&stats.correct).for_each(|(c, k)| *c += k);
        }
        if !model.all_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let n = train_set.len() as f64;
        let (val_accuracy, val_loss) = if validation.is_empty() {
            (vec![None; model.num_heads()], None)
        } else {
            let (acc, loss) = validation_pass(&model, validation, &weights)?;
            (acc.into_iter().map(Some).collect(), Some(loss))
        };
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            train_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            validation_accuracy: val_accuracy.clone(),
            validation_loss: val_loss,
        });
        let score = selection_score(&val_accuracy, val_loss);
        let better = match &best {
            None => true,
            Some((s, _, _)) => validation.is_empty() || score > *s,
        };
        if better {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beatset::generate_synthetic;
    use crate::exit_graph::{attach_exits, ExitPlacement};
    use crate::nn::{backbone, ParamStore};

    fn small_model() -> ExitModel<f32> {
        let bb = backbone(&[4, 8, 8], 5, 16, 260, 5).unwrap();
        let p = ParamStore::init(&bb, 1);
        attach_exits(&bb, &p, &ExitPlacement::new(vec![1], 3).unwrap(), 8, 2).unwrap()
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let beats = generate_synthetic(6, 3, 0.05).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 5,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let a = train(&small_model(), &beats, &[], &cfg).unwrap();
        let b = train(&small_model(), &beats, &[], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
        assert_eq!(a.best_epoch, 4);
        assert_eq!(a.history[0].validation_accuracy, vec![None, None]);
    }

    #[test]
    fn best_epoch_uses_validation() {
        let beats = generate_synthetic(4, 3, 0.05).unwrap();
        let val = generate_synthetic(2, 4, 0.05).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&small_model(), &beats, &val, &cfg).unwrap();
        let keys: Vec<(f64, f64)> = out
            .history
            .iter()
            .map(|r| (r.validation_accuracy[1].unwrap(), -r.validation_loss.unwrap()))
            .collect();
        let mut first_best = 1;
        for (i, k) in keys.iter().enumerate() {
            if k > &keys[first_best - 1] {
                first_best = i + 1;
            }
        }
        let best = keys[first_best - 1].0;
        assert_eq!(out.best_epoch, first_best);
        let m = evaluate_heads(&out.model, &val).unwrap();
        assert_eq!(m.accuracy[1], best);
    }

    #[test]
    fn rejects_bad_configs() {
        let beats = generate_synthetic(1, 0, 0.0).unwrap();
        let m = small_model();
        let big = TrainConfig {
            batch_size: 6,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&m, &beats, &[], &big), Err(Error::InvalidInput(_))));
        assert!(matches!(train(&m, &[], &[], &TrainConfig::default()), Err(Error::InvalidInput(_))));
        let w = TrainConfig {
            batch_size: 1,
            loss_weights: vec![1.0],
            ..TrainConfig::default()
        };
        assert!(train(&m, &beats, &[], &w).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let beats = generate_synthetic(4, 0, 0.05).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 2,
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        match train(&small_model(), &beats, &[], &cfg) {
            Err(Error::TrainingDiverged { epoch }) => assert!((1..=5).contains(&epoch)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn recall_is_none_for_absent_classes() {
        let beats: Vec<_> = generate_synthetic(2, 0, 0.0)
            .unwrap()
            .into_iter()
            .filter(|b| b.label == AamiClass::N)
            .collect();
        let m = evaluate_heads(&small_model(), &beats).unwrap();
        assert!(m.recall[0][0].is_some());
        assert!(m.recall[0][1..].iter().all(Option::is_none));
        assert!(matches!(evaluate_heads(&small_model(), &[]), Err(Error::InvalidInput(_))));
    }
}
