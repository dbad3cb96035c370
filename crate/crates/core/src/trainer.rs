//! Minibatch training loop for the two-stream classifier.
//!
//! Every epoch shuffles the training set with a seed derived from the run
//! seed and the epoch index, accumulates per-sample gradients sequentially
//! in batch order, averages them, and applies one optimizer step per batch.
//! The loop is bitwise reproducible for a given seed and dataset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{epoch_batches, DatasetError, Sample};
use crate::model::{backward, forward, forward_logits, ModelError, ModelGrads, ModelParams};
use crate::ops::softmax_cross_entropy;
use crate::optim::{sgd_nesterov_step, OptimState, SgdConfig};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub shuffle: bool,
    pub seed: u64,
    /// Validation accuracy is measured every this many epochs (and always
    /// on the final epoch); other epochs carry the last measured value.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            learning_rate: 0.001,
            batch_size: 10,
            momentum: 0.5,
            weight_decay: 0.005,
            shuffle: true,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch metrics. `val_acc` repeats the last measured value on epochs
/// where validation was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) with the highest measured validation accuracy;
    /// the earliest such epoch on ties. Only epochs where validation
    /// actually ran compete.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_acc(&self) -> f64 {
        self.records[self.best_epoch - 1].val_acc
    }

    /// Renders the history as `epoch,train_loss,train_acc,val_acc` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_acc
            ));
        }
        out
    }
}

/// Predicted class index: argmax over logits, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose predicted class matches the label.
pub fn evaluate_classification(
    params: &ModelParams,
    samples: &[Sample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let mut correct = 0usize;
    for s in samples {
        let logits = forward_logits(params, &s.rgb, &s.flow)?;
        if argmax(logits.data()) == s.label.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn apply_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut OptimState,
    sgd: &SgdConfig,
) -> Result<(), ShapeError> {
    let mut param_refs = params.tensors_mut();
    let grad_refs: Vec<&Tensor> = grads.tensors();
    sgd_nesterov_step(&mut param_refs, &grad_refs, state, sgd)
}

/// A finished run: the epoch history plus the parameters as they stood at
/// the best validation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub history: TrainHistory,
}

/// Trains `params` in place through every epoch and returns the history
/// together with a snapshot of the parameters at `best_epoch`.
pub fn train(
    params: &mut ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }

    let mut state = OptimState::new(&params.tensors());
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_val_acc = 0.0;
    let mut best: Option<(usize, f64)> = None;
    let mut best_params: Option<ModelParams> = None;

    for epoch_idx in 0..cfg.epochs {
        let epoch = epoch_idx + 1;
        let batches = epoch_batches(
            train_set.len(),
            cfg.batch_size,
            cfg.seed,
            epoch_idx as u64,
            cfg.shuffle,
        )?;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let mut batch_grads: Option<ModelGrads> = None;
            let mut batch_loss = 0.0;
            for &sample_idx in batch {
                let s = &train_set[sample_idx];
                let (logits, cache) = forward(params, &s.rgb, &s.flow)?;
                let (loss, grad_logits) = softmax_cross_entropy(&logits, s.label.index())?;
                batch_loss += loss;
                if argmax(logits.data()) == s.label.index() {
                    correct += 1;
                }
                let g = backward(params, &cache, &grad_logits)?;
                match &mut batch_grads {
                    None => batch_grads = Some(g),
                    Some(acc) => acc.accumulate(&g),
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += batch_loss;
            let mut grads = batch_grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            apply_step(params, &grads, &mut state, &sgd)?;
        }

        let run_val = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        if run_val {
            let acc = evaluate_classification(params, val_set)?;
            last_val_acc = acc;
            let better = match best {
                None => true,
                Some((_, best_acc)) => acc > best_acc,
            };
            if better {
                best = Some((epoch, acc));
                best_params = Some(params.clone());
            }
        }

        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc: last_val_acc,
        });
    }

    let (best_epoch, _) = best.expect("validation ran on the final epoch");
    Ok(TrainOutcome {
        best_params: best_params.expect("best epoch has a snapshot"),
        history: TrainHistory {
            records,
            best_epoch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::model::{init_params, zero_params, ModelConfig};
    use crate::video_io::Segment;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            in_channels_rgb: 3,
            in_channels_flow: 2,
            conv_channels: [2, 2, 2, 2],
            feature_dim: 4,
            num_classes: 2,
            input_t: 4,
            input_h: 4,
            input_w: 4,
            init_seed: 3,
        }
    }

    fn random_sample(cfg: &ModelConfig, seed: u64, label: Label) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |channels: usize| {
            let mut t = Tensor::zeros(&[channels, cfg.input_t, cfg.input_h, cfg.input_w]);
            for v in t.data_mut() {
                *v = rng.gen::<f64>();
            }
            t
        };
        Sample {
            rgb: fill(cfg.in_channels_rgb),
            flow: fill(cfg.in_channels_flow),
            label,
            window: Segment::new(0, cfg.input_t),
        }
    }

    fn small_sets(cfg: &ModelConfig) -> (Vec<Sample>, Vec<Sample>) {
        let train = vec![
            random_sample(cfg, 100, Label::Stroke),
            random_sample(cfg, 101, Label::NonStroke),
            random_sample(cfg, 102, Label::Stroke),
            random_sample(cfg, 103, Label::NonStroke),
        ];
        let val = vec![
            random_sample(cfg, 200, Label::Stroke),
            random_sample(cfg, 201, Label::NonStroke),
        ];
        (train, val)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let before = params.clone();
        let tc = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut params, &train_set, &val_set, &tc).expect("train");
        assert_eq!(params, before);
    }

    #[test]
    fn single_sample_step_matches_manual_update() {
        let cfg = tiny_cfg();
        let sample = random_sample(&cfg, 300, Label::Stroke);
        let val = vec![random_sample(&cfg, 301, Label::NonStroke)];

        let mut expected = init_params(&cfg).expect("init");
        let (logits, cache) = forward(&expected, &sample.rgb, &sample.flow).expect("forward");
        let (_, grad_logits) = softmax_cross_entropy(&logits, 1).expect("loss");
        let grads = backward(&expected, &cache, &grad_logits).expect("backward");
        let lr = 0.05;
        for (p, g) in expected.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }

        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: lr,
            batch_size: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            shuffle: false,
            ..TrainConfig::default()
        };
        train(&mut params, &[sample], &val, &tc).expect("train");
        assert_eq!(params, expected);
    }

    #[test]
    fn batch_gradient_is_the_sample_mean() {
        let cfg = tiny_cfg();
        let s0 = random_sample(&cfg, 400, Label::Stroke);
        let s1 = random_sample(&cfg, 401, Label::NonStroke);
        let val = vec![random_sample(&cfg, 402, Label::Stroke)];

        let mut expected = init_params(&cfg).expect("init");
        let mut mean: Option<ModelGrads> = None;
        for s in [&s0, &s1] {
            let (logits, cache) = forward(&expected, &s.rgb, &s.flow).expect("forward");
            let (_, gl) = softmax_cross_entropy(&logits, s.label.index()).expect("loss");
            let g = backward(&expected, &cache, &gl).expect("backward");
            match &mut mean {
                None => mean = Some(g),
                Some(acc) => acc.accumulate(&g),
            }
        }
        let mut mean = mean.unwrap();
        mean.scale(0.5);
        let lr = 0.1;
        for (p, g) in expected.tensors_mut().into_iter().zip(mean.tensors()) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }

        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: lr,
            batch_size: 2,
            momentum: 0.0,
            weight_decay: 0.0,
            shuffle: false,
            ..TrainConfig::default()
        };
        train(&mut params, &[s0, s1], &val, &tc).expect("train");
        assert_eq!(params, expected);
    }

    #[test]
    fn tied_logits_predict_class_zero() {
        let cfg = tiny_cfg();
        let params = zero_params(&cfg).expect("zeros");
        let samples = vec![
            random_sample(&cfg, 500, Label::NonStroke),
            random_sample(&cfg, 501, Label::Stroke),
            random_sample(&cfg, 502, Label::NonStroke),
            random_sample(&cfg, 503, Label::Stroke),
        ];
        let acc = evaluate_classification(&params, &samples).expect("eval");
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn repeated_batch_loss_never_increases() {
        let cfg = tiny_cfg();
        let sample = random_sample(&cfg, 600, Label::Stroke);
        let val = vec![random_sample(&cfg, 601, Label::NonStroke)];
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            shuffle: false,
            ..TrainConfig::default()
        };
        let history = train(&mut params, &[sample], &val, &tc).expect("train").history;
        assert_eq!(history.records.len(), 10);
        for pair in history.records.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss,
                "loss rose from {} to {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn exploding_rate_reports_divergence_location() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 20,
            learning_rate: 1e12,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match train(&mut params, &train_set, &val_set, &tc) {
            Err(TrainError::Diverged { epoch, batch }) => {
                assert!(epoch >= 1 && batch >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sparse_validation_carries_last_value_forward() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 7,
            learning_rate: 0.01,
            batch_size: 2,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut params, &train_set, &val_set, &tc).expect("train").history;
        assert_eq!(history.records[0].val_acc, 0.0);
        assert_eq!(history.records[1].val_acc, 0.0);
        assert_eq!(history.records[3].val_acc, history.records[2].val_acc);
        assert_eq!(history.records[4].val_acc, history.records[2].val_acc);
        assert!(matches!(history.best_epoch, 3 | 6 | 7));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let tc = TrainConfig {
            epochs: 3,
            learning_rate: 0.02,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut p1 = init_params(&cfg).expect("init");
        let o1 = train(&mut p1, &train_set, &val_set, &tc).expect("train");
        let mut p2 = init_params(&cfg).expect("init");
        let o2 = train(&mut p2, &train_set, &val_set, &tc).expect("train");
        assert_eq!(p1, p2);
        assert_eq!(o1, o2);
        assert_eq!(o1.history.to_csv(), o2.history.to_csv());
    }

    #[test]
    fn best_snapshot_reproduces_the_best_validation_accuracy() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 8,
            learning_rate: 0.5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let outcome = train(&mut params, &train_set, &val_set, &tc).expect("train");
        let acc = evaluate_classification(&outcome.best_params, &val_set).expect("eval");
        assert_eq!(acc, outcome.history.best_val_acc());
        if outcome.history.best_epoch == outcome.history.records.len() {
            assert_eq!(outcome.best_params, params);
        }
    }

    #[test]
    fn history_csv_has_header_and_one_row_per_epoch() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig {
            epochs: 2,
            learning_rate: 0.01,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let history = train(&mut params, &train_set, &val_set, &tc).expect("train").history;
        let csv = history.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,train_acc,val_acc");
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("2,"));
    }

    #[test]
    fn empty_sets_are_rejected() {
        let cfg = tiny_cfg();
        let (train_set, val_set) = small_sets(&cfg);
        let mut params = init_params(&cfg).expect("init");
        let tc = TrainConfig::default();
        assert!(matches!(
            train(&mut params, &[], &val_set, &tc),
            Err(TrainError::EmptySet("training"))
        ));
        assert!(matches!(
            train(&mut params, &train_set, &[], &tc),
            Err(TrainError::EmptySet("validation"))
        ));
    }
}
