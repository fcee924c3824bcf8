//! Mini-batch training with best-validation-loss checkpointing and
//! patience-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{onehot, sample_crossentropy};
use super::network::Network;
use super::optim::{Adam, Optimizer, OptimizerKind, Sgd};
use super::NnError;
use crate::par::Exec;
use crate::tensor::Tensor;

/// One labeled input, already normalized and shaped like the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// SGD momentum or Adam beta1.
    pub decay: f64,
    pub beta2: f64,
    /// Inverse-time learning-rate decay; 0 disables it.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 500,
            optimizer: OptimizerKind::Adam,
            decay: 0.9,
            beta2: 0.999,
            lr_decay: 0.0,
            patience: 100,
            seed: 0,
            target_val_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NnError::Config("learning_rate must be > 0".into()));
        }
        if self.patience > self.epochs {
            return Err(NnError::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.decay) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::Config("decay and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::Sgd => {
                let mut sgd = Sgd::new(self.learning_rate, self.decay);
                sgd.lr_decay = self.lr_decay;
                Box::new(sgd)
            }
            OptimizerKind::Adam => {
                let mut adam = Adam::new(self.learning_rate, self.decay, self.beta2);
                adam.lr_decay = self.lr_decay;
                Box::new(adam)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Tracks the best validation loss seen and how long ago it was.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Feed the validation loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Observation { improved, stop: !improved && self.since_best >= self.patience }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network at the best-validation-loss epoch.
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} epochs: {error}", history.len())]
pub struct TrainAbort {
    pub error: NnError,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Per-example class probabilities.
    pub probabilities: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.probabilities.iter().map(|p| argmax(p)).collect()
    }
}

/// Index of the largest entry; ties resolve to the higher index, so an
/// exact 0.5/0.5 split is read as the positive class.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v >= p[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(net: &Network, examples: &[Example], exec: Exec) -> Result<Evaluation, NnError> {
    if examples.is_empty() {
        return Err(NnError::EmptyInput);
    }
    let classes = net.output_len();
    let probs = exec.map(examples, |e| net.predict_one(&e.input));
    let mut probabilities = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, e) in probs.into_iter().zip(examples) {
        let p = p?;
        let mut y = vec![0.0; classes];
        y[e.label] = 1.0;
        loss += sample_crossentropy(&p, &y);
        if argmax(&p) == e.label {
            correct += 1;
        }
        probabilities.push(p);
    }
    let n = examples.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n, probabilities })
}

fn stack_batch(examples: &[Example], idx: &[usize], classes: usize) -> Result<(Tensor, Tensor), NnError> {
    let inputs: Vec<Tensor> = idx.iter().map(|&i| examples[i].input.clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| examples[i].label).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Config(format!("label {bad} out of range for {classes} classes")));
    }
    Ok((Tensor::stack(&inputs)?, onehot(&labels, classes)))
}

pub fn train(
    network: Network,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainAbort> {
    train_with(network, train_set, val_set, cfg, Exec::default())
}

pub fn train_with(
    network: Network,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, TrainAbort> {
    train_inner(network, train_set, val_set, cfg, exec, None)
}

/// Per-tensor keep masks; `None` leaves a tensor free.
pub type ParamMasks = [Option<Vec<bool>>];

/// Like [`train_with`], but entries whose mask is false are held at zero
/// after every optimizer step. Used to fine-tune a pruned network.
pub fn train_masked(
    network: Network,
    masks: &ParamMasks,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, TrainAbort> {
    train_inner(network, train_set, val_set, cfg, exec, Some(masks))
}

fn apply_masks(params: &mut [Tensor], masks: &ParamMasks) {
    for (t, m) in params.iter_mut().zip(masks) {
        if let Some(m) = m {
            for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

fn train_inner(
    mut network: Network,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
    masks: Option<&ParamMasks>,
) -> Result<TrainOutcome, TrainAbort> {
    let abort = |error: NnError, history: &[EpochRecord]| TrainAbort { error, history: history.to_vec() };
    cfg.validate().map_err(|e| abort(e, &[]))?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(abort(NnError::EmptyInput, &[]));
    }
    if let Some(m) = masks {
        if m.len() != network.params().len() {
            return Err(abort(NnError::Config(format!("{} masks for {} tensors", m.len(), network.params().len())), &[]));
        }
        apply_masks(network.params_mut(), m);
    }
    let classes = network.output_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = cfg.optimizer();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_params = network.params().to_vec();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (batch, targets) = stack_batch(train_set, idx, classes).map_err(|e| abort(e, &history))?;
            let (loss, grads) =
                network.loss_and_gradients(&batch, &targets, exec).map_err(|e| abort(e, &history))?;
            if !loss.is_finite() {
                return Err(abort(NnError::Diverged(format!("loss became {loss} in epoch {epoch}")), &history));
            }
            optimizer.step(network.params_mut(), &grads).map_err(|e| abort(e, &history))?;
            if let Some(m) = masks {
                apply_masks(network.params_mut(), m);
            }
            if network.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(abort(NnError::Diverged(format!("parameters became non-finite in epoch {epoch}")), &history));
            }
            loss_sum += loss * idx.len() as f64;
        }
        let val = evaluate(&network, val_set, exec).map_err(|e| abort(e, &history))?;
        if !val.loss.is_finite() {
            return Err(abort(NnError::Diverged(format!("validation loss became {}", val.loss)), &history));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        log::debug!("epoch {epoch}: train {:.5} val {:.5} acc {:.4}", record.train_loss, val.loss, val.accuracy);
        history.push(record);
        let obs = stopper.observe(epoch, val.loss);
        if obs.improved {
            best_params = network.params().to_vec();
        }
        if obs.stop {
            stopped_early = true;
            break;
        }
        if cfg.target_val_accuracy.is_some_and(|t| val.accuracy >= t) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let best_val_loss = if history.is_empty() {
        evaluate(&network, val_set, exec).map_err(|e| abort(e, &history))?.loss
    } else {
        stopper.best()
    };
    for (slot, p) in network.params_mut().iter_mut().zip(best_params) {
        *slot = p;
    }
    Ok(TrainOutcome { network, history, best_epoch: stopper.best_epoch(), best_val_loss, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(patience: usize, losses: &[f64]) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience);
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(i + 1, l).stop {
                return (i + 1, es.best_epoch());
            }
        }
        (losses.len(), es.best_epoch())
    }

    #[test]
    fn checkpoint_is_argmin() {
        assert_eq!(walk(100, &[1.0, 0.8, 0.9, 0.7]), (4, 4));
    }

    #[test]
    fn stops_after_patience_epochs_without_improvement() {
        assert_eq!(walk(2, &[1.0, 0.9, 0.95, 0.97, 0.96]), (4, 2));
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        assert_eq!(walk(1, &[1.0, 1.0, 0.5]), (2, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { patience: 10, epochs: 5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn argmax_ties_go_to_positive() {
        assert_eq!(argmax(&[0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.7, 0.3]), 0);
    }
}
