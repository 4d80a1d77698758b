//! SGD training with momentum on softmax cross-entropy, plus top-1
//! accuracy evaluation. Deterministic for a fixed seed: weight init,
//! shuffling, and the single-threaded update loop all derive from the
//! config seed.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplits, SplitData};
use crate::error::{Error, Result};
use crate::graph::{self, Plan};
use crate::network::{NetworkDef, TensorId, WeightStore};
use crate::tensor::PassCounter;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiply the learning rate by `decay_factor` every `decay_epochs`
    /// epochs; `decay_epochs == 0` disables the schedule.
    pub decay_epochs: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            seed: 1,
            decay_epochs: 10,
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean train loss and test accuracy.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

impl TrainHistory {
    /// Plain-text log: one `epoch loss test_acc` line per epoch.
    pub fn to_log(&self) -> String {
        let mut out = String::from("epoch train_loss test_acc\n");
        for r in &self.epochs {
            out.push_str(&format!("{} {:.6} {:.6}\n", r.epoch, r.train_loss, r.test_acc));
        }
        out
    }
}

/// One SGD-with-momentum update across all parameter tensors.
///
/// velocity = momentum * velocity + grad; theta -= lr * velocity.
pub fn sgd_update(
    store: &mut WeightStore,
    grads: &[crate::tensor::Tensor],
    velocity: &mut [Vec<f32>],
    lr: f64,
    momentum: f64,
) {
    for idx in 0..grads.len() {
        let g = grads[idx].data();
        let v = &mut velocity[idx];
        let theta = store.tensor_mut(TensorId(idx)).data_mut();
        for i in 0..g.len() {
            let vel = momentum * v[i] as f64 + g[i] as f64;
            v[i] = vel as f32;
            theta[i] = (theta[i] as f64 - lr * vel) as f32;
        }
    }
}

/// Train `net` from a fresh He initialization. Returns the trained store
/// and the per-epoch history; aborts with a diagnostic if the loss turns
/// non-finite.
pub fn train(
    net: &NetworkDef,
    splits: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<(WeightStore, TrainHistory)> {
    cfg.validate()?;
    let plan = Plan::new(net)?;
    let mut store = WeightStore::init(net, cfg.seed)?;
    let mut velocity: Vec<Vec<f32>> = store
        .tensors()
        .iter()
        .map(|t| vec![0.0f32; t.len()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let counter = PassCounter::new();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    if order.is_empty() {
        return Err(Error::Empty("training split"));
    }

    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        if cfg.decay_epochs > 0 && epoch > 0 && epoch % cfg.decay_epochs == 0 {
            lr *= cfg.decay_factor;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = splits.train.batch(chunk);
            let record = graph::forward(&plan, &store, &batch, &counter)?;
            if !record.loss().is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            loss_sum += record.loss();
            batches += 1;
            let grads = graph::backward(&plan, &store, &record)?;
            sgd_update(&mut store, grads.weight_grads(), &mut velocity, lr, cfg.momentum);
        }
        let test_acc = if splits.test.is_empty() {
            f64::NAN
        } else {
            evaluate_top1(&plan, &store, &splits.test)?
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_acc,
        });
    }
    Ok((store, history))
}

/// Fraction of examples whose argmax logit equals the label. Ties resolve
/// to the lowest class index; the result is invariant to how the split is
/// batched.
pub fn evaluate_top1(plan: &Plan, store: &WeightStore, testset: &SplitData) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let counter = PassCounter::new();
    let mut correct = 0usize;
    for batch in testset.batches(64) {
        let record = graph::forward(plan, store, &batch, &counter)?;
        let logits = record.logits();
        let k = logits.shape()[1];
        for (n, &label) in batch.labels.iter().enumerate() {
            let row = &logits.data()[n * k..(n + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}
