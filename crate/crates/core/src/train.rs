//! Shared epoch loop: shuffled mini-batches, one graph per item, gradient
//! accumulation, optional warm-up and clipping, Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear learning-rate ramp over this many updates.
    pub warmup_steps: u64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            adam: AdamConfig::default(),
            warmup_steps: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{stage}_batch_size"), "must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config(format!("{stage}_lr"), "must be positive"));
        }
        Ok(())
    }
}

/// Loss of one training item plus any named components to log alongside it.
pub struct ItemLoss {
    pub loss: Var,
    pub parts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Epoch means of the per-item components, in the order the item reported them.
    pub parts: Vec<f64>,
    pub items: usize,
}

/// Train for `config.epochs` passes over items `0..num_items`. `item_loss`
/// builds the loss of one item in a fresh graph, or returns `None` to skip it.
/// The batch gradient is the mean of the item gradients.
pub fn run_epochs<R, F>(
    store: &mut ParamStore,
    num_items: usize,
    config: &TrainConfig,
    rng: &mut R,
    mut item_loss: F,
) -> Result<Vec<EpochStats>>
where
    R: Rng,
    F: FnMut(&mut Graph, &ParamStore, usize, usize) -> Result<Option<ItemLoss>>,
{
    if num_items == 0 {
        return Err(Error::data("nothing to train on"));
    }
    let mut adam = AdamState::new(store, config.adam);
    let mut order: Vec<usize> = (0..num_items).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        let mut parts: Vec<f64> = Vec::new();
        for batch in order.chunks(config.batch_size) {
            store.zero_grad();
            let mut used = 0usize;
            let mut losses = Vec::with_capacity(batch.len());
            for &item in batch {
                let mut g = Graph::new();
                let Some(l) = item_loss(&mut g, store, epoch, item)? else {
                    continue;
                };
                let value = g.value(l.loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, item {item}")));
                }
                g.backward(l.loss, store)?;
                losses.push(value);
                if parts.len() < l.parts.len() {
                    parts.resize(l.parts.len(), 0.0);
                }
                for (acc, p) in parts.iter_mut().zip(&l.parts) {
                    *acc += p;
                }
                used += 1;
            }
            if used == 0 {
                continue;
            }
            store.scale_grads(1.0 / used as f64);
            if let Some(max) = config.clip_norm {
                let norm = store.grad_norm(store.ids());
                if norm > max {
                    store.scale_grads(max / norm);
                }
            }
            let step = adam.step_count() + 1;
            adam.config.lr = if config.warmup_steps > 0 && step <= config.warmup_steps {
                config.adam.lr * step as f64 / config.warmup_steps as f64
            } else {
                config.adam.lr
            };
            adam.step(store)?;
            total += losses.iter().sum::<f64>();
            count += used;
        }
        if count == 0 {
            return Err(Error::data("every training item was skipped"));
        }
        trace.push(EpochStats {
            epoch,
            loss: total / count as f64,
            parts: parts.iter().map(|p| p / count as f64).collect(),
            items: count,
        });
    }
    store.zero_grad();
    Ok(trace)
}
