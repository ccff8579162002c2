//! Neuron selection from batch-norm scale magnitudes.
//!
//! A throwaway copy of the network is trained on the new task with an L1
//! penalty on its BN scales. Neurons whose scales stay large form the task's
//! sub-network; the rest are disabled during the task's real training, which
//! keeps the rows of the collected representation matrices zero.

use serde::{Deserialize, Serialize};

use crate::datasets::{self, TaskData};
use crate::error::{Error, Result};
use crate::network::{Network, UpdateScope};
use crate::rng::{self, domain};

/// Active-neuron flags for each shared layer's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    layers: Vec<Vec<bool>>,
    k_percent: f64,
}

impl MaskSet {
    /// Every neuron active.
    pub fn full(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&w| vec![true; w]).collect(),
            k_percent: 100.0,
        }
    }

    /// Rebuilds a mask from per-layer active index lists.
    pub fn from_active_indices(widths: &[usize], active: &[Vec<usize>], k_percent: f64) -> Result<Self> {
        if widths.len() != active.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer widths but {} index lists",
                widths.len(),
                active.len()
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        for (&w, idx) in widths.iter().zip(active) {
            let mut flags = vec![false; w];
            for &i in idx {
                *flags.get_mut(i).ok_or_else(|| {
                    Error::ShapeMismatch(format!("neuron index {i} out of range for width {w}"))
                })? = true;
            }
            layers.push(flags);
        }
        Ok(Self { layers, k_percent })
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn k_percent(&self) -> f64 {
        self.k_percent
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn active_indices(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect())
            .collect()
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.iter().filter(|&&a| a).count()).collect()
    }

    #[cfg(test)]
    pub(crate) fn set_active(&mut self, layer: usize, neuron: usize, active: bool) {
        self.layers[layer][neuron] = active;
    }
}

/// Number of neurons kept out of `width` at `k_percent`.
pub fn active_count(width: usize, k_percent: f64) -> usize {
    ((k_percent * width as f64 / 100.0).ceil() as usize).min(width)
}

/// Keeps, per layer, the `ceil(k·b/100)` neurons with the largest
/// magnitudes. Ties go to the lower index.
pub fn build_mask(magnitudes: &[Vec<f64>], k_percent: f64) -> Result<MaskSet> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidK(k_percent));
    }
    let layers = magnitudes
        .iter()
        .map(|mags| {
            let keep = active_count(mags.len(), k_percent);
            let mut order: Vec<usize> = (0..mags.len()).collect();
            order.sort_by(|&a, &b| mags[b].abs().total_cmp(&mags[a].abs()).then(a.cmp(&b)));
            let mut flags = vec![false; mags.len()];
            for &i in &order[..keep] {
                flags[i] = true;
            }
            flags
        })
        .collect();
    Ok(MaskSet { layers, k_percent })
}

/// Settings for the selection pretraining run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    pub mu: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains a copy of `base` on `data` with all neurons active, minimizing
/// cross-entropy plus `mu · Σ|γ|` with plain unprojected SGD, and returns the
/// final `|γ|` of every shared layer. `base` is not modified.
pub fn pretrain_for_selection(
    base: &Network,
    data: &TaskData,
    cfg: &SelectionConfig,
) -> Result<Vec<Vec<f64>>> {
    if data.n_train() < 2 {
        return Err(Error::EmptyDataset);
    }
    if cfg.mu < 0.0 {
        return Err(Error::InvalidConfig(format!("mu must be non-negative, got {}", cfg.mu)));
    }
    let task_id = data.task_id;
    let mut net = base.clone();
    net.ensure_task(task_id);
    let mask = MaskSet::full(net.hidden_widths());
    let run_seed = rng::derive_seed(cfg.seed, domain::PRETRAIN, u64::from(task_id));

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(run_seed, domain::SHUFFLE, epoch as u64);
        for batch in datasets::minibatches(data.n_train(), cfg.batch_size, &mut rng) {
            let (x, y) = data.train_batch(&batch);
            let trace = net.forward_train(&x, task_id, &mask)?;
            let (_, grads) = net.backward(&trace, &y, &mask, cfg.mu)?;
            net.apply_update(task_id, &grads, cfg.lr, UpdateScope::SharedAndTask)?;
        }
    }
    Ok(net
        .task(task_id)?
        .bn
        .iter()
        .map(|bn| bn.scale.iter().map(|g| g.abs()).collect())
        .collect())
}
