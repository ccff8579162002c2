//! Fully-connected network with per-task batch normalization and heads.
//!
//! Each shared layer computes `x⁺ = mask ⊙ ReLU(BN(Wᵀx))`. The weight
//! matrices `W` are shared by all tasks; the batch-norm parameters, running
//! statistics and the linear classifier head belong to a single task.
//! Activations are stored batch-major (one sample per row).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::pruning::MaskSet;
use crate::rng::{self, domain};

pub type TaskId = u32;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters an update touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    SharedAndTask,
    /// Shared weights stay frozen; only the task's BN set and head move.
    TaskOnly,
}

/// Per-task batch normalization state for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    fn new(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `b_L × classes`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Everything private to one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub bn: Vec<BatchNormParams>,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    num_classes: usize,
    seed: u64,
    weights: Vec<DenseMatrix>,
    tasks: BTreeMap<TaskId, TaskParams>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub task_id: TaskId,
    /// `inputs[l]` is the input of shared layer `l`; the last entry feeds the head.
    pub inputs: Vec<DenseMatrix>,
    pub pre_bn: Vec<DenseMatrix>,
    pub normalized: Vec<DenseMatrix>,
    pub post_bn: Vec<DenseMatrix>,
    /// Statistics used for normalization (batch stats in train mode).
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub logits: DenseMatrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Gradients (or any update of the same shape).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DenseMatrix>,
    pub bn_scale: Vec<Vec<f64>>,
    pub bn_shift: Vec<Vec<f64>>,
    pub head_weight: DenseMatrix,
    pub head_bias: Vec<f64>,
}

fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
}

/// Creates a network with `layer_sizes = [a_1, b_1, ..., b_L]`.
pub fn init_network(layer_sizes: &[usize], num_classes_per_task: usize, seed: u64) -> Result<Network> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(
            "need an input size and at least one hidden layer".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArchitecture("layer sizes must be positive".into()));
    }
    if num_classes_per_task == 0 {
        return Err(Error::InvalidArchitecture("need at least one class".into()));
    }
    let mut rng = rng::stream(seed, domain::WEIGHTS, 0);
    let weights = layer_sizes
        .windows(2)
        .map(|w| glorot_uniform(&mut rng, w[0], w[1]))
        .collect();
    Ok(Network {
        sizes: layer_sizes.to_vec(),
        num_classes: num_classes_per_task,
        seed,
        weights,
        tasks: BTreeMap::new(),
    })
}

impl Network {
    pub(crate) fn from_parts(
        sizes: Vec<usize>,
        num_classes: usize,
        seed: u64,
        weights: Vec<DenseMatrix>,
        tasks: BTreeMap<TaskId, TaskParams>,
    ) -> Self {
        Self {
            sizes,
            num_classes,
            seed,
            weights,
            tasks,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of shared layers `L`.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Output widths `b_1..b_L` of the shared layers.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.sizes[1..]
    }

    /// Input widths `a_1..a_L` of the shared layers.
    pub fn layer_input_dims(&self) -> &[usize] {
        &self.sizes[..self.sizes.len() - 1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn task(&self, task_id: TaskId) -> Result<&TaskParams> {
        self.tasks.get(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn task_mut(&mut self, task_id: TaskId) -> Result<&mut TaskParams> {
        self.tasks.get_mut(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn tasks(&self) -> &BTreeMap<TaskId, TaskParams> {
        &self.tasks
    }

    pub fn has_task(&self, task_id: TaskId) -> bool {
        self.tasks.contains_key(&task_id)
    }

    /// Registers the task's BN set and head if missing. Initialization is a
    /// function of `(seed, task_id)` only.
    pub fn ensure_task(&mut self, task_id: TaskId) -> &mut TaskParams {
        let widths = self.hidden_widths().to_vec();
        let (seed, classes) = (self.seed, self.num_classes);
        self.tasks.entry(task_id).or_insert_with(|| {
            let mut rng = rng::stream(seed, domain::TASK_HEAD, u64::from(task_id));
            let last = *widths.last().expect("at least one layer");
            TaskParams {
                bn: widths.iter().map(|&w| BatchNormParams::new(w)).collect(),
                head: Head {
                    weight: glorot_uniform(&mut rng, last, classes),
                    bias: vec![0.0; classes],
                },
            }
        })
    }

    fn check_mask(&self, mask: &MaskSet) -> Result<()> {
        if mask.layers().len() != self.num_layers()
            || mask
                .layers()
                .iter()
                .zip(self.hidden_widths())
                .any(|(m, &w)| m.len() != w)
        {
            return Err(Error::ShapeMismatch(format!(
                "mask widths {:?} vs layer widths {:?}",
                mask.widths(),
                self.hidden_widths()
            )));
        }
        Ok(())
    }

    /// Runs the network on `batch` (one sample per row).
    ///
    /// Train mode normalizes with batch statistics and does not touch the
    /// running statistics; call [`Network::update_running_stats`] with the
    /// returned trace for that. Eval mode uses the task's running statistics.
    pub fn forward(
        &self,
        batch: &DenseMatrix,
        task_id: TaskId,
        mask: &MaskSet,
        mode: Mode,
    ) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        self.check_mask(mask)?;
        let params = self.task(task_id)?;
        let n = batch.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::SingularBatch(n));
        }

        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut pre_bn = Vec::with_capacity(layers);
        let mut normalized = Vec::with_capacity(layers);
        let mut post_bn = Vec::with_capacity(layers);
        let mut means = Vec::with_capacity(layers);
        let mut vars = Vec::with_capacity(layers);
        inputs.push(batch.clone());

        for l in 0..layers {
            let z = inputs[l].matmul(&self.weights[l])?;
            let width = z.cols();
            let bn = &params.bn[l];
            let (mean, var) = match mode {
                Mode::Train => batch_moments(&z),
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = DenseMatrix::zeros(n, width);
            let mut y = DenseMatrix::zeros(n, width);
            let mut out = DenseMatrix::zeros(n, width);
            let active = &mask.layers()[l];
            for i in 0..n {
                let zr = z.row(i);
                for j in 0..width {
                    let h = (zr[j] - mean[j]) * inv_std[j];
                    let yv = bn.scale[j] * h + bn.shift[j];
                    xhat.set(i, j, h);
                    y.set(i, j, yv);
                    if active[j] && yv > 0.0 {
                        out.set(i, j, yv);
                    }
                }
            }
            pre_bn.push(z);
            normalized.push(xhat);
            post_bn.push(y);
            means.push(mean);
            vars.push(var);
            inputs.push(out);
        }

        let head = &params.head;
        let mut logits = inputs[layers].matmul(&head.weight)?;
        for i in 0..n {
            for (v, b) in logits.row_mut(i).iter_mut().zip(&head.bias) {
                *v += b;
            }
        }
        Ok(ForwardTrace {
            mode,
            task_id,
            inputs,
            pre_bn,
            normalized,
            post_bn,
            means,
            vars,
            logits,
        })
    }

    /// Folds a train-mode trace's batch statistics into the task's running
    /// statistics (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) -> Result<()> {
        if trace.mode != Mode::Train {
            return Ok(());
        }
        let n = trace.batch_size() as f64;
        let correction = n / (n - 1.0);
        let params = self.task_mut(trace.task_id)?;
        for (l, bn) in params.bn.iter_mut().enumerate() {
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * trace.means[l][j];
                bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j]
                    + BN_MOMENTUM * trace.vars[l][j] * correction;
            }
        }
        Ok(())
    }

    /// Train-mode forward followed by a running-statistics update.
    pub fn forward_train(
        &mut self,
        batch: &DenseMatrix,
        task_id: TaskId,
        mask: &MaskSet,
    ) -> Result<ForwardTrace> {
        let trace = self.forward(batch, task_id, mask, Mode::Train)?;
        self.update_running_stats(&trace)?;
        Ok(trace)
    }

    /// Cross-entropy loss plus `mu · Σ|γ|` over the task's shared-layer BN
    /// scales, and its gradient with respect to every parameter.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
        mask: &MaskSet,
        mu: f64,
    ) -> Result<(f64, Gradients)> {
        let n = trace.batch_size();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        self.check_mask(mask)?;
        let params = self.task(trace.task_id)?;
        let layers = self.num_layers();
        let classes = self.num_classes;

        // softmax cross-entropy
        let mut dlogits = DenseMatrix::zeros(n, classes);
        let mut data_loss = 0.0;
        for i in 0..n {
            let row = trace.logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            data_loss += log_z - row[labels[i]];
            for (c, &logit) in row.iter().enumerate() {
                let p = (logit - log_z).exp();
                let target = if c == labels[i] { 1.0 } else { 0.0 };
                dlogits.set(i, c, (p - target) / n as f64);
            }
        }
        let penalty: f64 = params
            .bn
            .iter()
            .flat_map(|bn| bn.scale.iter())
            .map(|g| g.abs())
            .sum::<f64>()
            * mu;
        let loss = data_loss / n as f64 + penalty;

        let head = &params.head;
        let head_weight = trace.inputs[layers].t_matmul(&dlogits)?;
        let head_bias: Vec<f64> = (0..classes)
            .map(|c| (0..n).map(|i| dlogits.get(i, c)).sum())
            .collect();
        let mut dx = dlogits.matmul_t(&head.weight)?;

        let mut weights = vec![DenseMatrix::zeros(0, 0); layers];
        let mut bn_scale = vec![Vec::new(); layers];
        let mut bn_shift = vec![Vec::new(); layers];

        for l in (0..layers).rev() {
            let width = self.sizes[l + 1];
            let bn = &params.bn[l];
            let active = &mask.layers()[l];
            let y = &trace.post_bn[l];
            let xhat = &trace.normalized[l];

            let mut dy = DenseMatrix::zeros(n, width);
            for i in 0..n {
                for (j, &on) in active.iter().enumerate() {
                    if on && y.get(i, j) > 0.0 {
                        dy.set(i, j, dx.get(i, j));
                    }
                }
            }
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for i in 0..n {
                for j in 0..width {
                    let d = dy.get(i, j);
                    dgamma[j] += d * xhat.get(i, j);
                    dbeta[j] += d;
                }
            }
            let inv_std: Vec<f64> = trace.vars[l]
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let mut dz = DenseMatrix::zeros(n, width);
            match trace.mode {
                Mode::Train => {
                    // dz = (γ/σ)(dy − mean(dy) − x̂·mean(dy·x̂))
                    let nf = n as f64;
                    for j in 0..width {
                        let k = bn.scale[j] * inv_std[j];
                        let mean_dy = dbeta[j] / nf;
                        let mean_dy_xhat = dgamma[j] / nf;
                        for i in 0..n {
                            let v = k * (dy.get(i, j) - mean_dy - xhat.get(i, j) * mean_dy_xhat);
                            dz.set(i, j, v);
                        }
                    }
                }
                Mode::Eval => {
                    for i in 0..n {
                        for (j, (&g, &s)) in bn.scale.iter().zip(&inv_std).enumerate() {
                            dz.set(i, j, dy.get(i, j) * g * s);
                        }
                    }
                }
            }
            if mu != 0.0 {
                for (d, g) in dgamma.iter_mut().zip(&bn.scale) {
                    *d += mu * sign(*g);
                }
            }
            weights[l] = trace.inputs[l].t_matmul(&dz)?;
            if l > 0 {
                dx = dz.matmul_t(&self.weights[l])?;
            }
            bn_scale[l] = dgamma;
            bn_shift[l] = dbeta;
        }

        Ok((
            loss,
            Gradients {
                weights,
                bn_scale,
                bn_shift,
                head_weight,
                head_bias,
            },
        ))
    }

    /// `params ← params − lr · update` for the parameters in `scope`.
    pub fn apply_update(
        &mut self,
        task_id: TaskId,
        update: &Gradients,
        lr: f64,
        scope: UpdateScope,
    ) -> Result<()> {
        self.check_update_shapes(task_id, update)?;
        if scope == UpdateScope::SharedAndTask {
            for (w, g) in self.weights.iter_mut().zip(&update.weights) {
                for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *wv -= lr * gv;
                }
            }
        }
        let params = self.task_mut(task_id)?;
        for (l, bn) in params.bn.iter_mut().enumerate() {
            for (p, g) in bn.scale.iter_mut().zip(&update.bn_scale[l]) {
                *p -= lr * g;
            }
            for (p, g) in bn.shift.iter_mut().zip(&update.bn_shift[l]) {
                *p -= lr * g;
            }
        }
        for (p, g) in params
            .head
            .weight
            .data_mut()
            .iter_mut()
            .zip(update.head_weight.data())
        {
            *p -= lr * g;
        }
        for (p, g) in params.head.bias.iter_mut().zip(&update.head_bias) {
            *p -= lr * g;
        }
        Ok(())
    }

    fn check_update_shapes(&self, task_id: TaskId, u: &Gradients) -> Result<()> {
        let params = self.task(task_id)?;
        let ok = u.weights.len() == self.weights.len()
            && u.weights.iter().zip(&self.weights).all(|(a, b)| a.shape() == b.shape())
            && u.bn_scale.len() == params.bn.len()
            && u.bn_shift.len() == params.bn.len()
            && params.bn.iter().enumerate().all(|(l, bn)| {
                u.bn_scale[l].len() == bn.scale.len() && u.bn_shift[l].len() == bn.shift.len()
            })
            && u.head_weight.shape() == params.head.weight.shape()
            && u.head_bias.len() == params.head.bias.len();
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("update does not match parameter shapes".into()))
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-column mean and biased variance.
fn batch_moments(z: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, w) = z.shape();
    let nf = n as f64;
    let mut mean = vec![0.0; w];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; w];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    (mean, var)
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let widths = net.hidden_widths();
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            bn_scale: widths.iter().map(|&w| vec![0.0; w]).collect(),
            bn_shift: widths.iter().map(|&w| vec![0.0; w]).collect(),
            head_weight: DenseMatrix::zeros(*widths.last().unwrap_or(&0), net.num_classes),
            head_bias: vec![0.0; net.num_classes],
        }
    }
}
