//! Sequential task training.
//!
//! Training task `t` runs three stages:
//!
//! 1. (`t > 1`) collect the representations of task `t-1`'s training data
//!    through its own sub-network and fold them into the tracker;
//! 2. choose task `t`'s sub-network from BN-scale magnitudes of a penalized
//!    pretraining copy (LRFR only);
//! 3. train on task `t` with every shared-weight gradient left-multiplied by
//!    the projector built from the tracker.
//!
//! The baselines reuse the same loop: `nscl_full` skips stage 2,
//! `lowrank_baseline` swaps the exact null-space projector for an
//! energy-truncated one, and `finetune` does not project at all.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, TaskData};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::network::{self, Gradients, Mode, Network, TaskId, UpdateScope};
use crate::pruning::{self, MaskSet, SelectionConfig};
use crate::representation::{self, LayerReport, RepTracker};
use crate::rng::{self, domain};

/// Logit drift allowed on past tasks by the stability audit.
pub const STABILITY_BUDGET: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exact null-space projection with per-task neuron selection.
    Lrfr,
    /// Exact null-space projection, all neurons active.
    NsclFull,
    /// Projection onto the complement of the leading principal subspace.
    LowrankBaseline,
    /// No projection.
    Finetune,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lrfr, Method::NsclFull, Method::LowrankBaseline, Method::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lrfr => "lrfr",
            Method::NsclFull => "nscl_full",
            Method::LowrankBaseline => "lowrank_baseline",
            Method::Finetune => "finetune",
        }
    }

    pub fn projector_kind(self) -> ProjectorKind {
        match self {
            Method::Lrfr | Method::NsclFull => ProjectorKind::NullSpace,
            Method::LowrankBaseline => ProjectorKind::LowrankTruncation,
            Method::Finetune => ProjectorKind::Identity,
        }
    }

    pub fn selects_neurons(self) -> bool {
        self == Method::Lrfr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    NullSpace,
    LowrankTruncation,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate halves at each listed epoch.
    pub lr_milestones: Vec<usize>,
    /// L1 weight on BN scales during selection pretraining.
    pub mu: f64,
    /// Percentage of neurons kept active per layer.
    pub k_percent: f64,
    pub rel_tol: f64,
    pub pretrain_epochs: usize,
    /// Spectral energy kept by `lowrank_baseline`.
    pub lowrank_energy: f64,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 0.05,
            lr_milestones: vec![20, 30],
            mu: 0.1,
            k_percent: 50.0,
            rel_tol: linalg::DEFAULT_REL_TOL,
            pretrain_epochs: 20,
            lowrank_energy: 0.97,
            seed: 0,
            method: Method::Lrfr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad(format!("k_percent must be in (0, 100], got {}", self.k_percent));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return bad(format!("rel_tol must be in (0, 1), got {}", self.rel_tol));
        }
        if !(self.lowrank_energy > 0.0 && self.lowrank_energy <= 1.0) {
            return bad(format!("lowrank_energy must be in (0, 1], got {}", self.lowrank_energy));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// `rows[t-1][p-1]` is the test accuracy on task `p` after training task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub bwt: f64,
}

/// Average final accuracy and backward transfer.
pub fn compute_metrics(r: &AccuracyMatrix) -> Result<Metrics> {
    let t = r.rows.len();
    if t == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    for (i, row) in r.rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {} has {} entries, expected {}",
                i + 1,
                row.len(),
                i + 1
            )));
        }
    }
    let last = &r.rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = if t == 1 {
        0.0
    } else {
        (0..t - 1).map(|p| last[p] - r.rows[p][p]).sum::<f64>() / (t - 1) as f64
    };
    Ok(Metrics { acc, bwt })
}

/// Left-multiplies each shared-layer weight gradient by its projector.
/// BN and head gradients are task-private and pass through.
pub fn project_gradients(grads: &Gradients, projectors: &[DenseMatrix]) -> Result<Gradients> {
    if projectors.len() != grads.weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} projectors for {} layers",
            projectors.len(),
            grads.weights.len()
        )));
    }
    let weights = grads
        .weights
        .iter()
        .zip(projectors)
        .map(|(g, p)| {
            if p.shape() != (g.rows(), g.rows()) {
                return Err(Error::ShapeMismatch(format!(
                    "projector {:?} for gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            p.matmul(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients {
        weights,
        ..grads.clone()
    })
}

/// Test accuracy of one task through its own BN set, head and mask.
pub fn task_accuracy(net: &Network, task: &TaskData, mask: &MaskSet) -> Result<f64> {
    let n = task.test_x.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let trace = net.forward(&task.test_x, task.task_id, mask, Mode::Eval)?;
    let correct = (0..n)
        .filter(|&i| argmax(trace.logits.row(i)) == task.test_y[i])
        .count();
    Ok(correct as f64 / n as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-abs difference of eval-mode logits on `past`'s training inputs
/// between `current` and `snapshot`.
pub fn stability_audit(
    current: &Network,
    snapshot: &Network,
    past: &TaskData,
    mask: &MaskSet,
) -> Result<f64> {
    let now = current.forward(&past.train_x, past.task_id, mask, Mode::Eval)?;
    let before = snapshot.forward(&past.train_x, past.task_id, mask, Mode::Eval)?;
    Ok(now.logits.sub(&before.logits)?.max_abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    /// Tasks `1..=task` have been absorbed.
    pub task: TaskId,
    pub layers: Vec<LayerReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Task whose training was audited.
    pub task: TaskId,
    pub past_task: TaskId,
    pub drift: f64,
}

/// What a training step looked like, for instrumentation.
pub struct StepInfo<'a> {
    pub task_id: TaskId,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub raw: &'a Gradients,
    pub projected: &'a Gradients,
    pub projectors: &'a [DenseMatrix],
    /// The tracker's matrices the projectors were built from.
    pub fbar: &'a [DenseMatrix],
}

#[derive(Clone, Debug)]
pub struct ExperimentState {
    pub config: TrainConfig,
    pub network: Network,
    pub tracker: RepTracker,
    pub masks: BTreeMap<TaskId, MaskSet>,
    pub accuracy: AccuracyMatrix,
    pub rank_trajectory: Vec<RankRecord>,
    pub audits: Vec<AuditRecord>,
    completed: TaskId,
    absorbed: TaskId,
}

impl ExperimentState {
    /// `layer_sizes = [input, hidden_1, .., hidden_L]`.
    pub fn new(layer_sizes: &[usize], num_classes: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = network::init_network(layer_sizes, num_classes, config.seed)?;
        let tracker = RepTracker::new(network.layer_input_dims(), config.rel_tol);
        Ok(Self {
            config,
            network,
            tracker,
            masks: BTreeMap::new(),
            accuracy: AccuracyMatrix::default(),
            rank_trajectory: Vec::new(),
            audits: Vec::new(),
            completed: 0,
            absorbed: 0,
        })
    }

    pub fn completed_tasks(&self) -> TaskId {
        self.completed
    }

    pub fn mask(&self, task_id: TaskId) -> Result<&MaskSet> {
        self.masks.get(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    /// Trains the last task of `seen`; earlier entries must be tasks
    /// `1..t-1` in order.
    pub fn train_task(&mut self, seen: &[TaskData]) -> Result<()> {
        self.train_task_observed(seen, &mut |_| {})
    }

    pub fn train_task_observed(
        &mut self,
        seen: &[TaskData],
        observer: &mut dyn FnMut(&StepInfo<'_>),
    ) -> Result<()> {
        let task = seen.last().ok_or(Error::EmptyDataset)?;
        let t = self.completed + 1;
        for (i, d) in seen.iter().enumerate() {
            if d.task_id != i as TaskId + 1 || task.task_id != t {
                return Err(Error::OutOfOrderTask {
                    expected: t,
                    got: task.task_id,
                });
            }
        }
        if task.n_train() < 2 {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.config.clone();

        // Stage 1: fold the previous task into the tracker.
        if t > 1 {
            self.absorb(&seen[t as usize - 2])?;
        }

        // Stage 2: sub-network selection.
        let widths = self.network.hidden_widths().to_vec();
        let mask = if cfg.method.selects_neurons() {
            let sel = SelectionConfig {
                mu: cfg.mu,
                epochs: cfg.pretrain_epochs,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
            };
            let magnitudes = pruning::pretrain_for_selection(&self.network, task, &sel)?;
            pruning::build_mask(&magnitudes, cfg.k_percent)?
        } else {
            MaskSet::full(&widths)
        };

        // Stage 3: projected training.
        let projectors = self.projectors()?;
        self.network.ensure_task(t);
        let snapshot = self.network.clone();
        let train_seed = rng::derive_seed(cfg.seed, domain::SHUFFLE, u64::from(t));
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let mut rng = rng::stream(train_seed, domain::SHUFFLE, epoch as u64);
            for batch in datasets::minibatches(task.n_train(), cfg.batch_size, &mut rng) {
                let (x, y) = task.train_batch(&batch);
                let trace = self.network.forward_train(&x, t, &mask)?;
                let (_, grads) = self.network.backward(&trace, &y, &mask, 0.0)?;
                let projected = match cfg.method.projector_kind() {
                    ProjectorKind::Identity => grads.clone(),
                    _ => project_gradients(&grads, &projectors)?,
                };
                observer(&StepInfo {
                    task_id: t,
                    epoch,
                    step,
                    lr,
                    raw: &grads,
                    projected: &projected,
                    projectors: &projectors,
                    fbar: self.tracker.fbar(),
                });
                self.network
                    .apply_update(t, &projected, lr, UpdateScope::SharedAndTask)?;
                step += 1;
            }
        }
        self.masks.insert(t, mask);

        for past in &seen[..seen.len() - 1] {
            let drift = stability_audit(&self.network, &snapshot, past, self.mask(past.task_id)?)?;
            self.audits.push(AuditRecord {
                task: t,
                past_task: past.task_id,
                drift,
            });
        }
        let row = self.evaluate(seen)?;
        self.accuracy.push_row(row);
        self.completed = t;
        Ok(())
    }

    /// Absorbs the last trained task into the tracker so the rank trajectory
    /// covers every task. Idempotent.
    pub fn finish(&mut self, seen: &[TaskData]) -> Result<()> {
        if self.absorbed < self.completed {
            let last = seen
                .get(self.completed as usize - 1)
                .ok_or(Error::UnknownTask(self.completed))?;
            self.absorb(last)?;
        }
        Ok(())
    }

    fn absorb(&mut self, task: &TaskData) -> Result<()> {
        if task.task_id != self.absorbed + 1 {
            return Err(Error::OutOfOrderTask {
                expected: self.absorbed + 1,
                got: task.task_id,
            });
        }
        let mask = self.mask(task.task_id)?.clone();
        let reps =
            representation::collect_representations(&self.network, &task.train_x, task.task_id, &mask)?;
        self.tracker.absorb_task(&reps, task.n_train())?;
        let layers = self
            .tracker
            .history()
            .last()
            .cloned()
            .unwrap_or_default();
        self.rank_trajectory.push(RankRecord {
            task: task.task_id,
            layers,
        });
        self.absorbed = task.task_id;
        Ok(())
    }

    /// Per-layer projectors for the next task's updates.
    pub fn projectors(&self) -> Result<Vec<DenseMatrix>> {
        let cfg = &self.config;
        self.tracker
            .fbar()
            .iter()
            .map(|m| match cfg.method.projector_kind() {
                ProjectorKind::NullSpace => linalg::null_projector(m, cfg.rel_tol),
                ProjectorKind::LowrankTruncation => {
                    linalg::lowrank_truncation_projector(m, cfg.lowrank_energy)
                }
                ProjectorKind::Identity => Ok(DenseMatrix::identity(m.rows())),
            })
            .collect()
    }

    /// Test accuracy on each of `tasks` with its own head, BN set and mask.
    pub fn evaluate(&self, tasks: &[TaskData]) -> Result<Vec<f64>> {
        tasks
            .iter()
            .map(|task| task_accuracy(&self.network, task, self.mask(task.task_id)?))
            .collect()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.accuracy)
    }

    /// Largest audited drift recorded while training `task`.
    pub fn max_drift(&self, task: TaskId) -> f64 {
        self.audits
            .iter()
            .filter(|a| a.task == task)
            .fold(0.0, |m, a| m.max(a.drift))
    }
}

/// Trains every task of `tasks` in order and absorbs the last one.
pub fn run_experiment(
    tasks: &[TaskData],
    hidden: &[usize],
    config: TrainConfig,
) -> Result<ExperimentState> {
    let first = tasks.first().ok_or(Error::EmptyDataset)?;
    let mut sizes = vec![first.dim()];
    sizes.extend_from_slice(hidden);
    let mut state = ExperimentState::new(&sizes, first.num_classes, config)?;
    for t in 1..=tasks.len() {
        state.train_task(&tasks[..t])?;
    }
    state.finish(tasks)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_gaussian_tasks;

    fn small_cfg(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            pretrain_epochs: 2,
            batch_size: 16,
            lr_milestones: vec![2],
            method,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metrics_examples() {
        let m = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]])).unwrap();
        assert!((m.acc - 0.75).abs() < 1e-15);
        assert!((m.bwt + 0.1).abs() < 1e-15);

        let m = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.8]])).unwrap();
        assert_eq!(m.bwt, 0.0);

        let m = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.9]])).unwrap();
        assert_eq!((m.acc, m.bwt), (0.9, 0.0));

        assert!(matches!(
            compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8]])),
            Err(Error::IncompleteMatrix(_))
        ));
        assert!(compute_metrics(&AccuracyMatrix::default()).is_err());
    }

    #[test]
    fn lr_schedule_halves_at_milestones() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_milestones: vec![2, 4],
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { lr: -0.1, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
            TrainConfig { k_percent: 0.0, ..TrainConfig::default() },
            TrainConfig { rel_tol: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_milestones: vec![3, 3], ..TrainConfig::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn identity_and_zero_projection() {
        let mut net = network::init_network(&[3, 4, 2], 2, 0).unwrap();
        net.ensure_task(1);
        let mask = MaskSet::full(&[4, 2]);
        let x = DenseMatrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * (j as f64 + 1.0) * 0.3);
        let trace = net.forward(&x, 1, &mask, Mode::Train).unwrap();
        let (_, g) = net.backward(&trace, &[0, 1, 0, 1, 1], &mask, 0.0).unwrap();

        let ident = [DenseMatrix::identity(3), DenseMatrix::identity(4)];
        assert_eq!(project_gradients(&g, &ident).unwrap(), g);

        let zero = [DenseMatrix::zeros(3, 3), DenseMatrix::zeros(4, 4)];
        let p = project_gradients(&g, &zero).unwrap();
        assert!(p.weights.iter().all(|w| w.max_abs() == 0.0));
        assert_eq!(p.head_weight, g.head_weight);
        assert_eq!(p.bn_scale, g.bn_scale);

        assert!(project_gradients(&g, &ident[..1]).is_err());
        assert!(project_gradients(&g, &[DenseMatrix::identity(4), DenseMatrix::identity(4)]).is_err());
    }

    #[test]
    fn out_of_order_task_is_rejected() {
        let seq = gen_gaussian_tasks(4, 2, 2, 20, 10, 3.0, 0).unwrap();
        let mut st = ExperimentState::new(&[4, 6], 2, small_cfg(Method::Finetune)).unwrap();
        assert!(matches!(
            st.train_task(&seq.tasks[1..2]),
            Err(Error::OutOfOrderTask { expected: 1, got: 2 })
        ));
        st.train_task(&seq.tasks[..1]).unwrap();
        assert!(st.train_task(&seq.tasks[..1]).is_err());
    }

    #[test]
    fn first_task_trains_unprojected_with_mask() {
        let seq = gen_gaussian_tasks(4, 2, 1, 40, 20, 4.0, 2).unwrap();
        let mut st = ExperimentState::new(&[4, 8, 8], 2, small_cfg(Method::Lrfr)).unwrap();
        let mut identity_seen = true;
        st.train_task_observed(&seq.tasks, &mut |info| {
            identity_seen &= info
                .projectors
                .iter()
                .all(|p| *p == DenseMatrix::identity(p.rows()));
        })
        .unwrap();
        assert!(identity_seen);
        assert_eq!(st.mask(1).unwrap().active_counts(), vec![4, 4]);
        assert_eq!(st.tracker.seen_samples(), 0);
        st.finish(&seq.tasks).unwrap();
        st.finish(&seq.tasks).unwrap();
        assert_eq!(st.tracker.seen_samples(), 40);
        assert_eq!(st.rank_trajectory.len(), 1);
    }

    #[test]
    fn evaluation_is_pure_and_audit_zero_without_training() {
        let seq = gen_gaussian_tasks(4, 2, 2, 30, 20, 3.0, 5).unwrap();
        let st = run_experiment(&seq.tasks, &[6, 6], small_cfg(Method::NsclFull)).unwrap();
        assert_eq!(st.evaluate(&seq.tasks).unwrap(), st.evaluate(&seq.tasks).unwrap());
        let snap = st.network.clone();
        let d = stability_audit(&st.network, &snap, &seq.tasks[0], st.mask(1).unwrap()).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(st.accuracy.num_tasks(), 2);
        assert_eq!(st.rank_trajectory.len(), 2);
        assert_eq!(st.audits.len(), 1);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
