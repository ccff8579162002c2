//! Per-layer feature representation matrices of past tasks.
//!
//! For each shared layer the tracker keeps the uncentered second moment of
//! that layer's inputs over every absorbed sample,
//! `F̄ = (1/n̄) Σ_p F_p F_pᵀ`, stored already divided by `n̄`. Its null space
//! is where the layer's weights may move without changing any past output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::network::{Mode, Network, TaskId};
use crate::pruning::MaskSet;

/// Samples per eval-mode forward pass during collection.
const COLLECT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub rank: usize,
    pub null_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepTracker {
    fbar: Vec<DenseMatrix>,
    seen_samples: usize,
    rel_tol: f64,
    /// One entry per absorbed task: the per-layer report right after it.
    history: Vec<Vec<LayerReport>>,
}

impl RepTracker {
    /// Empty tracker for layers with input widths `dims` (`a_1..a_L`).
    pub fn new(dims: &[usize], rel_tol: f64) -> Self {
        Self {
            fbar: dims.iter().map(|&a| DenseMatrix::zeros(a, a)).collect(),
            seen_samples: 0,
            rel_tol,
            history: Vec::new(),
        }
    }

    pub(crate) fn from_parts(fbar: Vec<DenseMatrix>, seen_samples: usize, rel_tol: f64) -> Self {
        Self {
            fbar,
            seen_samples,
            rel_tol,
            history: Vec::new(),
        }
    }

    pub fn fbar(&self) -> &[DenseMatrix] {
        &self.fbar
    }

    pub fn seen_samples(&self) -> usize {
        self.seen_samples
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol
    }

    pub fn history(&self) -> &[Vec<LayerReport>] {
        &self.history
    }

    pub fn dims(&self) -> Vec<usize> {
        self.fbar.iter().map(DenseMatrix::rows).collect()
    }

    /// Folds one task's representations into the running average:
    /// `F̄ ← (n̄·F̄ + F Fᵀ) / (n̄ + n_t)`.
    pub fn absorb_task(&mut self, reps: &[DenseMatrix], n_t: usize) -> Result<()> {
        if reps.len() != self.fbar.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} representation matrices for {} layers",
                reps.len(),
                self.fbar.len()
            )));
        }
        for (f, fbar) in reps.iter().zip(&self.fbar) {
            if f.rows() != fbar.rows() || f.cols() != n_t {
                return Err(Error::ShapeMismatch(format!(
                    "representation {}x{} for layer width {} and {n_t} samples",
                    f.rows(),
                    f.cols(),
                    fbar.rows()
                )));
            }
        }
        if n_t == 0 {
            return Err(Error::EmptyDataset);
        }
        let old = self.seen_samples as f64;
        let total = old + n_t as f64;
        for (f, fbar) in reps.iter().zip(self.fbar.iter_mut()) {
            let gram = f.matmul_t(f)?;
            let updated = DenseMatrix::from_fn(fbar.rows(), fbar.cols(), |i, j| {
                (old * fbar.get(i, j) + gram.get(i, j)) / total
            });
            *fbar = updated.symmetrized()?;
        }
        self.seen_samples += n_t;
        let report = self.null_report(self.rel_tol)?;
        self.history.push(report);
        Ok(())
    }

    /// Numerical rank and null-space dimension of every layer's `F̄`.
    pub fn null_report(&self, rel_tol: f64) -> Result<Vec<LayerReport>> {
        self.fbar
            .iter()
            .map(|m| {
                let s = linalg::sym_eig(m)?;
                let rank = linalg::numerical_rank(&s, rel_tol);
                Ok(LayerReport {
                    rank,
                    null_dim: m.rows() - rank,
                })
            })
            .collect()
    }
}

/// Layer-input representation matrices (`a_l × n`, one sample per column)
/// of `data` under `task_id`'s frozen BN set and `mask`.
///
/// The first matrix is the raw input. Evaluation is chunked, and since
/// eval-mode samples are independent the result equals a single pass.
pub fn collect_representations(
    net: &Network,
    data: &DenseMatrix,
    task_id: TaskId,
    mask: &MaskSet,
) -> Result<Vec<DenseMatrix>> {
    net.task(task_id)?;
    let n = data.rows();
    let dims = net.layer_input_dims().to_vec();
    let mut reps: Vec<DenseMatrix> = dims.iter().map(|&a| DenseMatrix::zeros(a, n)).collect();
    let mut start = 0;
    while start < n {
        let end = (start + COLLECT_CHUNK).min(n);
        let rows: Vec<f64> = (start..end).flat_map(|i| data.row(i).iter().copied()).collect();
        let chunk = DenseMatrix::new(end - start, data.cols(), rows)?;
        let trace = net.forward(&chunk, task_id, mask, Mode::Eval)?;
        for (l, rep) in reps.iter_mut().enumerate() {
            let x = &trace.inputs[l];
            for i in 0..x.rows() {
                for (k, &v) in x.row(i).iter().enumerate() {
                    rep.set(k, start + i, v);
                }
            }
        }
        start = end;
    }
    Ok(reps)
}
