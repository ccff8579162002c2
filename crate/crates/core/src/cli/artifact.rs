//! Result artifacts written by `run` and read by `inspect` / `compare`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::network::TaskId;
use crate::trainer::{
    AccuracyMatrix, AuditRecord, ExperimentState, Method, ProjectorKind, RankRecord, STABILITY_BUDGET,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultArtifact {
    pub schema_version: u32,
    /// Unix seconds; the only field that differs between identical runs.
    pub generated_at: u64,
    pub method: Method,
    pub projector: ProjectorKind,
    pub config: ExperimentConfig,
    pub provenance: serde_json::Value,
    /// Input widths `a_l` of the shared layers.
    pub layer_widths: Vec<usize>,
    pub accuracy_matrix: AccuracyMatrix,
    pub acc: f64,
    pub bwt: f64,
    pub rank_trajectory: Vec<RankRecord>,
    pub stability: Stability,
    pub masks: Vec<MaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub budget: f64,
    pub audits: Vec<AuditRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub task: TaskId,
    pub k_percent: f64,
    /// Active neuron indices per shared layer.
    pub active: Vec<Vec<usize>>,
}

impl ResultArtifact {
    pub fn from_state(
        config: &ExperimentConfig,
        provenance: serde_json::Value,
        state: &ExperimentState,
        generated_at: u64,
    ) -> Result<Self> {
        let metrics = state.metrics()?;
        let method = state.config.method;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            generated_at,
            method,
            projector: method.projector_kind(),
            config: config.clone(),
            provenance,
            layer_widths: state.network.layer_input_dims().to_vec(),
            accuracy_matrix: state.accuracy.clone(),
            acc: metrics.acc,
            bwt: metrics.bwt,
            rank_trajectory: state.rank_trajectory.clone(),
            stability: Stability {
                budget: STABILITY_BUDGET,
                audits: state.audits.clone(),
            },
            masks: state
                .masks
                .iter()
                .map(|(&task, m)| MaskRecord {
                    task,
                    k_percent: m.k_percent(),
                    active: m.active_indices(),
                })
                .collect(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if a.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                a.schema_version
            )));
        }
        Ok(a)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Largest past-task drift audited while training `task`.
    pub fn audit_for(&self, task: TaskId) -> f64 {
        self.stability
            .audits
            .iter()
            .filter(|a| a.task == task)
            .fold(0.0, |m, a| m.max(a.drift))
    }

    /// `task,layer,rank,null_dim,audit` rows, layers numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,layer,rank,null_dim,audit\n");
        for rec in &self.rank_trajectory {
            let audit = self.audit_for(rec.task);
            for (l, r) in rec.layers.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{:e}", rec.task, l + 1, r.rank, r.null_dim, audit);
            }
        }
        out
    }

    /// Dataset provenance plus everything else that must match for two
    /// artifacts to be comparable.
    pub fn comparison_key(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": self.provenance,
            "seed": self.config.seed,
            "layer_widths": self.layer_widths,
            "hidden": self.config.architecture.hidden,
        })
    }
}
