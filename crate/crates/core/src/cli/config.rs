//! Experiment configuration file (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{self, TaskSequence};
use crate::error::{Error, Result};
use crate::trainer::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization and shuffling.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainSettings,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Also write binary network and tracker checkpoints per method.
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Widths of the shared hidden layers; the input width comes from the data.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussian {
        dim: usize,
        classes_per_task: usize,
        tasks: usize,
        n_train: usize,
        n_test: usize,
        separation: f64,
    },
    /// One Gaussian task whose features are re-permuted for every task.
    Permuted {
        dim: usize,
        classes: usize,
        tasks: usize,
        n_train: usize,
        n_test: usize,
        separation: f64,
    },
    /// Relative paths resolve against the config file's directory.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        classes_per_task: usize,
        tasks: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

fn default_true() -> bool {
    true
}

/// Training hyperparameters; seed and method come from the enclosing config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub mu: f64,
    pub k_percent: f64,
    pub rel_tol: f64,
    pub pretrain_epochs: usize,
    pub lowrank_energy: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_milestones: d.lr_milestones,
            mu: d.mu,
            k_percent: d.k_percent,
            rel_tol: d.rel_tol,
            pretrain_epochs: d.pretrain_epochs,
            lowrank_energy: d.lowrank_energy,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_milestones: t.lr_milestones.clone(),
            mu: t.mu,
            k_percent: t.k_percent,
            rel_tol: t.rel_tol,
            pretrain_epochs: t.pretrain_epochs,
            lowrank_energy: t.lowrank_energy,
            seed: self.seed,
            method,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must list at least one method");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(&format!("method {m} listed twice"));
            }
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            return bad("architecture.hidden must list positive widths");
        }
        self.train_config(self.methods[0]).validate()?;
        match &self.dataset {
            DatasetSpec::Gaussian {
                dim,
                classes_per_task,
                tasks,
                n_train,
                n_test,
                separation,
            }
            | DatasetSpec::Permuted {
                dim,
                classes: classes_per_task,
                tasks,
                n_train,
                n_test,
                separation,
            } => {
                if [*dim, *classes_per_task, *tasks, *n_train, *n_test].contains(&0) {
                    return bad("dataset counts must be positive");
                }
                if *n_train < 2 {
                    return bad("dataset.n_train must be at least 2");
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return bad("dataset.separation must be finite and non-negative");
                }
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                classes_per_task,
                tasks,
                ..
            } => {
                if *classes_per_task == 0 || *tasks == 0 {
                    return bad("dataset.classes_per_task and dataset.tasks must be positive");
                }
                if test_images.is_some() != test_labels.is_some() {
                    return bad("dataset.test_images and dataset.test_labels go together");
                }
            }
        }
        Ok(())
    }

    /// Builds the task sequence. `base_dir` anchors relative IDX paths.
    pub fn load_tasks(&self, base_dir: &Path) -> Result<TaskSequence> {
        match &self.dataset {
            DatasetSpec::Gaussian {
                dim,
                classes_per_task,
                tasks,
                n_train,
                n_test,
                separation,
            } => datasets::gen_gaussian_tasks(
                *dim,
                *classes_per_task,
                *tasks,
                *n_train,
                *n_test,
                *separation,
                self.seed,
            ),
            DatasetSpec::Permuted {
                dim,
                classes,
                tasks,
                n_train,
                n_test,
                separation,
            } => {
                let mut base =
                    datasets::gen_gaussian_tasks(*dim, *classes, 1, *n_train, *n_test, *separation, self.seed)?;
                let mut seq = datasets::gen_permuted_tasks(&base.tasks.remove(0), *tasks, self.seed)?;
                seq.provenance["base"] = base.provenance;
                Ok(seq)
            }
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                classes_per_task,
                tasks,
                normalize,
            } => {
                let abs = |p: &PathBuf| base_dir.join(p);
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => datasets::load_idx_train_test(
                        (&abs(images), &abs(labels)),
                        (&abs(ti), &abs(tl)),
                        *classes_per_task,
                        *tasks,
                        *normalize,
                    ),
                    _ => datasets::load_idx_split(
                        &abs(images),
                        &abs(labels),
                        *classes_per_task,
                        *tasks,
                        *normalize,
                    ),
                }
            }
        }
    }
}
