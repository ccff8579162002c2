//! Task sequences: synthetic Gaussian tasks, permuted-feature tasks and
//! class-split IDX corpora.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::TaskId;
use crate::rng::{self, domain};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Every `IDX_HOLDOUT_STRIDE`-th sample of a task goes to its test split
/// when the corpus has no separate test files.
pub const IDX_HOLDOUT_STRIDE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: TaskId,
    pub num_classes: usize,
    /// One sample per row.
    pub train_x: DenseMatrix,
    pub train_y: Vec<usize>,
    pub test_x: DenseMatrix,
    pub test_y: Vec<usize>,
}

impl TaskData {
    pub fn dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn n_train(&self) -> usize {
        self.train_x.rows()
    }

    /// Rows `indices` of the training split.
    pub fn train_batch(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        gather(&self.train_x, &self.train_y, indices)
    }
}

fn gather(x: &DenseMatrix, y: &[usize], indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
    let d = x.cols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(x.row(i));
    }
    let bx = DenseMatrix::new(indices.len(), d, data).expect("rows of a finite matrix");
    (bx, indices.iter().map(|&i| y[i]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    /// Ordered, `task_id`s `1..=T`.
    pub tasks: Vec<TaskData>,
    /// Generator parameters and seed, echoed into result artifacts.
    pub provenance: serde_json::Value,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tasks.first().map_or(0, TaskData::dim)
    }

    pub fn num_classes(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.num_classes)
    }
}

/// Gaussian class clusters: each task draws its class means uniformly on
/// the sphere of radius `separation` and samples unit-variance Gaussians
/// around them. Labels cycle `0, 1, .., c-1` so classes are balanced.
pub fn gen_gaussian_tasks(
    dim: usize,
    classes_per_task: usize,
    tasks: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskSequence> {
    if dim == 0 || classes_per_task == 0 || tasks == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidSpec("all counts must be positive".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let seq = (1..=tasks as TaskId)
        .map(|task_id| {
            let mut rng = rng::stream(seed, domain::TASK_DATA, u64::from(task_id));
            let means: Vec<Vec<f64>> = (0..classes_per_task)
                .map(|_| random_on_sphere(&mut rng, dim, separation))
                .collect();
            let (train_x, train_y) = sample_clusters(&mut rng, &means, n_train);
            let (test_x, test_y) = sample_clusters(&mut rng, &means, n_test);
            TaskData {
                task_id,
                num_classes: classes_per_task,
                train_x,
                train_y,
                test_x,
                test_y,
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks: seq,
        provenance: json!({
            "generator": "gaussian",
            "dim": dim,
            "classes_per_task": classes_per_task,
            "tasks": tasks,
            "n_train": n_train,
            "n_test": n_test,
            "separation": separation,
            "seed": seed,
        }),
    })
}

fn random_on_sphere<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn sample_clusters<R: Rng>(rng: &mut R, means: &[Vec<f64>], n: usize) -> (DenseMatrix, Vec<usize>) {
    let dim = means[0].len();
    let labels: Vec<usize> = (0..n).map(|i| i % means.len()).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &y in &labels {
        for m in &means[y] {
            let noise: f64 = StandardNormal.sample(rng);
            data.push(m + noise);
        }
    }
    (DenseMatrix::new(n, dim, data).expect("finite samples"), labels)
}

/// Task `t` applies a fixed seeded feature permutation to `base`'s inputs;
/// task 1 keeps the identity.
pub fn gen_permuted_tasks(base: &TaskData, tasks: usize, seed: u64) -> Result<TaskSequence> {
    if tasks == 0 {
        return Err(Error::InvalidSpec("need at least one task".into()));
    }
    let dim = base.dim();
    let seq = (1..=tasks as TaskId)
        .map(|task_id| {
            let perm = feature_permutation(dim, task_id, seed);
            TaskData {
                task_id,
                num_classes: base.num_classes,
                train_x: permute_columns(&base.train_x, &perm),
                train_y: base.train_y.clone(),
                test_x: permute_columns(&base.test_x, &perm),
                test_y: base.test_y.clone(),
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks: seq,
        provenance: json!({
            "generator": "permuted",
            "tasks": tasks,
            "seed": seed,
        }),
    })
}

/// The permutation applied by [`gen_permuted_tasks`] for `task_id`.
pub fn feature_permutation(dim: usize, task_id: TaskId, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task_id > 1 {
        let mut rng = rng::stream(seed, domain::PERMUTATION, u64::from(task_id));
        perm.shuffle(&mut rng);
    }
    perm
}

fn permute_columns(x: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, perm[c]))
}

/// Raw IDX contents: images flattened to one row each.
#[derive(Clone, Debug)]
pub struct IdxCorpus {
    pub images: DenseMatrix,
    pub labels: Vec<usize>,
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = read_be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, unsigned bytes, 3 dimensions).
pub fn parse_idx_images(bytes: &[u8], normalize: bool) -> Result<DenseMatrix> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "images")?;
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let rows = read_be_u32(bytes, 8, "images")? as usize;
    let cols = read_be_u32(bytes, 12, "images")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(Error::TruncatedFile(format!(
            "images: expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let data = body[..n * dim].iter().map(|&p| f64::from(p) * scale).collect();
    DenseMatrix::new(n, dim, data)
}

/// Parses an IDX label file (`0x00000801`, unsigned bytes).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "labels")?;
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

pub fn read_idx_corpus(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<IdxCorpus> {
    let images = parse_idx_images(&std::fs::read(images_path)?, normalize)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    Ok(IdxCorpus { images, labels })
}

/// Class groups in ascending label order: task `t` owns the `t`-th block of
/// `classes_per_task` labels.
fn class_groups(labels: &[usize], classes_per_task: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if classes_per_task == 0 || tasks == 0 {
        return Err(Error::InvalidSpec("classes_per_task and tasks must be positive".into()));
    }
    let distinct: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let needed = classes_per_task * tasks;
    if distinct.len() < needed {
        return Err(Error::InsufficientClasses {
            needed,
            found: distinct.len(),
        });
    }
    Ok(distinct[..needed]
        .chunks(classes_per_task)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Samples of `corpus` whose label belongs to `group`, relabelled to the
/// position of their class within the group.
fn select_group(corpus: &IdxCorpus, group: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, y) in corpus.labels.iter().enumerate() {
        if let Some(pos) = group.iter().position(|g| g == y) {
            rows.push(i);
            labels.push(pos);
        }
    }
    (rows, labels)
}

/// Splits one IDX corpus into `tasks` class-disjoint tasks. Within each task
/// every fifth sample (in file order) is held out as test data.
pub fn load_idx_split(
    images_path: &Path,
    labels_path: &Path,
    classes_per_task: usize,
    tasks: usize,
    normalize: bool,
) -> Result<TaskSequence> {
    let corpus = read_idx_corpus(images_path, labels_path, normalize)?;
    let groups = class_groups(&corpus.labels, classes_per_task, tasks)?;
    let seq = groups
        .iter()
        .enumerate()
        .map(|(t, group)| {
            let (rows, labels) = select_group(&corpus, group);
            let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
            for k in 0..rows.len() {
                if k % IDX_HOLDOUT_STRIDE == IDX_HOLDOUT_STRIDE - 1 {
                    test_idx.push(k);
                } else {
                    train_idx.push(k);
                }
            }
            let pick = |ks: &[usize]| {
                let r: Vec<usize> = ks.iter().map(|&k| rows[k]).collect();
                let (x, _) = gather(&corpus.images, &corpus.labels, &r);
                (x, ks.iter().map(|&k| labels[k]).collect::<Vec<_>>())
            };
            let (train_x, train_y) = pick(&train_idx);
            let (test_x, test_y) = pick(&test_idx);
            TaskData {
                task_id: t as TaskId + 1,
                num_classes: classes_per_task,
                train_x,
                train_y,
                test_x,
                test_y,
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks: seq,
        provenance: json!({
            "generator": "idx",
            "images": images_path.display().to_string(),
            "labels": labels_path.display().to_string(),
            "classes_per_task": classes_per_task,
            "tasks": tasks,
            "normalize": normalize,
        }),
    })
}

/// Like [`load_idx_split`] but with a separate test corpus.
pub fn load_idx_train_test(
    train: (&Path, &Path),
    test: (&Path, &Path),
    classes_per_task: usize,
    tasks: usize,
    normalize: bool,
) -> Result<TaskSequence> {
    let train_corpus = read_idx_corpus(train.0, train.1, normalize)?;
    let test_corpus = read_idx_corpus(test.0, test.1, normalize)?;
    let groups = class_groups(&train_corpus.labels, classes_per_task, tasks)?;
    let seq = groups
        .iter()
        .enumerate()
        .map(|(t, group)| {
            let (tr_rows, train_y) = select_group(&train_corpus, group);
            let (te_rows, test_y) = select_group(&test_corpus, group);
            TaskData {
                task_id: t as TaskId + 1,
                num_classes: classes_per_task,
                train_x: gather(&train_corpus.images, &train_corpus.labels, &tr_rows).0,
                train_y,
                test_x: gather(&test_corpus.images, &test_corpus.labels, &te_rows).0,
                test_y,
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks: seq,
        provenance: json!({
            "generator": "idx",
            "train_images": train.0.display().to_string(),
            "train_labels": train.1.display().to_string(),
            "test_images": test.0.display().to_string(),
            "test_labels": test.1.display().to_string(),
            "classes_per_task": classes_per_task,
            "tasks": tasks,
            "normalize": normalize,
        }),
    })
}

/// Shuffled minibatch index lists covering `0..n`. A trailing batch with a
/// single sample is folded into the previous batch, since batch statistics
/// need at least two samples.
pub fn minibatches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches.retain(|b| b.len() >= 2);
    batches
}
