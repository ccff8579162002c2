//! Test-only oracles, independent of the library's numerical paths.

#![allow(dead_code)]

use lrfr::datasets::{gen_gaussian_tasks, TaskSequence};
use lrfr::linalg::DenseMatrix;
use lrfr::network::{Mode, Network, TaskId};
use lrfr::MaskSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthonormal basis of the span of `vectors` by twice-applied modified
/// Gram–Schmidt; near-dependent vectors are dropped.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        let norm0 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0.max(1e-300) {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// PSD matrix `U diag(s²) Uᵀ` of exact rank `rank` with nonzero eigenvalues
/// in `[0.25, 4]`, `U` a random orthonormal `n × rank` frame.
pub fn random_psd_with_rank(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DenseMatrix {
    let raw: Vec<Vec<f64>> = (0..rank)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let frame = gram_schmidt(&raw);
    let scales: Vec<f64> = frame.iter().map(|_| rng.gen_range(0.5..2.0)).collect();
    DenseMatrix::from_fn(n, n, |i, j| {
        frame
            .iter()
            .zip(&scales)
            .map(|(u, s)| s * s * u[i] * u[j])
            .sum()
    })
}

/// Kernel of `m` by Gaussian elimination with complete pivoting; pivots at
/// or below `rel_tol · max|m|` count as zero. Returns the orthogonal
/// projector onto that kernel.
#[allow(clippy::needless_range_loop)]
pub fn kernel_projector_oracle(m: &DenseMatrix, rel_tol: f64) -> DenseMatrix {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let scale = m.max_abs();
    let mut col_perm: Vec<usize> = (0..n).collect();
    let mut rank = 0;
    for k in 0..n {
        // complete pivoting over the trailing block
        let mut best = (k, k, 0.0f64);
        for (i, row) in a.iter().enumerate().skip(k) {
            for (j, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best.2 {
                    best = (i, j, v.abs());
                }
            }
        }
        if best.2 <= rel_tol * scale || scale == 0.0 {
            break;
        }
        a.swap(k, best.0);
        for row in a.iter_mut() {
            row.swap(k, best.1);
        }
        col_perm.swap(k, best.1);
        let pivot = a[k][k];
        for i in 0..n {
            if i != k {
                let f = a[i][k] / pivot;
                if f != 0.0 {
                    for j in k..n {
                        a[i][j] -= f * a[k][j];
                    }
                }
            }
        }
        rank += 1;
    }
    // reduced form: x_pivot(k) = -Σ_free a[k][f]/a[k][k] · x_free
    let mut kernel = Vec::new();
    for f in rank..n {
        let mut v = vec![0.0; n];
        v[col_perm[f]] = 1.0;
        for k in 0..rank {
            v[col_perm[k]] = -a[k][f] / a[k][k];
        }
        kernel.push(v);
    }
    let basis = gram_schmidt(&kernel);
    DenseMatrix::from_fn(n, n, |i, j| basis.iter().map(|u| u[i] * u[j]).sum())
}

#[derive(Clone, Copy, Debug)]
pub enum Param {
    Weight(usize, usize),
    Scale(usize, usize),
    Shift(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

pub fn param_mut(net: &mut Network, task: TaskId, p: Param) -> &mut f64 {
    match p {
        Param::Weight(l, k) => &mut net.weights_mut()[l].data_mut()[k],
        Param::Scale(l, j) => &mut net.task_mut(task).unwrap().bn[l].scale[j],
        Param::Shift(l, j) => &mut net.task_mut(task).unwrap().bn[l].shift[j],
        Param::HeadWeight(k) => &mut net.task_mut(task).unwrap().head.weight.data_mut()[k],
        Param::HeadBias(c) => &mut net.task_mut(task).unwrap().head.bias[c],
    }
}

pub fn all_params(net: &Network, task: TaskId) -> Vec<Param> {
    let mut out = Vec::new();
    for (l, w) in net.weights().iter().enumerate() {
        out.extend((0..w.data().len()).map(|k| Param::Weight(l, k)));
    }
    let t = net.task(task).unwrap();
    for (l, bn) in t.bn.iter().enumerate() {
        out.extend((0..bn.scale.len()).map(|j| Param::Scale(l, j)));
        out.extend((0..bn.shift.len()).map(|j| Param::Shift(l, j)));
    }
    out.extend((0..t.head.weight.data().len()).map(Param::HeadWeight));
    out.extend((0..t.head.bias.len()).map(Param::HeadBias));
    out
}

pub fn loss_at(net: &Network, x: &DenseMatrix, y: &[usize], task: TaskId, mask: &MaskSet, mu: f64) -> f64 {
    let trace = net.forward(x, task, mask, Mode::Train).unwrap();
    net.backward(&trace, y, mask, mu).unwrap().0
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between backprop and central differences over every
/// parameter, reported per parameter class.
pub fn gradient_check(
    net: &Network,
    x: &DenseMatrix,
    y: &[usize],
    task: TaskId,
    mask: &MaskSet,
    mu: f64,
    h: f64,
) -> GradCheck {
    let trace = net.forward(x, task, mask, Mode::Train).unwrap();
    let (_, g) = net.backward(&trace, y, mask, mu).unwrap();
    let mut report = GradCheck::default();
    let mut probe = net.clone();
    for p in all_params(net, task) {
        let orig = *param_mut(&mut probe, task, p);
        *param_mut(&mut probe, task, p) = orig + h;
        let up = loss_at(&probe, x, y, task, mask, mu);
        *param_mut(&mut probe, task, p) = orig - h;
        let down = loss_at(&probe, x, y, task, mask, mu);
        *param_mut(&mut probe, task, p) = orig;
        let fd = (up - down) / (2.0 * h);
        let analytic = match p {
            Param::Weight(l, k) => g.weights[l].data()[k],
            Param::Scale(l, j) => g.bn_scale[l][j],
            Param::Shift(l, j) => g.bn_shift[l][j],
            Param::HeadWeight(k) => g.head_weight.data()[k],
            Param::HeadBias(c) => g.head_bias[c],
        };
        let e = rel_err(analytic, fd, GRAD_FLOOR);
        let slot = match p {
            Param::Weight(..) => &mut report.weight,
            Param::Scale(..) => &mut report.scale,
            Param::Shift(..) => &mut report.shift,
            Param::HeadWeight(_) | Param::HeadBias(_) => &mut report.head,
        };
        *slot = slot.max(e);
        report.checked += 1;
    }
    report
}

/// Denominator floor for gradient relative errors: below this magnitude the
/// comparison is absolute.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub weight: f64,
    pub scale: f64,
    pub shift: f64,
    pub head: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.weight.max(self.scale).max(self.shift).max(self.head)
    }
}

/// Random network with non-trivial BN parameters (|γ| away from zero) and a
/// registered task 1.
pub fn random_network(sizes: &[usize], classes: usize, seed: u64) -> Network {
    let mut net = lrfr::network::init_network(sizes, classes, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    let t = net.ensure_task(1);
    for bn in &mut t.bn {
        for g in &mut bn.scale {
            let mag: f64 = r.gen_range(0.5..1.5);
            *g = if r.gen_bool(0.3) { -mag } else { mag };
        }
        for b in &mut bn.shift {
            *b = r.gen_range(-0.5..0.5);
        }
    }
    net
}

/// The five-task Gaussian suite: dim 16, 2 classes, 500 training samples each.
pub fn suite_tasks() -> TaskSequence {
    gen_gaussian_tasks(16, 2, 5, 500, 500, 3.0, 42).unwrap()
}

pub const SUITE_HIDDEN: [usize; 3] = [32, 32, 32];
pub const SUITE_SEED: u64 = 42;
