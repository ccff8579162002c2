mod common;

use lrfr::datasets::{gen_gaussian_tasks, TaskData};

/// Nearest-class-mean classifier fitted on the training split; a linear
/// decision rule independent of the network code.
fn nearest_mean_accuracy(t: &TaskData) -> f64 {
    let d = t.dim();
    let mut means = vec![vec![0.0; d]; t.num_classes];
    let mut counts = vec![0usize; t.num_classes];
    for (i, &y) in t.train_y.iter().enumerate() {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(t.train_x.row(i)) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let correct = t
        .test_y
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let x = t.test_x.row(*i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..t.num_classes)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == y
        })
        .count();
    correct as f64 / t.test_y.len() as f64
}

#[test]
fn well_separated_tasks_are_linearly_solvable() {
    let seq = gen_gaussian_tasks(16, 2, 5, 500, 500, 10.0, 1).unwrap();
    for t in &seq.tasks {
        let acc = nearest_mean_accuracy(t);
        assert!(acc >= 0.99, "task {}: {acc}", t.task_id);
    }
}

#[test]
fn zero_separation_is_at_chance() {
    let c = 3;
    let n = 3000;
    let seq = gen_gaussian_tasks(16, c, 2, 600, n, 0.0, 2).unwrap();
    let p = 1.0 / c as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for t in &seq.tasks {
        let acc = nearest_mean_accuracy(t);
        assert!((acc - p).abs() <= 5.0 * se, "task {}: {acc}", t.task_id);
    }
}

#[test]
fn labels_in_range_and_balanced() {
    let seq = gen_gaussian_tasks(5, 3, 3, 100, 31, 2.0, 4).unwrap();
    for t in &seq.tasks {
        for ys in [&t.train_y, &t.test_y] {
            assert!(ys.iter().all(|&y| y < 3));
            let mut counts = [0i64; 3];
            ys.iter().for_each(|&y| counts[y] += 1);
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
