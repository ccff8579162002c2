//! Command implementations behind the `lrfr` binary.
//!
//! Each command returns its process exit code: 0 on success, 2 for invalid
//! input (config, artifact, provenance mismatch), 3 for failures while
//! computing or writing results.

pub mod artifact;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::Error;
use crate::trainer::ExperimentState;
use artifact::ResultArtifact;
use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const DEFAULT_OUTPUT_DIR: &str = "results";

/// Runs every configured method over the same task sequence and writes
/// `<method>.json` and `<method>.csv` into the output directory.
pub fn cmd_run(
    config_path: &Path,
    out_override: Option<&Path>,
    quiet: bool,
    stderr: &mut dyn Write,
) -> i32 {
    let cfg = match ExperimentConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_INVALID;
        }
    };
    let base_dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir: PathBuf = match (out_override, &cfg.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base_dir.join(o),
        (None, None) => PathBuf::from(DEFAULT_OUTPUT_DIR),
    };
    match run_methods(&cfg, &base_dir, &out_dir, quiet, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidSpec(_) => EXIT_INVALID,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn run_methods(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    quiet: bool,
    stderr: &mut dyn Write,
) -> crate::Result<()> {
    let seq = cfg.load_tasks(base_dir)?;
    let first = seq.tasks.first().ok_or(Error::EmptyDataset)?;
    let mut sizes = vec![first.dim()];
    sizes.extend_from_slice(&cfg.architecture.hidden);

    for &method in &cfg.methods {
        let mut state = ExperimentState::new(&sizes, first.num_classes, cfg.train_config(method))?;
        for t in 1..=seq.len() {
            state.train_task(&seq.tasks[..t])?;
            if !quiet {
                let row: Vec<String> = state.accuracy.rows()[t - 1]
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect();
                let _ = writeln!(
                    stderr,
                    "[{method}] task {t}/{}: acc [{}] max drift {:.3e}",
                    seq.len(),
                    row.join(", "),
                    state.max_drift(t as u32)
                );
            }
        }
        state.finish(&seq.tasks)?;

        let artifact = ResultArtifact::from_state(cfg, seq.provenance.clone(), &state, unix_now())?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(format!("{method}.json")), artifact.to_json()? + "\n")?;
        std::fs::write(out_dir.join(format!("{method}.csv")), artifact.to_csv())?;
        if cfg.checkpoints {
            let net = std::fs::File::create(out_dir.join(format!("{method}.net.bin")))?;
            crate::checkpoint::write_network(&state.network, std::io::BufWriter::new(net))?;
            let tr = std::fs::File::create(out_dir.join(format!("{method}.tracker.bin")))?;
            crate::checkpoint::write_tracker(&state.tracker, std::io::BufWriter::new(tr))?;
        }
        if !quiet {
            let _ = writeln!(
                stderr,
                "[{method}] ACC {:.4} BWT {:.4} -> {}",
                artifact.acc,
                artifact.bwt,
                out_dir.join(format!("{method}.json")).display()
            );
        }
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn load_artifact(path: &Path) -> crate::Result<ResultArtifact> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    ResultArtifact::from_json(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Prints the per-task, per-layer rank / null-dimension / audit table.
pub fn cmd_inspect(path: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let a = match load_artifact(path) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_INVALID;
        }
    };
    let projector = serde_json::to_value(a.projector)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    let mut out = String::new();
    out += &format!(
        "method {}  projector {}  ACC {:.4}  BWT {:.4}\n",
        a.method, projector, a.acc, a.bwt
    );
    out += &format!(
        "{:>4}  {:>5}  {:>5}  {:>4}  {:>8}  {:>10}  {}\n",
        "task", "layer", "width", "rank", "null_dim", "audit", "projector"
    );
    for rec in &a.rank_trajectory {
        let audit = a.audit_for(rec.task);
        for (l, r) in rec.layers.iter().enumerate() {
            let width = a.layer_widths.get(l).copied().unwrap_or(r.rank + r.null_dim);
            out += &format!(
                "{:>4}  {:>5}  {:>5}  {:>4}  {:>8}  {:>10.3e}  {}\n",
                rec.task,
                l + 1,
                width,
                r.rank,
                r.null_dim,
                audit,
                projector
            );
        }
    }
    if stdout.write_all(out.as_bytes()).is_err() {
        return EXIT_RUNTIME;
    }
    EXIT_OK
}

/// Side-by-side ACC/BWT and null-dimension deltas against the first artifact.
pub fn cmd_compare(paths: &[PathBuf], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if paths.len() < 2 {
        let _ = writeln!(stderr, "error: compare needs at least two artifacts");
        return EXIT_INVALID;
    }
    let mut artifacts = Vec::with_capacity(paths.len());
    for p in paths {
        match load_artifact(p) {
            Ok(a) => artifacts.push(a),
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                return EXIT_INVALID;
            }
        }
    }
    let key = artifacts[0].comparison_key();
    for (p, a) in paths.iter().zip(&artifacts).skip(1) {
        if a.comparison_key() != key {
            let _ = writeln!(
                stderr,
                "error: provenance mismatch between {} and {}",
                paths[0].display(),
                p.display()
            );
            return EXIT_INVALID;
        }
    }

    let mut out = String::new();
    out += &format!("{:<8}", "");
    for a in &artifacts {
        out += &format!("  {:>16}", a.method.as_str());
    }
    out += "\n";
    for (label, pick) in [("ACC", 0usize), ("BWT", 1)] {
        out += &format!("{label:<8}");
        for a in &artifacts {
            out += &format!("  {:>16.4}", if pick == 0 { a.acc } else { a.bwt });
        }
        out += "\n";
    }

    let first = &artifacts[0];
    out += &format!("\nnull_dim delta ({} minus other)\n", first.method);
    out += &format!("{:>4}  {:>5}", "task", "layer");
    for a in &artifacts[1..] {
        out += &format!("  {:>16}", a.method.as_str());
    }
    out += "\n";
    for rec in &first.rank_trajectory {
        for (l, r) in rec.layers.iter().enumerate() {
            out += &format!("{:>4}  {:>5}", rec.task, l + 1);
            for a in &artifacts[1..] {
                let other = a
                    .rank_trajectory
                    .iter()
                    .find(|o| o.task == rec.task)
                    .and_then(|o| o.layers.get(l));
                match other {
                    Some(o) => out += &format!("  {:>16}", r.null_dim as i64 - o.null_dim as i64),
                    None => out += &format!("  {:>16}", "-"),
                }
            }
            out += "\n";
        }
    }
    if stdout.write_all(out.as_bytes()).is_err() {
        return EXIT_RUNTIME;
    }
    EXIT_OK
}
