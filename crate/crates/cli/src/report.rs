//! Trajectory files and the sweep table built from them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dto_core::TrajectoryRow;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const AUDIT_FILE: &str = "projection_audit.csv";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner()?)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<TrajectoryRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub suffix_ratio: f64,
    pub epoch: usize,
    pub forget_quality: Option<f64>,
    pub model_utility: Option<f64>,
    pub forget_rouge: f64,
    pub use_kl: bool,
    pub seed: u64,
    pub run: String,
}

fn load_run(dir: &Path) -> Result<Vec<SweepRow>> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let trajectory = read_trajectory(&dir.join(TRAJECTORY_FILE))?;
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(trajectory
        .into_iter()
        .map(|t| SweepRow {
            k: config.unlearn.k,
            suffix_ratio: config.unlearn.suffix_ratio,
            epoch: t.epoch,
            forget_quality: t.forget_quality,
            model_utility: t.model_utility,
            forget_rouge: t.forget_rouge,
            use_kl: config.unlearn.use_kl,
            seed: config.unlearn.seed,
            run: run.clone(),
        })
        .collect())
}

/// Run directories under `root`: `root` itself if it holds a trajectory,
/// otherwise its immediate subdirectories in name order.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(TRAJECTORY_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Aggregates run directories into one long table sorted by
/// (k, suffix_ratio, epoch). Unreadable runs are skipped with a warning;
/// having nothing to aggregate is an error.
pub fn sweep_report(dirs: &[PathBuf]) -> Result<(Vec<SweepRow>, Vec<String>)> {
    let loaded: Vec<(PathBuf, Result<Vec<SweepRow>>)> = dirs
        .par_iter()
        .map(|d| (d.clone(), load_run(d)))
        .collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut used = 0;
    for (dir, result) in loaded {
        match result {
            Ok(r) => {
                used += 1;
                rows.extend(r);
            }
            Err(e) => warnings.push(format!("skipping {}: {e:#}", dir.display())),
        }
    }
    if used == 0 {
        bail!("no run directory with a readable {TRAJECTORY_FILE} and {CONFIG_FILE}");
    }
    rows.sort_by(|a, b| {
        a.k.total_cmp(&b.k)
            .then(a.suffix_ratio.total_cmp(&b.suffix_ratio))
            .then(a.epoch.cmp(&b.epoch))
            .then(a.use_kl.cmp(&b.use_kl))
            .then(a.seed.cmp(&b.seed))
            .then(a.run.cmp(&b.run))
    });
    Ok((rows, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, fq: Option<f64>) -> TrajectoryRow {
        TrajectoryRow {
            epoch,
            unlearn_loss: 0.5,
            kl_loss: 0.0,
            grad_cosine: None,
            forget_rouge: 1.0,
            forget_quality: fq,
            model_utility: Some(0.4),
        }
    }

    #[test]
    fn trajectory_round_trip_keeps_blanks() {
        let rows = vec![row(0, None), row(1, Some(0.25))];
        let bytes = trajectory_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "epoch,unlearn_loss,kl_loss,grad_cosine,forget_rouge,forget_quality,model_utility\n"
        ));
        assert!(text.contains("0,0.5,0.0,,1.0,,0.4"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, bytes).unwrap();
        assert_eq!(read_trajectory(&path).unwrap(), rows);
    }
}
