//! Aggregation of `finals.csv` files below a results directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::median;
use crate::error::{BenchError, Result};
use crate::run::{read_finals, FinalRecord, FINALS_FILE};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Statistics of one (results id, task, optimizer) group. Diverged runs
/// are counted but kept out of the means and medians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// Directory of the `finals.csv`, relative to the results root.
    pub id: String,
    pub task: String,
    pub optimizer: String,
    pub runs: usize,
    pub diverged: usize,
    /// Finite runs dropped by the optional outlier filter.
    pub outliers: usize,
    pub mean_final_loss: Option<f64>,
    pub median_final_loss: Option<f64>,
    pub mean_final_average_loss: Option<f64>,
    pub median_final_average_loss: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Groups `finals` by task and optimizer, in order of first appearance.
/// With `outlier_factor`, finite runs whose final loss exceeds that many
/// times the group median are also left out.
pub fn summarize(id: &str, finals: &[FinalRecord], outlier_factor: Option<f64>) -> Vec<GroupSummary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for f in finals {
        let k = (f.task.as_str(), f.optimizer.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(task, optimizer)| {
            let group: Vec<&FinalRecord> = finals.iter().filter(|f| f.task == task && f.optimizer == optimizer).collect();
            let mut kept: Vec<&FinalRecord> = group
                .iter()
                .copied()
                .filter(|f| !f.diverged && f.final_loss.is_finite())
                .collect();
            let diverged = group.len() - kept.len();
            if let Some(factor) = outlier_factor {
                let mut losses: Vec<f64> = kept.iter().map(|f| f.final_loss).collect();
                if let Some(m) = median(&mut losses) {
                    kept.retain(|f| f.final_loss <= factor * m);
                }
            }
            let outliers = group.len() - diverged - kept.len();
            let mut fl: Vec<f64> = kept.iter().map(|f| f.final_loss).collect();
            let mut fa: Vec<f64> = kept.iter().map(|f| f.final_average_loss).collect();
            GroupSummary {
                id: id.to_string(),
                task: task.to_string(),
                optimizer: optimizer.to_string(),
                runs: group.len(),
                diverged,
                outliers,
                mean_final_loss: mean(&fl),
                median_final_loss: median(&mut fl),
                mean_final_average_loss: mean(&fa),
                median_final_average_loss: median(&mut fa),
            }
        })
        .collect()
}

fn find_finals(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_finals(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == FINALS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Summarizes every `finals.csv` below `dir` and writes `summary.json` and
/// `summary.csv` into `dir`.
pub fn report(dir: impl AsRef<Path>, outlier_factor: Option<f64>) -> Result<Vec<GroupSummary>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(BenchError::EmptyResults(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    find_finals(dir, &mut files)?;
    let mut summaries = Vec::new();
    for file in &files {
        let parent = file.parent().expect("file has a parent");
        let rel = parent.strip_prefix(dir).unwrap_or(parent);
        let id = if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.to_string_lossy().into_owned()
        };
        summaries.extend(summarize(&id, &read_finals(file)?, outlier_factor));
    }
    if summaries.is_empty() {
        return Err(BenchError::EmptyResults(dir.to_path_buf()));
    }
    fs::write(dir.join(SUMMARY_JSON), serde_json::to_vec_pretty(&summaries)?)?;
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_CSV))?;
    for s in &summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(summaries)
}
