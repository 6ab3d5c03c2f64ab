//! Cartesian ablation grids over configuration keys, run across seeds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::config::{canonical_key, ExperimentConfig};
use super::metrics::{final_return, mean_abs_eta, mean_std, read_metrics, MetricsRecord, RunSeries};
use super::trainer::{run_training, RunOutcome, METRICS_FILE, STATUS_FILE};
use crate::error::{Error, Result};

/// Named parameter lists; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    /// Parses `key=v1,v2;key2=w1,w2`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::config(part, "grid axes look like key=v1,v2"))?;
            let key = canonical_key(key).ok_or_else(|| Error::config(key.trim(), "unknown key"))?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::config(key, "grid axis has no values"));
            }
            axes.push((key.to_string(), values));
        }
        Ok(Self { axes })
    }

    pub fn axis(mut self, key: &str, values: &[&str]) -> Self {
        self.axes.push((key.into(), values.iter().map(|v| v.to_string()).collect()));
        self
    }

    /// Override lists in row-major order (last axis varies fastest). An
    /// empty grid has one cell with no overrides.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut next = cell.clone();
                        next.push((key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        cells
    }
}

fn cell_label(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides
        .iter()
        .map(|(k, v)| format!("{}={v}", k.rsplit('.').next().unwrap_or(k)))
        .collect::<Vec<_>>()
        .join(",")
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-=,".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_return: Option<f64>,
    pub mean_abs_eta: Option<f64>,
    pub failure: Option<String>,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub seeds: Vec<SeedResult>,
    pub final_return: (f64, f64),
    pub mean_abs_eta: (f64, f64),
}

impl CellSummary {
    pub fn completed(&self) -> usize {
        self.seeds.iter().filter(|s| s.failure.is_none()).count()
    }

    pub fn final_returns(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.final_return).collect()
    }

    pub fn mean_abs_etas(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.mean_abs_eta).collect()
    }
}

/// Aggregates finished runs of one configuration. Failed runs are listed
/// but excluded from the statistics.
pub fn summarize_cell(label: &str, overrides: Vec<(String, String)>, runs: Vec<(u64, Result<RunOutcome>)>) -> CellSummary {
    let seeds: Vec<SeedResult> = runs
        .into_iter()
        .map(|(seed, run)| match run {
            Ok(out) => SeedResult {
                seed,
                final_return: out.failure.is_none().then(|| final_return(&out.metrics)).flatten(),
                mean_abs_eta: out.failure.is_none().then(|| mean_abs_eta(&out.metrics)).flatten(),
                failure: out.failure,
                metrics: out.metrics,
            },
            Err(e) => SeedResult {
                seed,
                final_return: None,
                mean_abs_eta: None,
                failure: Some(e.to_string()),
                metrics: Vec::new(),
            },
        })
        .collect();
    let mut cell = CellSummary {
        label: label.into(),
        overrides,
        seeds,
        final_return: (f64::NAN, f64::NAN),
        mean_abs_eta: (f64::NAN, f64::NAN),
    };
    cell.final_return = mean_std(&cell.final_returns());
    cell.mean_abs_eta = mean_std(&cell.mean_abs_etas());
    cell
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<CellSummary>,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Fixed-width table of `mean ± std` per cell.
    pub fn to_table(&self) -> String {
        let width = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>24}  {:>20}  {:>5}\n", "cell", "final return", "mean |eta|", "runs");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<width$}  {:>24}  {:>20}  {:>5}",
                c.label,
                format!("{:.2} ± {:.2}", c.final_return.0, c.final_return.1),
                format!("{:.3} ± {:.3}", c.mean_abs_eta.0, c.mean_abs_eta.1),
                format!("{}/{}", c.completed(), c.seeds.len()),
            );
            for s in c.seeds.iter().filter(|s| s.failure.is_some()) {
                let _ = writeln!(out, "    seed {} failed: {}", s.seed, s.failure.as_deref().unwrap_or(""));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,final_return_mean,final_return_std,mean_abs_eta_mean,mean_abs_eta_std,completed,runs\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "\"{}\",{},{},{},{},{},{}",
                c.label,
                c.final_return.0,
                c.final_return.1,
                c.mean_abs_eta.0,
                c.mean_abs_eta.1,
                c.completed(),
                c.seeds.len()
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("summary.csv", self.to_csv()), ("summary.txt", self.to_table())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs every grid cell for every seed of `base` under `out_dir/<cell>/seed_<n>`.
/// Runs are independent, so they execute on the rayon pool; results are
/// collected in grid order regardless of completion order.
pub fn run_ablation(base: &ExperimentConfig, grid: &Grid, out_dir: &Path) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cells = grid.cells();
    let configs: Vec<Result<ExperimentConfig>> = cells
        .iter()
        .map(|overrides| {
            let mut cfg = base.clone();
            for (k, v) in overrides {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect();

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| base.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<RunOutcome>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = configs[c]
                .as_ref()
                .map_err(|e| Error::config(cell_label(&cells[c]), e.to_string()))?;
            let dir = out_dir.join(dir_name(&cell_label(&cells[c]))).join(format!("seed_{seed}"));
            run_training(cfg, seed, &dir)
        })
        .collect();

    let mut results = results.into_iter();
    let report = AblationReport {
        cells: cells
            .iter()
            .map(|overrides| {
                let runs = base.seeds.iter().map(|&s| (s, results.next().expect("one result per job"))).collect();
                summarize_cell(&cell_label(overrides), overrides.clone(), runs)
            })
            .collect(),
    };
    report.write(out_dir)?;
    Ok(report)
}

fn find_run_dirs(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    if dir.join(METRICS_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    let mut children: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        find_run_dirs(&child, out)?;
    }
    Ok(())
}

/// Reads every completed or failed run below `root`, grouping runs by the
/// directory that holds their `seed_<n>` folders.
pub fn load_runs(root: &Path) -> Result<(AblationReport, Vec<RunSeries>)> {
    let mut dirs = Vec::new();
    find_run_dirs(root, &mut dirs)?;
    if dirs.is_empty() {
        return Err(Error::config("dir", format!("no runs found under {}", root.display())));
    }
    let mut groups: Vec<(String, Vec<(u64, Result<RunOutcome>)>)> = Vec::new();
    let mut series = Vec::new();
    for dir in dirs {
        let status_path = dir.join(STATUS_FILE);
        let status: serde_json::Value = match std::fs::read_to_string(&status_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::config(status_path.display().to_string(), e.to_string()))?,
            Err(_) => serde_json::Value::Null,
        };
        let seed = status.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
        let failure = match status.get("status").and_then(|s| s.as_str()) {
            Some("completed") => None,
            Some(other) => Some(
                status
                    .get("error")
                    .and_then(|e| e.as_str())
                    .map_or_else(|| format!("run {other}"), str::to_string),
            ),
            None => Some("missing status".to_string()),
        };
        let metrics = read_metrics(&dir.join(METRICS_FILE))?;
        let group_dir = if dir.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_")) {
            dir.parent().unwrap_or(&dir).to_path_buf()
        } else {
            dir.clone()
        };
        let label = match group_dir.strip_prefix(root) {
            Ok(rel) if !rel.as_os_str().is_empty() => rel.display().to_string(),
            _ => "base".to_string(),
        };
        let run_id = match dir.strip_prefix(root) {
            Ok(rel) if !rel.as_os_str().is_empty() => rel.display().to_string(),
            _ => "run".to_string(),
        };
        series.push(RunSeries {
            run_id,
            seed,
            records: metrics.clone(),
        });
        let outcome = RunOutcome {
            seed,
            run_dir: dir.clone(),
            metrics,
            failure,
            checkpoint: None,
        };
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push((seed, Ok(outcome))),
            None => groups.push((label, vec![(seed, Ok(outcome))])),
        }
    }
    let cells = groups
        .into_iter()
        .map(|(label, runs)| summarize_cell(&label, Vec::new(), runs))
        .collect();
    Ok((AblationReport { cells }, series))
}
