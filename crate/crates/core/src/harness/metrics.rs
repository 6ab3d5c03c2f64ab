//! Per-iteration metrics records, JSON-lines persistence and plot exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training iteration. Every record carries every key; evaluation
/// fields are `null` on iterations without an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub env_steps: usize,
    /// Cumulative policy gradient steps.
    pub policy_steps: usize,
    /// Cumulative value gradient steps.
    pub value_steps: usize,
    /// Mean undiscounted return of training episodes finished this iteration.
    pub train_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss_before: f64,
    pub value_loss_after: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub clip_fraction: f64,
    pub policy_kl: f64,
    pub entropy: f64,
    pub reward_scale: f64,
    /// Mean deterministic-policy episode return at evaluation points.
    pub mean_return: Option<f64>,
    pub eta_mean: Option<f64>,
    pub eta_abs_mean: Option<f64>,
    pub eta_std: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialize")
    }

    /// Numeric value of a named field; `Ok(None)` for a null field.
    pub fn quantity(&self, name: &str) -> Result<Option<f64>> {
        let value = serde_json::to_value(self).expect("metrics records always serialize");
        match value.get(name) {
            Some(v) if v.is_null() => Ok(None),
            Some(v) => Ok(v.as_f64()),
            None => Err(Error::config(
                "quantity",
                format!("unknown quantity `{name}` (known: {})", quantity_names().join(", ")),
            )),
        }
    }
}

pub fn quantity_names() -> Vec<String> {
    let probe = MetricsRecord {
        iteration: 0,
        env_steps: 0,
        policy_steps: 0,
        value_steps: 0,
        train_return: None,
        policy_loss: 0.0,
        value_loss_before: 0.0,
        value_loss_after: 0.0,
        policy_grad_norm: 0.0,
        value_grad_norm: 0.0,
        max_ratio: 0.0,
        min_ratio: 0.0,
        clip_fraction: 0.0,
        policy_kl: 0.0,
        entropy: 0.0,
        reward_scale: 0.0,
        mean_return: None,
        eta_mean: None,
        eta_abs_mean: None,
        eta_std: None,
    };
    match serde_json::to_value(probe) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Appends records to a JSON-lines file, flushing after each one.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Opens for appending after truncating to the first `keep` records.
    pub fn reopen(path: &Path, keep: usize) -> Result<Self> {
        let records = read_metrics(path)?;
        if records.len() < keep {
            return Err(Error::Checkpoint(format!(
                "{} has {} records, checkpoint expects {keep}",
                path.display(),
                records.len()
            )));
        }
        let mut writer = Self::create(path)?;
        for r in &records[..keep] {
            writer.append(r)?;
        }
        Ok(writer)
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_json_line())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Checkpoint(format!("{}:{}: bad metrics record: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Values of `mean_return` at evaluation points.
pub fn eval_returns(records: &[MetricsRecord]) -> Vec<f64> {
    records.iter().filter_map(|r| r.mean_return).collect()
}

/// Mean of the evaluation returns over the last tenth of evaluation points
/// (at least one point).
pub fn final_return(records: &[MetricsRecord]) -> Option<f64> {
    let evals = eval_returns(records);
    if evals.is_empty() {
        return None;
    }
    let k = evals.len().div_ceil(10);
    Some(evals[evals.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Time average of `eta_abs_mean` over all evaluation points.
pub fn mean_abs_eta(records: &[MetricsRecord]) -> Option<f64> {
    let etas: Vec<f64> = records.iter().filter_map(|r| r.eta_abs_mean).collect();
    (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64)
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// A named run's metrics, for plot exports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

/// Writes `path` as long-format `run_id,seed,env_steps,value` and a sibling
/// `<stem>_aggregate.csv` with `env_steps,mean,std,lower,upper,count`.
/// Iterations where the quantity is null are skipped.
pub fn emit_plot_data(runs: &[RunSeries], quantity: &str, path: &Path) -> Result<PathBuf> {
    if !quantity_names().iter().any(|q| q == quantity) {
        return Err(Error::config(
            "quantity",
            format!("unknown quantity `{quantity}` (known: {})", quantity_names().join(", ")),
        ));
    }
    let mut long = String::from("run_id,seed,env_steps,value\n");
    let mut by_x: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in &run.records {
            if let Some(v) = r.quantity(quantity)? {
                let _ = writeln!(long, "{},{},{},{}", run.run_id, run.seed, r.env_steps, v);
                by_x.entry(r.env_steps).or_default().push(v);
            }
        }
    }
    let mut agg = String::from("env_steps,mean,std,lower,upper,count\n");
    for (x, values) in &by_x {
        let (m, s) = mean_std(values);
        let _ = writeln!(agg, "{x},{m},{s},{},{},{}", m - s, m + s, values.len());
    }
    std::fs::write(path, long).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let agg_path = path.with_file_name(format!("{stem}_aggregate.csv"));
    std::fs::write(&agg_path, agg).map_err(|e| Error::io(&agg_path, e))?;
    Ok(agg_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, eval: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            iteration: i,
            env_steps: 2048 * i,
            policy_steps: i,
            value_steps: i,
            train_return: None,
            policy_loss: 0.5,
            value_loss_before: 1.0,
            value_loss_after: 0.5,
            policy_grad_norm: 1.0,
            value_grad_norm: 1.0,
            max_ratio: 1.1,
            min_ratio: 0.9,
            clip_fraction: 0.0,
            policy_kl: 0.0,
            entropy: 1.0,
            reward_scale: 1.0,
            mean_return: eval,
            eta_mean: eval,
            eta_abs_mean: eval.map(f64::abs),
            eta_std: eval.map(|_| 0.0),
        }
    }

    #[test]
    fn every_record_has_the_same_keys() {
        let a = serde_json::to_value(record(1, None)).unwrap();
        let b = serde_json::to_value(record(2, Some(-3.0))).unwrap();
        let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&a), keys(&b));
        assert_eq!(keys(&a), quantity_names());
    }

    #[test]
    fn json_round_trip() {
        let r = record(3, Some(-1.0 / 3.0));
        let back: MetricsRecord = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn final_return_uses_last_tenth() {
        let recs: Vec<_> = (1..=20).map(|i| record(i, Some(i as f64))).collect();
        assert_eq!(final_return(&recs), Some(19.5));
        assert_eq!(final_return(&recs[..3]), Some(3.0));
        assert_eq!(final_return(&[record(1, None)]), None);
        assert_eq!(mean_abs_eta(&recs[..4]), Some(2.5));
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn plot_export_counts_and_band() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eta.csv");
        let run = RunSeries {
            run_id: "a".into(),
            seed: 0,
            records: (1..=4).map(|i| record(i, Some(i as f64))).collect(),
        };
        let agg = emit_plot_data(std::slice::from_ref(&run), "eta_abs_mean", &path).unwrap();
        let long = std::fs::read_to_string(&path).unwrap();
        assert_eq!(long.lines().count(), 1 + 4);
        for line in std::fs::read_to_string(agg).unwrap().lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[2], "0");
        }
        assert!(emit_plot_data(&[run], "nonsense", &path).is_err());
    }
}
