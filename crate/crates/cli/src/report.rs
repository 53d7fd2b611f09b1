//! Experiment outputs: `summary.json` (deterministic), `metrics.csv`
//! (long-format rows), and `timing.json` (wall clock, segregated so reruns
//! of the same config are byte-identical everywhere else).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiments::RunError;

/// One measurement from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// The sweep variable's value (0 for unswept experiments).
    pub sweep: f64,
    pub metric: String,
    pub value: f64,
}

/// Per-(sweep, metric) aggregate across seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub sweep: f64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by sqrt(#seeds); 0 for a
    /// single seed.
    pub std_error: f64,
    pub per_seed: Vec<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub experiment: String,
    pub preset: Option<String>,
    pub budget_seconds: Option<u64>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
    /// Config echo; the output location is cleared so reruns into different
    /// directories stay byte-identical.
    pub config: ExperimentConfig,
}

/// Group rows by (sweep, metric) in first-appearance order and attach
/// mean/standard-error statistics.
pub fn aggregate(rows_per_seed: &[Vec<MetricRow>]) -> Vec<MetricSummary> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rows in rows_per_seed {
        for row in rows {
            match keys
                .iter()
                .position(|(s, m)| *s == row.sweep && *m == row.metric)
            {
                Some(i) => values[i].push(row.value),
                None => {
                    keys.push((row.sweep, row.metric.clone()));
                    values.push(vec![row.value]);
                }
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((sweep, metric), per_seed)| {
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let std_error = if per_seed.len() > 1 {
                let var = per_seed
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            MetricSummary {
                sweep,
                metric,
                mean,
                std_error,
                per_seed,
            }
        })
        .collect()
}

/// Write bytes to `path` atomically (same-directory temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|source| RunError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(summary).map_err(RunError::Json)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Long-format metrics: `experiment,seed,sweep,metric,value`, one row per
/// seed and measurement, in deterministic order.
pub fn write_metrics_csv(
    path: &Path,
    experiment: &str,
    seeds: &[u64],
    rows_per_seed: &[Vec<MetricRow>],
) -> Result<(), RunError> {
    let mut out = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut out);
        writer
            .write_record(["experiment", "seed", "sweep", "metric", "value"])
            .map_err(RunError::Csv)?;
        for (seed, rows) in seeds.iter().zip(rows_per_seed) {
            for row in rows {
                writer
                    .write_record([
                        experiment.to_string(),
                        seed.to_string(),
                        row.sweep.to_string(),
                        row.metric.clone(),
                        row.value.to_string(),
                    ])
                    .map_err(RunError::Csv)?;
            }
        }
        writer.flush().map_err(|e| RunError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    write_atomic(path, &out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
    pub budget_seconds: Option<u64>,
}

pub fn write_timing(path: &Path, timing: &Timing) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(timing).map_err(RunError::Json)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sweep: f64, metric: &str, value: f64) -> MetricRow {
        MetricRow {
            sweep,
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn aggregate_means_and_errors() {
        let rows = vec![
            vec![row(1.0, "acc", 0.8), row(2.0, "acc", 0.9)],
            vec![row(1.0, "acc", 0.6), row(2.0, "acc", 0.7)],
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert!((agg[0].mean - 0.7).abs() < 1e-12);
        // sd = 0.1414..., se = 0.1.
        assert!((agg[0].std_error - 0.1).abs() < 1e-9);
        assert_eq!(agg[0].per_seed, vec![0.8, 0.6]);
    }

    #[test]
    fn aggregate_preserves_first_seen_order() {
        let rows = vec![vec![row(2.0, "b", 1.0), row(1.0, "a", 2.0)]];
        let agg = aggregate(&rows);
        assert_eq!(agg[0].metric, "b");
        assert_eq!(agg[1].metric, "a");
        assert_eq!(agg[0].std_error, 0.0);
    }

    #[test]
    fn metrics_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![vec![row(0.5, "ece", 0.25)]];
        write_metrics_csv(&path, "train-eval", &[7], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "experiment,seed,sweep,metric,value\ntrain-eval,7,0.5,ece,0.25\n"
        );
    }
}
