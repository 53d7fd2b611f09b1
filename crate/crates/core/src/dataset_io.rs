//! Dataset persistence: a CSV of examples plus a JSON sidecar carrying the
//! task, expert specs, and split boundaries.
//!
//! The CSV header is `x0..x{d-1},y,m1..mJ`; several splits of one sample are
//! concatenated in order and the sidecar records each split's row range.
//! Floats are written in scientific notation with 17 fractional digits
//! (18 significant), enough for an exact f64 round trip.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{Dataset, ExpertSpec, LabeledExample, SplitTag, SyntheticTask};

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRange {
    tag: SplitTag,
    start: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    #[serde(rename = "K")]
    num_classes: usize,
    #[serde(rename = "J")]
    num_experts: usize,
    seed: u64,
    task: SyntheticTask,
    expert_specs: Vec<ExpertSpec>,
    splits: Vec<SplitRange>,
}

fn format_float(v: f64) -> String {
    format!("{v:.17e}")
}

/// Write one or more splits of a sample to `csv_path` + `sidecar_path`.
/// All datasets must share the same task, expert roster, and sample seed.
pub fn save_datasets(
    csv_path: &Path,
    sidecar_path: &Path,
    datasets: &[Dataset],
) -> Result<(), DatasetIoError> {
    let first = datasets
        .first()
        .ok_or_else(|| DatasetIoError::Format("nothing to save".into()))?;
    for d in datasets {
        if d.task != first.task
            || d.expert_specs != first.expert_specs
            || d.sample_seed != first.sample_seed
        {
            return Err(DatasetIoError::Format(
                "datasets saved together must share task, experts, and seed".into(),
            ));
        }
    }

    let dim = first.task.dim;
    let num_experts = first.num_experts();
    let mut writer = csv::Writer::from_writer(File::create(csv_path)?);
    let mut header: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
    header.push("y".into());
    header.extend((1..=num_experts).map(|j| format!("m{j}")));
    writer.write_record(&header)?;

    let mut splits = Vec::with_capacity(datasets.len());
    let mut start = 0usize;
    for d in datasets {
        for ex in &d.examples {
            let mut row: Vec<String> = ex.features.iter().map(|&v| format_float(v)).collect();
            row.push(ex.label.to_string());
            row.extend(ex.expert_preds.iter().map(|m| m.to_string()));
            writer.write_record(&row)?;
        }
        splits.push(SplitRange {
            tag: d.split,
            start,
            count: d.len(),
        });
        start += d.len();
    }
    writer.flush()?;

    let sidecar = Sidecar {
        dim,
        num_classes: first.task.num_classes,
        num_experts,
        seed: first.sample_seed,
        task: first.task.clone(),
        expert_specs: first.expert_specs.clone(),
        splits,
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    std::fs::write(sidecar_path, json)?;
    Ok(())
}

/// Load the splits written by [`save_datasets`].
pub fn load_datasets(csv_path: &Path, sidecar_path: &Path) -> Result<Vec<Dataset>, DatasetIoError> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    if sidecar.task.dim != sidecar.dim
        || sidecar.task.num_classes != sidecar.num_classes
        || sidecar.expert_specs.len() != sidecar.num_experts
    {
        return Err(DatasetIoError::Format(
            "sidecar shape fields disagree with task/expert entries".into(),
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(File::open(csv_path)?);
    let expected_fields = sidecar.dim + 1 + sidecar.num_experts;
    let mut examples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != expected_fields {
            return Err(DatasetIoError::Format(format!(
                "row {line} has {} fields, expected {expected_fields}",
                record.len()
            )));
        }
        let mut features = Vec::with_capacity(sidecar.dim);
        for d in 0..sidecar.dim {
            features.push(
                record[d]
                    .parse::<f64>()
                    .map_err(|e| DatasetIoError::Format(format!("row {line}, x{d}: {e}")))?,
            );
        }
        let label: usize = record[sidecar.dim]
            .parse()
            .map_err(|e| DatasetIoError::Format(format!("row {line}, y: {e}")))?;
        if label >= sidecar.num_classes {
            return Err(DatasetIoError::Format(format!(
                "row {line}: label {label} outside [0, {})",
                sidecar.num_classes
            )));
        }
        let mut expert_preds = Vec::with_capacity(sidecar.num_experts);
        for j in 0..sidecar.num_experts {
            let m: usize = record[sidecar.dim + 1 + j]
                .parse()
                .map_err(|e| DatasetIoError::Format(format!("row {line}, m{}: {e}", j + 1)))?;
            if m >= sidecar.num_classes {
                return Err(DatasetIoError::Format(format!(
                    "row {line}: expert prediction {m} outside [0, {})",
                    sidecar.num_classes
                )));
            }
            expert_preds.push(m);
        }
        examples.push(LabeledExample {
            features,
            label,
            expert_preds,
        });
    }

    let mut datasets = Vec::with_capacity(sidecar.splits.len());
    for split in &sidecar.splits {
        let end = split.start + split.count;
        if end > examples.len() {
            return Err(DatasetIoError::Format(format!(
                "split {:?} covers rows {}..{end} but the file has {}",
                split.tag,
                split.start,
                examples.len()
            )));
        }
        datasets.push(Dataset {
            task: sidecar.task.clone(),
            expert_specs: sidecar.expert_specs.clone(),
            examples: examples[split.start..end].to_vec(),
            split: split.tag,
            sample_seed: sidecar.seed,
        });
    }
    Ok(datasets)
}
