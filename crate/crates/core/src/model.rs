//! A small fully connected network with K class heads and J deferral heads,
//! trained by minibatch SGD with momentum on either deferral surrogate.
//!
//! Everything runs in f64 with fixed summation order, so training is
//! bit-deterministic for a fixed config seed and checkpoints round-trip
//! exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deferral;
use crate::loss::{l2d_grad, l2d_loss, LossError, LossKind, ModelOutputs, SupervisionSignal};
use crate::rng::{stream_rng, StreamDomain};
use crate::synth::Dataset;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {0} has zero width")]
    ZeroWidthLayer(usize),
    #[error("input has length {got}, model expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("dataset shape does not match model: {0}")]
    DataMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint file is truncated or has trailing bytes")]
    Truncated,
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 8] = b"L2DCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

/// Feed-forward network: ReLU hidden layers, linear output of width K+J.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// Layer widths, input first: `[dim, hidden..., K+J]`.
    pub layer_sizes: Vec<usize>,
    /// Row-major `(out, in)` weight matrices, one per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub num_classes: usize,
    pub num_experts: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), weights
/// drawn row-major from the layer's stream, biases zero.
pub fn init_model(
    dim: usize,
    hidden_sizes: &[usize],
    num_classes: usize,
    num_experts: usize,
    loss_kind: LossKind,
    seed: u64,
) -> Result<MlpModel, ModelError> {
    let mut layer_sizes = Vec::with_capacity(hidden_sizes.len() + 2);
    layer_sizes.push(dim);
    layer_sizes.extend_from_slice(hidden_sizes);
    layer_sizes.push(num_classes + num_experts);
    if num_classes == 0 || num_experts == 0 {
        return Err(ModelError::ZeroWidthLayer(layer_sizes.len() - 1));
    }
    if let Some(l) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(ModelError::ZeroWidthLayer(l));
    }

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_sizes.len() - 1 {
        let fan_in = layer_sizes[l];
        let fan_out = layer_sizes[l + 1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = stream_rng(seed, StreamDomain::WeightInit, l as u64, 0);
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }

    Ok(MlpModel {
        layer_sizes,
        weights,
        biases,
        num_classes,
        num_experts,
        loss_kind,
        seed,
    })
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Forward pass; hidden layers ReLU, output linear.
    pub fn forward(&self, x: &[f64]) -> Result<ModelOutputs, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                got: x.len(),
                want: self.input_dim(),
            });
        }
        let mut a = x.to_vec();
        for l in 0..self.num_layers() {
            a = self.affine(l, &a);
            if l + 1 < self.num_layers() {
                for v in &mut a {
                    *v = v.max(0.0);
                }
            }
        }
        let deferral_logits = a.split_off(self.num_classes);
        Ok(ModelOutputs::new(a, deferral_logits))
    }

    /// Convenience: per-example forward over a batch.
    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<ModelOutputs>, ModelError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let fan_in = self.layer_sizes[layer];
        let fan_out = self.layer_sizes[layer + 1];
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        out
    }

    /// Forward pass keeping post-activation values of every layer (input
    /// first), for backprop.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(x.to_vec());
        for l in 0..self.num_layers() {
            let mut a = self.affine(l, activations.last().unwrap());
            if l + 1 < self.num_layers() {
                for v in &mut a {
                    *v = v.max(0.0);
                }
            }
            activations.push(a);
        }
        activations
    }

    /// Accumulate parameter gradients for one example given dLoss/dlogits.
    fn backprop_into(
        &self,
        activations: &[Vec<f64>],
        dlogits: &[f64],
        grad_w: &mut [Vec<f64>],
        grad_b: &mut [Vec<f64>],
    ) {
        let mut delta = dlogits.to_vec();
        for l in (0..self.num_layers()).rev() {
            let fan_in = self.layer_sizes[l];
            let input = &activations[l];
            for (o, &d) in delta.iter().enumerate() {
                grad_b[l][o] += d;
                let row = &mut grad_w[l][o * fan_in..(o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                // delta for the previous layer: W^T delta masked by ReLU.
                let mut prev = vec![0.0; fan_in];
                let w = &self.weights[l];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += wi * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(&activations[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Grow the output layer by `extra` deferral heads with fresh seeded
    /// initialization; all existing parameters are kept verbatim.
    pub fn with_added_experts(&self, extra: usize, seed: u64) -> MlpModel {
        let mut model = self.clone();
        let last = model.num_layers() - 1;
        let fan_in = model.layer_sizes[last];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for h in 0..extra {
            let mut rng = stream_rng(
                seed,
                StreamDomain::WeightInit,
                last as u64,
                1 + (self.num_experts + h) as u64,
            );
            let row: Vec<f64> = (0..fan_in)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            model.weights[last].extend(row);
            model.biases[last].push(0.0);
        }
        model.num_experts += extra;
        *model.layer_sizes.last_mut().unwrap() += extra;
        model
    }

    /// Error unless the checkpointed shape matches the expected problem shape.
    pub fn expect_shape(
        &self,
        dim: usize,
        num_classes: usize,
        num_experts: usize,
    ) -> Result<(), CheckpointError> {
        if self.input_dim() != dim
            || self.num_classes != num_classes
            || self.num_experts != num_experts
        {
            return Err(CheckpointError::ShapeMismatch(format!(
                "model is (dim={}, K={}, J={}), expected (dim={dim}, K={num_classes}, J={num_experts})",
                self.input_dim(),
                self.num_classes,
                self.num_experts
            )));
        }
        Ok(())
    }
}

// ─── Training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidTrainConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidTrainConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::InvalidTrainConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::InvalidTrainConfig(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch curves; every vector has length `epochs`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_system_accuracy: Vec<f64>,
}

/// Supervision flags for a dataset: `flags[i][j] = (m_ij == y_i)`.
pub fn correctness_flag_table(data: &Dataset) -> Vec<Vec<bool>> {
    data.examples
        .iter()
        .map(Dataset::correctness_flags)
        .collect()
}

fn check_data(model: &MlpModel, data: &Dataset) -> Result<(), ModelError> {
    if data.task.dim != model.input_dim()
        || data.task.num_classes != model.num_classes
        || data.num_experts() != model.num_experts
    {
        return Err(ModelError::DataMismatch(format!(
            "dataset is (dim={}, K={}, J={}), model is (dim={}, K={}, J={})",
            data.task.dim,
            data.task.num_classes,
            data.num_experts(),
            model.input_dim(),
            model.num_classes,
            model.num_experts
        )));
    }
    Ok(())
}

/// Mean loss of `model` over a dataset.
pub fn mean_loss(model: &MlpModel, data: &Dataset) -> Result<f64, ModelError> {
    check_data(model, data)?;
    let mut total = 0.0;
    for ex in &data.examples {
        let out = model.forward(&ex.features)?;
        let sup = SupervisionSignal::new(ex.label, Dataset::correctness_flags(ex));
        total += l2d_loss(model.loss_kind, &out, &sup)
            .map_err(|e| ModelError::DataMismatch(e.to_string()))?;
    }
    Ok(total / data.len() as f64)
}

/// Routed accuracy with single-expert deferral: classifier when the rejector
/// keeps the input, otherwise the chosen expert's correctness.
pub fn routed_accuracy(model: &MlpModel, data: &Dataset) -> Result<f64, ModelError> {
    check_data(model, data)?;
    let mut correct = 0usize;
    for ex in &data.examples {
        let out = model.forward(&ex.features)?;
        let decision = deferral::reject(&out);
        let ok = if decision.target == 0 {
            decision.predicted_class == ex.label
        } else {
            ex.expert_preds[decision.target - 1] == ex.label
        };
        if ok {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train in place by minibatch SGD with momentum.
///
/// Shuffling uses a seeded permutation stream per epoch; gradient
/// accumulation within a batch runs in permutation order, so the whole
/// trajectory is bit-deterministic for a fixed `(config.seed, dataset)`.
pub fn train(
    model: &mut MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    config.validate()?;
    check_data(model, train_set)?;
    check_data(model, val_set)?;

    let flags = correctness_flag_table(train_set);
    let n = train_set.len();
    let mut velocity_w: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut velocity_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();

    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        val_system_accuracy: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        let order = if config.shuffle {
            let mut rng = stream_rng(config.seed, StreamDomain::Shuffle, 0, epoch as u64);
            crate::rng::permutation(n, &mut rng)
        } else {
            (0..n).collect::<Vec<usize>>()
        };

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad_w: Vec<Vec<f64>> =
                model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
            let mut grad_b: Vec<Vec<f64>> =
                model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
            let mut batch_loss = 0.0;

            for &idx in batch {
                let ex = &train_set.examples[idx];
                let activations = model.forward_trace(&ex.features);
                let logits = activations.last().unwrap();
                let out = ModelOutputs::new(
                    logits[..model.num_classes].to_vec(),
                    logits[model.num_classes..].to_vec(),
                );
                let sup = SupervisionSignal::new(ex.label, flags[idx].clone());
                // Numeric blowups usually surface as non-finite logits before
                // the loss itself goes non-finite; both abort the same way.
                let nan_loss = ModelError::NanLoss {
                    epoch,
                    batch: batch_idx,
                };
                let loss = match l2d_loss(model.loss_kind, &out, &sup) {
                    Ok(l) if l.is_finite() => l,
                    Ok(_) | Err(LossError::NonFiniteLogit(_)) => return Err(nan_loss),
                    Err(e) => return Err(ModelError::DataMismatch(e.to_string())),
                };
                batch_loss += loss;
                let dlogits = l2d_grad(model.loss_kind, &out, &sup)
                    .map_err(|e| ModelError::DataMismatch(e.to_string()))?;
                model.backprop_into(&activations, &dlogits, &mut grad_w, &mut grad_b);
            }

            if !batch_loss.is_finite() {
                return Err(ModelError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;

            let scale = 1.0 / batch.len() as f64;
            for l in 0..model.weights.len() {
                for (v, g) in velocity_w[l].iter_mut().zip(&grad_w[l]) {
                    *v = config.momentum * *v + g * scale;
                }
                for (w, v) in model.weights[l].iter_mut().zip(&velocity_w[l]) {
                    *w -= config.learning_rate * v;
                }
                for (v, g) in velocity_b[l].iter_mut().zip(&grad_b[l]) {
                    *v = config.momentum * *v + g * scale;
                }
                for (b, v) in model.biases[l].iter_mut().zip(&velocity_b[l]) {
                    *b -= config.learning_rate * v;
                }
            }
        }

        history.train_loss.push(epoch_loss / n as f64);
        history.val_loss.push(mean_loss(model, val_set)?);
        history
            .val_system_accuracy
            .push(routed_accuracy(model, val_set)?);
    }

    Ok(history)
}

// ─── Checkpoints ─────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    layer_sizes: Vec<usize>,
    num_classes: usize,
    num_experts: usize,
    loss_kind: LossKind,
    activation: String,
    seed: u64,
}

/// Write `model` to `path`: magic, JSON header, then raw little-endian f64
/// parameters (per layer: weights row-major, then biases).
pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        layer_sizes: model.layer_sizes.clone(),
        num_classes: model.num_classes,
        num_experts: model.num_experts,
        loss_kind: model.loss_kind,
        activation: "relu".into(),
        seed: model.seed,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for l in 0..model.weights.len() {
        for &w in &model.weights[l] {
            out.write_all(&w.to_le_bytes())?;
        }
        for &b in &model.biases[l] {
            out.write_all(&b.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_model`]; the round trip is bit-exact.
pub fn load_model(path: &Path) -> Result<MlpModel, CheckpointError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or_truncated(&mut file, &mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_truncated(&mut file, &mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(header.version));
    }
    if header.layer_sizes.len() < 2 || header.layer_sizes.contains(&0) {
        return Err(CheckpointError::ShapeMismatch(
            "layer sizes must be nonempty and positive".into(),
        ));
    }
    if *header.layer_sizes.last().unwrap() != header.num_classes + header.num_experts {
        return Err(CheckpointError::ShapeMismatch(format!(
            "output width {} does not equal K+J = {}",
            header.layer_sizes.last().unwrap(),
            header.num_classes + header.num_experts
        )));
    }

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut buf = [0u8; 8];
    for l in 0..header.layer_sizes.len() - 1 {
        let fan_in = header.layer_sizes[l];
        let fan_out = header.layer_sizes[l + 1];
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            read_exact_or_truncated(&mut file, &mut buf)?;
            w.push(f64::from_le_bytes(buf));
        }
        let mut b = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            read_exact_or_truncated(&mut file, &mut buf)?;
            b.push(f64::from_le_bytes(buf));
        }
        weights.push(w);
        biases.push(b);
    }
    if file.read(&mut buf)? != 0 {
        return Err(CheckpointError::Truncated);
    }

    Ok(MlpModel {
        layer_sizes: header.layer_sizes,
        weights,
        biases,
        num_classes: header.num_classes,
        num_experts: header.num_experts,
        loss_kind: header.loss_kind,
        seed: header.seed,
    })
}

fn read_exact_or_truncated(reader: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}
