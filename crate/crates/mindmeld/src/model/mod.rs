//! The feedback-correction network and its personalized embeddings.
//!
//! A bidirectional LSTM encodes a window of one demonstrator's wheel labels;
//! a prediction head maps the encoding plus that demonstrator's embedding to
//! the difference between the ground truth and their label; a posterior head
//! reads the encoding and predicted difference back into a Gaussian over the
//! embedding. Training the posterior sample toward the embedding ties the
//! embedding to whatever style information the windows carry.

mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{
    Activation, AutodiffError, BoundDense, BoundLstm, Checkpoint, DenseParams, Graph, LstmParams,
    NodeId, ParamTensors, Tensor,
};
use crate::demonstrators::StyleProfile;
use crate::driving::WHEEL_LIMIT;

pub use train::{
    adapt_new_embedding_jointly, correct_actions, correct_labels, infer_new_embedding,
    infer_new_embedding_with, train_calibration, train_with, TrainConfig,
};

/// Embedding dimension; two is enough to separate the style axes and plots
/// directly.
pub const EMBEDDING_DIM: usize = 2;
/// LSTM hidden width per direction.
pub const ENCODER_HIDDEN: usize = 32;
/// Prediction head hidden width.
pub const PREDICTOR_HIDDEN: usize = 200;
/// Posterior head hidden widths.
pub const POSTERIOR_HIDDEN: (usize, usize) = (64, 32);
/// Label window length in steps (2 s of feedback).
pub const DEFAULT_WINDOW_LEN: usize = 20;
/// Posterior log-variance is clamped here to keep the sample scale sane.
pub const LOG_VAR_RANGE: (f64, f64) = (-6.0, 2.0);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("demonstrator {0} has no embedding")]
    UnknownDemonstrator(usize),
    #[error("sequence of {seq} steps is shorter than the {window}-step window")]
    SequenceTooShort { seq: usize, window: usize },
    #[error("no samples to fit")]
    EmptySamples,
    #[error("embedding table must be frozen before inferring new embeddings")]
    NotFrozen,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid window sample: {0}")]
    BadSample(String),
    #[error("embedding of length {got} where the model expects {want}")]
    EmbeddingDim { got: usize, want: usize },
    #[error("checkpoint does not describe this architecture: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Encoder, prediction head, and posterior head parameters.
#[derive(Debug, Clone)]
pub struct MindMeldParams {
    pub encoder: LstmParams,
    pub predictor: DenseParams,
    pub posterior: DenseParams,
    embedding_dim: usize,
}

impl MindMeldParams {
    /// The full-size architecture: encoder hidden 32, predictor hidden 200,
    /// posterior hiddens 64 and 32, embeddings of length 2.
    pub fn new(rng: &mut impl Rng) -> Self {
        Self::with_dims(
            ENCODER_HIDDEN,
            PREDICTOR_HIDDEN,
            POSTERIOR_HIDDEN,
            EMBEDDING_DIM,
            rng,
        )
    }

    /// Same wiring at arbitrary widths; small versions keep exhaustive
    /// numeric checks affordable.
    pub fn with_dims(
        hidden: usize,
        predictor_hidden: usize,
        posterior_hidden: (usize, usize),
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let z = 2 * hidden;
        Self {
            encoder: LstmParams::new(1, hidden, rng),
            predictor: DenseParams::new(
                &[z + d, predictor_hidden, 1],
                &[Activation::Relu, Activation::Linear],
                rng,
            ),
            posterior: DenseParams::new(
                &[z + 1, posterior_hidden.0, posterior_hidden.1, 2 * d],
                &[Activation::Relu, Activation::Relu, Activation::Linear],
                rng,
            ),
            embedding_dim: d,
        }
    }

    /// All-zero weights at the given widths.
    pub fn zeros_with_dims(
        hidden: usize,
        predictor_hidden: usize,
        posterior_hidden: (usize, usize),
        d: usize,
    ) -> Self {
        let z = 2 * hidden;
        Self {
            encoder: LstmParams::zeros(1, hidden),
            predictor: DenseParams::zeros(
                &[z + d, predictor_hidden, 1],
                &[Activation::Relu, Activation::Linear],
            ),
            posterior: DenseParams::zeros(
                &[z + 1, posterior_hidden.0, posterior_hidden.1, 2 * d],
                &[Activation::Relu, Activation::Relu, Activation::Linear],
            ),
            embedding_dim: d,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.predictor.tensors());
        out.extend(self.posterior.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.predictor.tensors_mut());
        out.extend(self.posterior.tensors_mut());
        out
    }
}

impl ParamTensors for MindMeldParams {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.tensors()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
    }
}

/// One embedding per demonstrator, stored as rows of a single matrix so a
/// batch can gather and backpropagate into them.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    ids: Vec<usize>,
    index: BTreeMap<usize, usize>,
    pub weights: Tensor,
    /// Set once training ends; frozen tables only serve lookups.
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Draw every entry from the unit Gaussian prior.
    pub fn from_prior(ids: &[usize], d: usize, rng: &mut impl Rng) -> Self {
        let data = (0..ids.len() * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_rows(ids, d, data)
    }

    pub fn from_rows(ids: &[usize], d: usize, data: Vec<f64>) -> Self {
        assert_eq!(ids.len() * d, data.len(), "row data must fill the table");
        let index = ids.iter().enumerate().map(|(row, &id)| (id, row)).collect();
        Self {
            ids: ids.to_vec(),
            index,
            weights: Tensor::new(vec![ids.len(), d], data)
                .expect("shape/data agree")
                .with_grad(),
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        let row = *self.index.get(&id)?;
        let d = self.dim();
        Some(&self.weights.data()[row * d..(row + 1) * d])
    }

    pub fn row_of(&self, id: usize) -> Result<usize, ModelError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(ModelError::UnknownDemonstrator(id))
    }

    /// Component-wise mean over all entries.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for row in self.weights.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// One training example: a stretch of demonstrator labels and the step
/// inside it being corrected.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub demonstrator_id: usize,
    /// Demonstrator labels over the window.
    pub window: Vec<f64>,
    /// Position of the corrected step inside the window.
    pub target_index: usize,
    /// Ground-truth label at the target step.
    pub o_target: f64,
    /// Demonstrator label at the target step.
    pub a_target: f64,
}

impl WindowSample {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.target_index >= self.window.len() {
            return Err(ModelError::BadSample(format!(
                "target {} outside window of {}",
                self.target_index,
                self.window.len()
            )));
        }
        if self.window.iter().any(|v| v.abs() > WHEEL_LIMIT) {
            return Err(ModelError::BadSample("label outside the wheel range".into()));
        }
        if self.window[self.target_index] != self.a_target {
            return Err(ModelError::BadSample(
                "window does not contain the target label".into(),
            ));
        }
        Ok(())
    }
}

/// Copy the window around `t`, holding the first/last value across the
/// edges — the same convention the demonstrators use for shifted labels.
fn padded_window(series: &[f64], t: usize, len: usize) -> Vec<f64> {
    let half = len as i64 / 2;
    let last = series.len() as i64 - 1;
    (0..len as i64)
        .map(|k| series[(t as i64 - half + k).clamp(0, last) as usize])
        .collect()
}

/// Cut one centered window per timestep of a labeled sequence.
pub fn windows_of(
    seq: &crate::demonstrators::LabelSequence,
    len: usize,
) -> Result<Vec<WindowSample>, ModelError> {
    if seq.len() < len {
        return Err(ModelError::SequenceTooShort {
            seq: seq.len(),
            window: len,
        });
    }
    Ok((0..seq.len())
        .map(|t| WindowSample {
            demonstrator_id: seq.demonstrator_id,
            window: padded_window(&seq.a, t, len),
            target_index: len / 2,
            o_target: seq.o[t],
            a_target: seq.a[t],
        })
        .collect())
}

/// Everything the network computes for one step of one demonstrator.
#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    /// Predicted ground-truth-minus-label difference, wheel units.
    pub d_pred: f64,
    /// The label with the predicted difference applied, saturated at the
    /// wheel range.
    pub corrected: f64,
    /// Posterior sample of the demonstrator's embedding.
    pub w_hat: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub posterior_log_var: Vec<f64>,
}

/// Per-sample training loss: squared embedding-sample error summed over
/// dimensions, plus squared difference-prediction error.
pub fn sample_loss(out: &CorrectionOutput, sample: &WindowSample, w_true: &[f64]) -> f64 {
    let w_err: f64 = out
        .w_hat
        .iter()
        .zip(w_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d_err = out.d_pred - (sample.o_target - sample.a_target);
    w_err + d_err * d_err
}

/// Network leaves bound into one tape.
pub(crate) struct BoundModel {
    encoder: BoundLstm,
    predictor: BoundDense,
    posterior: BoundDense,
    table: NodeId,
    d: usize,
}

impl BoundModel {
    pub(crate) fn bind(
        g: &mut Graph,
        params: &MindMeldParams,
        table: &Tensor,
    ) -> Self {
        Self {
            encoder: params.encoder.bind(g),
            predictor: params.predictor.bind(g),
            posterior: params.posterior.bind(g),
            table: g.leaf(table),
            d: params.embedding_dim,
        }
    }

    /// Leaf ids: network tensors in [`MindMeldParams::tensors`] order, then
    /// the embedding table.
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut out = self.encoder.ids();
        out.extend(self.predictor.ids());
        out.extend(self.posterior.ids());
        out.push(self.table);
        out
    }
}

/// Graph nodes of one batched forward pass.
pub(crate) struct BatchNodes {
    pub d_pred: NodeId,
    pub w_rows: NodeId,
    pub w_hat: NodeId,
    pub mean: NodeId,
    pub log_var: NodeId,
}

/// Run a batch of same-length windows through the bound network. `rows`
/// picks each sample's embedding out of the table; `noise` drives the
/// posterior sample.
pub(crate) fn forward_batch(
    g: &mut Graph,
    bound: &BoundModel,
    windows: &[&[f64]],
    rows: &[usize],
    noise: &Tensor,
) -> Result<BatchNodes, ModelError> {
    let b = windows.len();
    let len = windows[0].len();
    let steps: Vec<NodeId> = (0..len)
        .map(|t| {
            let col: Vec<f64> = windows.iter().map(|w| w[t]).collect();
            g.constant_matrix(b, 1, col)
        })
        .collect::<Result<_, _>>()?;
    let z = bound.encoder.forward(g, &steps)?;
    let w_rows = g.gather_rows(bound.table, rows)?;
    let f_in = g.concat_cols(&[z, w_rows])?;
    let d_pred = bound.predictor.forward(g, f_in)?;
    let g_in = g.concat_cols(&[z, d_pred])?;
    let post = bound.posterior.forward(g, g_in)?;
    let mean = g.slice_cols(post, 0, bound.d)?;
    let raw_log_var = g.slice_cols(post, bound.d, bound.d)?;
    let log_var = g.clamp(raw_log_var, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
    let w_hat = g.sample_gaussian_reparam(mean, log_var, noise)?;
    Ok(BatchNodes {
        d_pred,
        w_rows,
        w_hat,
        mean,
        log_var,
    })
}

/// Mean over the batch of the per-sample loss, as a graph scalar.
pub(crate) fn loss_node(
    g: &mut Graph,
    nodes: &BatchNodes,
    diff_targets: &[f64],
) -> Result<NodeId, ModelError> {
    let b = diff_targets.len();
    let w_err = g.sub(nodes.w_hat, nodes.w_rows)?;
    let w_sq = g.square(w_err);
    let w_sums = g.row_sums(w_sq);
    let targets = g.constant_matrix(b, 1, diff_targets.to_vec())?;
    let d_err = g.sub(nodes.d_pred, targets)?;
    let d_sq = g.square(d_err);
    let per_sample = g.add(w_sums, d_sq)?;
    let total = g.sum_all(per_sample);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Forward one sample through the network.
pub fn forward(
    params: &MindMeldParams,
    table: &EmbeddingTable,
    sample: &WindowSample,
    noise: &[f64],
) -> Result<CorrectionOutput, ModelError> {
    sample.validate()?;
    let row = table.row_of(sample.demonstrator_id)?;
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, &table.weights);
    let noise_t = Tensor::matrix(1, params.embedding_dim, noise.to_vec())?;
    let nodes = forward_batch(&mut g, &bound, &[&sample.window], &[row], &noise_t)?;
    let d_pred = g.value(nodes.d_pred)[0];
    Ok(CorrectionOutput {
        d_pred,
        corrected: (sample.a_target + d_pred).clamp(-WHEEL_LIMIT, WHEEL_LIMIT),
        w_hat: g.value(nodes.w_hat).to_vec(),
        posterior_mean: g.value(nodes.mean).to_vec(),
        posterior_log_var: g.value(nodes.log_var).to_vec(),
    })
}

/// Write `demonstrator_id,w0,w1,timing,magnitude` rows for every table
/// entry with a known style, for scatter plots of the learned space.
pub fn save_embeddings_csv(
    path: &Path,
    table: &EmbeddingTable,
    styles: &[StyleProfile],
) -> Result<(), std::io::Error> {
    let mut out = String::from("demonstrator_id,w0,w1,timing,magnitude\n");
    for &id in table.ids() {
        let Some(style) = styles.iter().find(|s| s.id == id) else {
            continue;
        };
        let w = table.get(id).expect("listed id is present");
        let ws = w
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("{id},{ws},{},{}\n", style.timing, style.magnitude));
    }
    fs::write(path, out)
}

/// Save network parameters and embeddings as one checkpoint.
pub fn save_model(
    path: &Path,
    params: &MindMeldParams,
    table: &EmbeddingTable,
) -> Result<(), ModelError> {
    let mut ck = Checkpoint::new();
    ck.insert("encoder", &params.encoder.tensors());
    ck.insert("predictor", &params.predictor.tensors());
    ck.insert("posterior", &params.posterior.tensors());
    ck.insert("embeddings", &[&table.weights]);
    let ids = Tensor::vector(table.ids().iter().map(|&i| i as f64).collect());
    ck.insert("embedding_ids", &[&ids]);
    ck.save(path)?;
    Ok(())
}

/// Load a checkpoint written by [`save_model`]. The architecture must match
/// the full-size layout.
pub fn load_model(path: &Path) -> Result<(MindMeldParams, EmbeddingTable), ModelError> {
    let ck = Checkpoint::load(path)?;
    let mut params = MindMeldParams::zeros_with_dims(
        ENCODER_HIDDEN,
        PREDICTOR_HIDDEN,
        POSTERIOR_HIDDEN,
        EMBEDDING_DIM,
    );
    for (group, tensors) in [
        ("encoder", params.encoder.tensors_mut()),
        ("predictor", params.predictor.tensors_mut()),
        ("posterior", params.posterior.tensors_mut()),
    ] {
        fill_group(&ck, group, tensors)?;
    }
    let ids_blob = &ck.group("embedding_ids")?[0];
    let ids: Vec<usize> = ids_blob.to_tensor(false)?.data().iter().map(|&v| v as usize).collect();
    let weights = ck.group("embeddings")?[0].to_tensor(true)?;
    let (rows, d) = weights.dims2();
    if rows != ids.len() || d != EMBEDDING_DIM {
        return Err(ModelError::BadCheckpoint(format!(
            "{rows}x{d} embedding table for {} ids",
            ids.len()
        )));
    }
    let mut table = EmbeddingTable::from_rows(&ids, d, weights.data().to_vec());
    table.frozen = true;
    Ok((params, table))
}

fn fill_group(
    ck: &Checkpoint,
    name: &str,
    mut tensors: Vec<&mut Tensor>,
) -> Result<(), ModelError> {
    let blobs = ck.group(name)?;
    if blobs.len() != tensors.len() {
        return Err(ModelError::BadCheckpoint(format!(
            "group {name}: {} tensors, expected {}",
            blobs.len(),
            tensors.len()
        )));
    }
    for (t, blob) in tensors.iter_mut().zip(blobs) {
        let loaded = blob.to_tensor(true)?;
        if loaded.shape() != t.shape() {
            return Err(ModelError::BadCheckpoint(format!(
                "group {name}: shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(loaded.data());
    }
    Ok(())
}
