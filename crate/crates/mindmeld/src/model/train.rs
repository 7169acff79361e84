//! Joint network/embedding training, embedding inference for new
//! demonstrators, and label correction with a trained model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Adam, Graph, Tensor};
use crate::demonstrators::LabelSequence;
use crate::driving::WHEEL_LIMIT;

use super::{
    forward_batch, loss_node, padded_window, BoundModel, EmbeddingTable, MindMeldParams,
    ModelError, WindowSample, DEFAULT_WINDOW_LEN,
};

/// Optimization settings shared by calibration training and embedding
/// inference.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many epochs without an improved epoch loss.
    pub plateau_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 0.001,
            plateau_epochs: 20,
        }
    }
}

/// Check a training set: non-empty, internally valid, one window length.
fn check_samples(samples: &[WindowSample]) -> Result<usize, ModelError> {
    let first = samples.first().ok_or(ModelError::EmptySamples)?;
    let len = first.window.len();
    for s in samples {
        s.validate()?;
        if s.window.len() != len {
            return Err(ModelError::BadSample(format!(
                "window of {} in a batch of {len}-step windows",
                s.window.len()
            )));
        }
    }
    Ok(len)
}

/// One optimizer step on one minibatch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn step_batch(
    params: &mut MindMeldParams,
    table: &mut EmbeddingTable,
    samples: &[WindowSample],
    chunk: &[usize],
    rows_all: &[usize],
    adam: &mut Adam,
    train_network: bool,
    rng: &mut impl Rng,
) -> Result<f64, ModelError> {
    let b = chunk.len();
    let d = params.embedding_dim();
    let noise_data: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::matrix(b, d, noise_data)?;
    let windows: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].window.as_slice()).collect();
    let rows: Vec<usize> = chunk.iter().map(|&i| rows_all[i]).collect();
    let diffs: Vec<f64> = chunk
        .iter()
        .map(|&i| samples[i].o_target - samples[i].a_target)
        .collect();

    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, &table.weights);
    let nodes = forward_batch(&mut g, &bound, &windows, &rows, &noise)?;
    let loss = loss_node(&mut g, &nodes, &diffs)?;
    let loss_val = g.value(loss)[0];
    g.backward(loss)?;

    let ids = bound.ids();
    if train_network {
        let mut tensors: Vec<&mut Tensor> = params.tensors_mut();
        tensors.push(&mut table.weights);
        for (t, &id) in tensors.iter_mut().zip(&ids) {
            t.grad = g.grad(id).map(|s| s.to_vec());
        }
        adam.step(&mut tensors)?;
    } else {
        let table_id = *ids.last().expect("bound model always has leaves");
        table.weights.grad = g.grad(table_id).map(|s| s.to_vec());
        adam.step(&mut [&mut table.weights])?;
    }
    Ok(loss_val)
}

/// Run seeded epochs of minibatch descent; returns the per-epoch loss trace.
fn descend(
    params: &mut MindMeldParams,
    table: &mut EmbeddingTable,
    samples: &[WindowSample],
    cfg: &TrainConfig,
    train_network: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, ModelError> {
    let rows_all: Vec<usize> = samples
        .iter()
        .map(|s| table.row_of(s.demonstrator_id))
        .collect::<Result<_, _>>()?;
    let mut adam = if train_network {
        let mut refs = params.tensors();
        refs.push(&table.weights);
        Adam::new(cfg.lr, &refs)
    } else {
        Adam::new(cfg.lr, &[&table.weights])
    };

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let loss = step_batch(
                params,
                table,
                samples,
                chunk,
                &rows_all,
                &mut adam,
                train_network,
                rng,
            )?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_loss /= samples.len() as f64;
        trace.push(epoch_loss);
        if epoch_loss < best * (1.0 - 1e-4) {
            best = epoch_loss;
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.plateau_epochs {
            break;
        }
    }
    Ok(trace)
}

/// Jointly fit the given network and a fresh prior-initialized embedding
/// table to the calibration windows.
pub fn train_with(
    mut params: MindMeldParams,
    samples: &[WindowSample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(MindMeldParams, EmbeddingTable, Vec<f64>), ModelError> {
    check_samples(samples)?;
    let mut ids: Vec<usize> = samples.iter().map(|s| s.demonstrator_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut table = EmbeddingTable::from_prior(&ids, params.embedding_dim(), rng);
    let trace = descend(&mut params, &mut table, samples, cfg, true, rng)?;
    table.frozen = true;
    Ok((params, table, trace))
}

/// Train a full-size network from scratch on calibration windows,
/// deterministically per seed.
pub fn train_calibration(
    samples: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MindMeldParams, EmbeddingTable, Vec<f64>), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MindMeldParams::new(&mut rng);
    train_with(params, samples, cfg, &mut rng)
}

/// Fit an embedding for one unseen demonstrator against a frozen network:
/// start from the mean of the trained embeddings and descend on the same
/// loss with every network weight held fixed.
pub fn infer_new_embedding(
    params: &MindMeldParams,
    samples: &[WindowSample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    check_samples(samples)?;
    if !table.frozen {
        return Err(ModelError::NotFrozen);
    }
    let id = samples[0].demonstrator_id;
    if samples.iter().any(|s| s.demonstrator_id != id) {
        return Err(ModelError::BadSample(
            "embedding inference takes one demonstrator at a time".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = EmbeddingTable::from_rows(&[id], params.embedding_dim(), table.mean_embedding());
    // The network is bound read-only; only the one-row table descends.
    let mut frozen = params.clone();
    descend(&mut frozen, &mut w, samples, cfg, false, &mut rng)?;
    Ok(w.weights.data().to_vec())
}

/// Variant for callers that already hold a start embedding.
pub fn infer_new_embedding_with(
    params: &MindMeldParams,
    samples: &[WindowSample],
    start: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    check_samples(samples)?;
    if start.len() != params.embedding_dim() {
        return Err(ModelError::EmbeddingDim {
            got: start.len(),
            want: params.embedding_dim(),
        });
    }
    let id = samples[0].demonstrator_id;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = EmbeddingTable::from_rows(&[id], params.embedding_dim(), start.to_vec());
    let mut frozen = params.clone();
    descend(&mut frozen, &mut w, samples, cfg, false, &mut rng)?;
    Ok(w.weights.data().to_vec())
}

/// Like [`infer_new_embedding`], but the network weights descend along
/// with the new embedding. Returns the adapted network copy and the
/// embedding; the caller's original parameters are untouched.
pub fn adapt_new_embedding_jointly(
    params: &MindMeldParams,
    samples: &[WindowSample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MindMeldParams, Vec<f64>), ModelError> {
    check_samples(samples)?;
    if !table.frozen {
        return Err(ModelError::NotFrozen);
    }
    let id = samples[0].demonstrator_id;
    if samples.iter().any(|s| s.demonstrator_id != id) {
        return Err(ModelError::BadSample(
            "embedding inference takes one demonstrator at a time".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = EmbeddingTable::from_rows(&[id], params.embedding_dim(), table.mean_embedding());
    let mut adapted = params.clone();
    descend(&mut adapted, &mut w, samples, cfg, true, &mut rng)?;
    Ok((adapted, w.weights.data().to_vec()))
}

/// Map a stream of demonstrator labels to corrected labels using a fixed
/// embedding: every step gets `clip(label + predicted difference)`.
pub fn correct_actions(
    params: &MindMeldParams,
    w: &[f64],
    actions: &[f64],
    window_len: usize,
) -> Result<Vec<f64>, ModelError> {
    if w.len() != params.embedding_dim() {
        return Err(ModelError::EmbeddingDim {
            got: w.len(),
            want: params.embedding_dim(),
        });
    }
    if actions.len() < window_len {
        return Err(ModelError::SequenceTooShort {
            seq: actions.len(),
            window: window_len,
        });
    }
    let windows: Vec<Vec<f64>> = (0..actions.len())
        .map(|t| padded_window(actions, t, window_len))
        .collect();
    let window_refs: Vec<&[f64]> = windows.iter().map(|v| v.as_slice()).collect();
    let b = actions.len();
    let d = params.embedding_dim();
    let w_tensor = Tensor::matrix(1, d, w.to_vec())?;
    let noise = Tensor::zeros(vec![b, d]);

    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, &w_tensor);
    let nodes = forward_batch(&mut g, &bound, &window_refs, &vec![0; b], &noise)?;
    let d_pred = g.value(nodes.d_pred);
    Ok(actions
        .iter()
        .zip(d_pred)
        .map(|(a, d)| (a + d).clamp(-WHEEL_LIMIT, WHEEL_LIMIT))
        .collect())
}

/// [`correct_actions`] over the demonstrator half of a labeled sequence,
/// with the default window.
pub fn correct_labels(
    params: &MindMeldParams,
    w: &[f64],
    seq: &LabelSequence,
) -> Result<Vec<f64>, ModelError> {
    correct_actions(params, w, &seq.a, DEFAULT_WINDOW_LEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstrators::{corrupt, StyleProfile};
    use crate::model::windows_of;

    fn toy_params(rng: &mut impl Rng) -> MindMeldParams {
        MindMeldParams::with_dims(4, 8, (6, 4), 2, rng)
    }

    /// Smooth in-range ground truth with some variety per task.
    fn toy_truth(task: usize, steps: usize) -> Vec<f64> {
        (0..steps)
            .map(|i| {
                let x = i as f64 * 0.23 + task as f64 * 1.7;
                1.1 * x.sin() + 0.5 * (0.37 * x).cos()
            })
            .collect()
    }

    fn toy_windows(styles: &[StyleProfile], window_len: usize) -> Vec<WindowSample> {
        let mut out = Vec::new();
        for style in styles {
            for task in 0..2 {
                let o = toy_truth(task, 40);
                let mut seq = corrupt(&o, style, 900 + style.id as u64).unwrap();
                seq.task_id = task;
                out.extend(windows_of(&seq, window_len).unwrap());
            }
        }
        out
    }

    fn toy_styles() -> Vec<StyleProfile> {
        vec![
            StyleProfile { id: 0, timing: 0, magnitude: 1.6, noise_sigma: 0.02 },
            StyleProfile { id: 1, timing: 0, magnitude: 0.5, noise_sigma: 0.02 },
        ]
    }

    #[test]
    fn loss_falls_during_toy_training() {
        let samples = toy_windows(&toy_styles(), 8);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
            plateau_epochs: 60,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = toy_params(&mut rng);
        let (_, table, trace) = train_with(params, &samples, &cfg, &mut rng).unwrap();
        assert!(table.frozen);
        assert_eq!(table.ids(), &[0, 1]);
        let (first, last) = (trace[0], *trace.last().unwrap());
        assert!(
            last < first / 5.0,
            "loss went from {first} to {last} over {} epochs",
            trace.len()
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let samples = toy_windows(&toy_styles(), 8);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 0.01,
            plateau_epochs: 20,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let params = toy_params(&mut rng);
            train_with(params, &samples, &cfg, &mut rng).unwrap()
        };
        let (p1, t1, trace1) = run();
        let (p2, t2, trace2) = run();
        assert_eq!(trace1, trace2);
        assert_eq!(t1.weights.data(), t2.weights.data());
        for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let samples = toy_windows(&toy_styles(), 8);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e120,
            plateau_epochs: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = toy_params(&mut rng);
        match train_with(params, &samples, &cfg, &mut rng) {
            Err(ModelError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mixed_window_lengths_are_rejected() {
        let mut samples = toy_windows(&toy_styles(), 8);
        samples.last_mut().unwrap().window.pop();
        samples.last_mut().unwrap().target_index = 0;
        let s = samples.last_mut().unwrap();
        s.a_target = s.window[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = toy_params(&mut rng);
        assert!(matches!(
            train_with(params, &samples, &TrainConfig::default(), &mut rng),
            Err(ModelError::BadSample(_))
        ));
    }

    #[test]
    fn zero_step_inference_returns_the_mean_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = toy_params(&mut rng);
        let mut table = EmbeddingTable::from_rows(&[0, 1], 2, vec![1.0, 2.0, 3.0, 6.0]);
        table.frozen = true;
        let style = StyleProfile { id: 5, timing: 0, magnitude: 1.2, noise_sigma: 0.0 };
        let samples = toy_windows(&[style], 8);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let w = infer_new_embedding(&params, &samples, &table, &cfg, 1).unwrap();
        assert_eq!(w, vec![2.0, 4.0]);
    }

    #[test]
    fn inference_leaves_the_network_bitwise_unchanged() {
        let samples = toy_windows(&toy_styles(), 8);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            plateau_epochs: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = toy_params(&mut rng);
        let (params, table, _) = train_with(params, &samples, &cfg, &mut rng).unwrap();
        let before: Vec<Vec<u64>> = params
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();

        let style = StyleProfile { id: 9, timing: 1, magnitude: 1.4, noise_sigma: 0.02 };
        let new_samples = toy_windows(&[style], 8);
        let w = infer_new_embedding(&params, &new_samples, &table, &cfg, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_ne!(w, table.mean_embedding(), "optimization should move w");

        let after: Vec<Vec<u64>> = params
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn joint_adaptation_moves_both_the_network_and_the_embedding() {
        let samples = toy_windows(&toy_styles(), 8);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            plateau_epochs: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = toy_params(&mut rng);
        let (params, table, _) = train_with(params, &samples, &cfg, &mut rng).unwrap();

        let style = StyleProfile { id: 9, timing: 1, magnitude: 1.4, noise_sigma: 0.02 };
        let new_samples = toy_windows(&[style], 8);
        let (adapted, w) =
            adapt_new_embedding_jointly(&params, &new_samples, &table, &cfg, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_ne!(w, table.mean_embedding(), "optimization should move w");
        let moved = params
            .tensors()
            .iter()
            .zip(adapted.tensors())
            .any(|(a, b)| a.data() != b.data());
        assert!(moved, "joint mode should also update the network");
    }

    #[test]
    fn inference_requires_a_frozen_table_and_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = toy_params(&mut rng);
        let table = EmbeddingTable::from_rows(&[0], 2, vec![0.0, 0.0]);
        let style = StyleProfile { id: 3, timing: 0, magnitude: 0.7, noise_sigma: 0.0 };
        let samples = toy_windows(&[style], 8);
        assert!(matches!(
            infer_new_embedding(&params, &samples, &table, &TrainConfig::default(), 0),
            Err(ModelError::NotFrozen)
        ));
        let mut frozen = table;
        frozen.frozen = true;
        assert!(matches!(
            infer_new_embedding(&params, &[], &frozen, &TrainConfig::default(), 0),
            Err(ModelError::EmptySamples)
        ));
    }

    #[test]
    fn correction_needs_enough_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = toy_params(&mut rng);
        let err = correct_actions(&params, &[0.0, 0.0], &[0.1; 4], 8).unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooShort { seq: 4, window: 8 }));
        let err = correct_actions(&params, &[0.0], &[0.1; 20], 8).unwrap_err();
        assert!(matches!(err, ModelError::EmbeddingDim { got: 1, want: 2 }));
    }

    #[test]
    fn zero_network_correction_is_the_identity() {
        let params = MindMeldParams::zeros_with_dims(4, 8, (6, 4), 2);
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).sin()).collect();
        let got = correct_actions(&params, &[0.0, 0.0], &a, 8).unwrap();
        assert_eq!(got, a);
    }
}
