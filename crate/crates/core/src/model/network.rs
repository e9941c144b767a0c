//! Batched forward and backward passes through the full network.
//!
//! Sequences in a batch are independent except through the batch-norm
//! statistics, which in train mode are taken over every unmasked timestep of
//! every sequence in the batch. Per-sequence work runs in parallel; every
//! reduction runs sequentially in batch order so results do not depend on
//! thread scheduling.

use rand::Rng;
use rayon::prelude::*;

use super::loss::contrastive_loss_grad;
use super::lstm::LstmTrace;
use super::{
    Gradients, LstmLayer, Mode, ModelConfig, ModelError, ModelRng, ModelWeights, Readout,
    TrainingPair,
};
use crate::embedding::EmbeddingVector;
use crate::features::{FeatureSequence, FEATURE_DIM};

/// Dropout masks for one sequence, already scaled by `1 / keep`.
#[derive(Clone, Debug, Default)]
struct SequenceMasks {
    recurrent: Vec<Option<Vec<f64>>>,
    /// Entry `l - 1` applies to the input of layer `l`, `len x H`.
    inter: Vec<Option<Vec<f64>>>,
}

fn dropout_mask(rng: &mut ModelRng, n: usize, rate: f64) -> Option<Vec<f64>> {
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Draws masks for the `len` valid timesteps only, so padding never changes
/// what is drawn.
fn draw_masks(config: &ModelConfig, len: usize, rng: &mut ModelRng) -> SequenceMasks {
    let h = config.hidden_units;
    let mut masks = SequenceMasks::default();
    for l in 0..config.num_layers {
        if l > 0 {
            masks
                .inter
                .push(dropout_mask(rng, len * h, config.dropout_rate));
        }
        masks
            .recurrent
            .push(dropout_mask(rng, h, config.recurrent_dropout_rate));
    }
    masks
}

struct NormTrace {
    inv_std: Vec<f64>,
    /// Per sequence, `len x H`.
    xhat: Vec<Vec<f64>>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct BatchTrace {
    lens: Vec<usize>,
    /// `[layer][sequence]`
    layers: Vec<Vec<LstmTrace>>,
    norms: Vec<NormTrace>,
    masks: Vec<SequenceMasks>,
    embeddings: Vec<Vec<f64>>,
}

fn check_inputs(weights: &ModelWeights, seqs: &[&FeatureSequence]) -> Result<(), ModelError> {
    if weights.config.input_dim != FEATURE_DIM {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects {} input features, sequences carry {FEATURE_DIM}",
            weights.config.input_dim
        )));
    }
    if weights.layers.is_empty() || weights.norms.len() + 1 != weights.layers.len() {
        return Err(ModelError::ShapeMismatch(
            "inconsistent layer/norm count".into(),
        ));
    }
    if seqs.iter().any(|s| s.valid_len() == 0) {
        return Err(ModelError::ShapeMismatch(
            "sequence without valid timesteps".into(),
        ));
    }
    Ok(())
}

fn run_forward(
    weights: &ModelWeights,
    seqs: &[&FeatureSequence],
    mode: Mode,
    rng: Option<&mut ModelRng>,
) -> Result<BatchTrace, ModelError> {
    check_inputs(weights, seqs)?;
    let config = &weights.config;
    let lens: Vec<usize> = seqs.iter().map(|s| s.valid_len()).collect();
    let masks: Vec<SequenceMasks> = match (mode, rng) {
        (Mode::Train, Some(rng)) => lens
            .iter()
            .map(|&len| draw_masks(config, len, rng))
            .collect(),
        (Mode::Train, None) => {
            return Err(ModelError::InvalidConfig(
                "train mode needs a random source".into(),
            ))
        }
        (Mode::Infer, _) => vec![SequenceMasks::default(); seqs.len()],
    };

    let mut inputs: Vec<Vec<f64>> = seqs
        .iter()
        .zip(&lens)
        .map(|(s, &len)| s.rows()[..len].iter().flatten().copied().collect())
        .collect();
    let mut layers: Vec<Vec<LstmTrace>> = Vec::with_capacity(weights.layers.len());
    let mut norms: Vec<NormTrace> = Vec::with_capacity(weights.norms.len());

    for (l, layer) in weights.layers.iter().enumerate() {
        if l > 0 {
            let prev = &layers[l - 1];
            let bn = &weights.norms[l - 1];
            let norm = normalize_batch(prev, &lens, bn, mode, config.bn_epsilon);
            inputs = norm
                .xhat
                .iter()
                .zip(&masks)
                .map(|(xhat, m)| {
                    let h = bn.dim();
                    let mut y: Vec<f64> = xhat
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| bn.gamma[k % h] * v + bn.beta[k % h])
                        .collect();
                    if let Some(Some(drop)) = m.inter.get(l - 1) {
                        y.iter_mut().zip(drop).for_each(|(v, d)| *v *= d);
                    }
                    y
                })
                .collect();
            norms.push(norm);
        }
        let traces: Vec<LstmTrace> = std::mem::take(&mut inputs)
            .into_par_iter()
            .zip(lens.par_iter())
            .zip(masks.par_iter())
            .map(|((x, &len), m)| layer.forward(x, len, m.recurrent.get(l).cloned().flatten()))
            .collect();
        layers.push(traces);
    }

    let embeddings: Vec<Vec<f64>> = layers
        .last()
        .unwrap()
        .iter()
        .map(|t| match weights.config.readout {
            Readout::Last => t.last_hidden().to_vec(),
            Readout::Mean => t.mean_hidden(),
        })
        .collect();
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok(BatchTrace {
        lens,
        layers,
        norms,
        masks,
        embeddings,
    })
}

fn normalize_batch(
    prev: &[LstmTrace],
    lens: &[usize],
    bn: &super::BatchNorm,
    mode: Mode,
    eps: f64,
) -> NormTrace {
    let h = bn.dim();
    let (mean, var) = match mode {
        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
        Mode::Train => {
            let count: usize = lens.iter().sum();
            let mut mean = vec![0.0; h];
            for t in prev {
                for row in t.h.chunks_exact(h) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; h];
            for t in prev {
                for row in t.h.chunks_exact(h) {
                    for j in 0..h {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xhat = prev
        .iter()
        .map(|t| {
            t.h.iter()
                .enumerate()
                .map(|(k, &v)| (v - mean[k % h]) * inv_std[k % h])
                .collect()
        })
        .collect();
    NormTrace {
        inv_std,
        xhat,
        batch_mean: mean,
        batch_var: var,
    }
}

/// Backpropagates embedding gradients (one per sequence) through the batch.
fn run_backward(weights: &ModelWeights, trace: &BatchTrace, d_embed: &[Vec<f64>]) -> Gradients {
    let mut grads = Gradients::zeros_like(weights);
    let num_layers = weights.layers.len();
    let mut dh_out: Vec<Vec<f64>> = trace
        .lens
        .iter()
        .zip(d_embed)
        .map(|(&len, de)| {
            let h = de.len();
            match weights.config.readout {
                Readout::Last => {
                    let mut v = vec![0.0; len * h];
                    v[(len - 1) * h..].copy_from_slice(de);
                    v
                }
                Readout::Mean => {
                    let share: Vec<f64> = de.iter().map(|g| g / len as f64).collect();
                    share.repeat(len)
                }
            }
        })
        .collect();

    for l in (0..num_layers).rev() {
        let layer = &weights.layers[l];
        let per_seq: Vec<(LstmLayer, Vec<f64>)> = trace.layers[l]
            .par_iter()
            .zip(dh_out.par_iter())
            .map(|(t, dh)| {
                let mut g = LstmLayer::zeros_like(layer);
                let dx = layer.backward(t, dh, &mut g, l > 0);
                (g, dx)
            })
            .collect();
        let total = &mut grads.layers[l];
        for (g, _) in &per_seq {
            for (dst, src) in [
                (&mut total.w_input, &g.w_input),
                (&mut total.w_recurrent, &g.w_recurrent),
                (&mut total.bias, &g.bias),
            ] {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if l == 0 {
            break;
        }

        // Dropout, then batch norm, back to the outputs of layer l - 1.
        let bn = &weights.norms[l - 1];
        let norm = &trace.norms[l - 1];
        let h = bn.dim();
        let dy: Vec<Vec<f64>> = per_seq
            .into_iter()
            .zip(&trace.masks)
            .map(|((_, mut dx), m)| {
                if let Some(Some(drop)) = m.inter.get(l - 1) {
                    dx.iter_mut().zip(drop).for_each(|(v, d)| *v *= d);
                }
                dx
            })
            .collect();
        let count: usize = trace.lens.iter().sum();
        let mut sum_dxhat = vec![0.0; h];
        let mut sum_dxhat_xhat = vec![0.0; h];
        for (dys, xhat) in dy.iter().zip(&norm.xhat) {
            for (k, (&d, &x)) in dys.iter().zip(xhat).enumerate() {
                let j = k % h;
                grads.gamma[l - 1][j] += d * x;
                grads.beta[l - 1][j] += d;
                let dxhat = d * bn.gamma[j];
                sum_dxhat[j] += dxhat;
                sum_dxhat_xhat[j] += dxhat * x;
            }
        }
        let n = count as f64;
        dh_out = dy
            .iter()
            .zip(&norm.xhat)
            .map(|(dys, xhat)| {
                dys.iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(k, (&d, &x))| {
                        let j = k % h;
                        let dxhat = d * bn.gamma[j];
                        norm.inv_std[j] / n * (n * dxhat - sum_dxhat[j] - x * sum_dxhat_xhat[j])
                    })
                    .collect()
            })
            .collect();
    }
    grads
}

fn to_embedding(v: Vec<f64>) -> Result<EmbeddingVector, ModelError> {
    EmbeddingVector::new(v).ok_or(ModelError::NonFiniteActivation)
}

/// Embeds one sequence. In train mode dropout masks are drawn from `rng`
/// and batch norm uses this sequence's own statistics; in infer mode `rng`
/// is not touched.
pub fn forward(
    weights: &ModelWeights,
    x: &FeatureSequence,
    mode: Mode,
    rng: &mut ModelRng,
) -> Result<EmbeddingVector, ModelError> {
    let rng = (mode == Mode::Train).then_some(rng);
    let trace = run_forward(weights, &[x], mode, rng)?;
    to_embedding(trace.embeddings.into_iter().next().unwrap())
}

/// Inference-mode embedding.
pub fn embed(weights: &ModelWeights, x: &FeatureSequence) -> Result<EmbeddingVector, ModelError> {
    let trace = run_forward(weights, &[x], Mode::Infer, None)?;
    to_embedding(trace.embeddings.into_iter().next().unwrap())
}

/// Inference-mode embeddings for many sequences, in input order.
pub fn embed_all(
    weights: &ModelWeights,
    xs: &[FeatureSequence],
) -> Result<Vec<EmbeddingVector>, ModelError> {
    xs.par_iter().map(|x| embed(weights, x)).collect()
}

/// Loss, gradients and batch-norm statistics for one training batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Mean contrastive loss over the pairs.
    pub loss: f64,
    pub gradients: Gradients,
    /// `(mean, variance)` per batch-norm layer, for running-stat updates.
    pub norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn pair_refs(pairs: &[TrainingPair]) -> Vec<&FeatureSequence> {
    pairs.iter().flat_map(|p| [&p.a, &p.b]).collect()
}

/// Mean contrastive loss of a batch in train mode. Consumes the same random
/// draws as [`batch_loss_and_gradients`] for the same batch.
pub fn batch_loss(
    weights: &ModelWeights,
    pairs: &[TrainingPair],
    margin: f64,
    rng: &mut ModelRng,
) -> Result<f64, ModelError> {
    let trace = run_forward(weights, &pair_refs(pairs), Mode::Train, Some(rng))?;
    let total: f64 = pairs
        .iter()
        .enumerate()
        .map(|(p, pair)| {
            contrastive_loss_grad(
                &trace.embeddings[2 * p],
                &trace.embeddings[2 * p + 1],
                pair.label(),
                margin,
            )
            .0
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

pub fn batch_loss_and_gradients(
    weights: &ModelWeights,
    pairs: &[TrainingPair],
    margin: f64,
    rng: &mut ModelRng,
) -> Result<BatchOutcome, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    let trace = run_forward(weights, &pair_refs(pairs), Mode::Train, Some(rng))?;
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut d_embed = Vec::with_capacity(2 * pairs.len());
    for (p, pair) in pairs.iter().enumerate() {
        let (l, mut g) = contrastive_loss_grad(
            &trace.embeddings[2 * p],
            &trace.embeddings[2 * p + 1],
            pair.label(),
            margin,
        );
        loss += l;
        g.iter_mut().for_each(|v| *v *= scale);
        d_embed.push(g.clone());
        d_embed.push(g.into_iter().map(|v| -v).collect());
    }
    let gradients = run_backward(weights, &trace, &d_embed);
    if !gradients.is_finite() {
        return Err(ModelError::NonFiniteGradient);
    }
    let norm_stats = trace
        .norms
        .into_iter()
        .map(|n| (n.batch_mean, n.batch_var))
        .collect();
    Ok(BatchOutcome {
        loss: loss * scale,
        gradients,
        norm_stats,
    })
}

/// Gradients of the contrastive loss of a single pair, treated as a batch of
/// two sequences.
pub fn backward(
    weights: &ModelWeights,
    pair: &TrainingPair,
    margin: f64,
    rng: &mut ModelRng,
) -> Result<Gradients, ModelError> {
    Ok(batch_loss_and_gradients(weights, std::slice::from_ref(pair), margin, rng)?.gradients)
}
