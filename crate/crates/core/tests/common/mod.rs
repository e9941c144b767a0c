//! Finite-difference gradient checking shared by the gradient tests and the
//! acceptance runner.
#![allow(dead_code)]

use keytrace::features::{FeatureSequence, FEATURE_DIM};
use keytrace::model::{
    batch_loss, batch_loss_and_gradients, model_rng, ModelConfig, ModelRng, ModelWeights, Readout,
    TrainingPair,
};
use rand::Rng;

const STEP: f64 = 1e-5;

pub fn random_sequence(rng: &mut ModelRng, valid: usize, m: usize) -> FeatureSequence {
    let rows = (0..m)
        .map(|t| {
            if t < valid {
                [
                    rng.random(),
                    rng.random::<f64>() * 0.3,
                    rng.random::<f64>() - 0.3,
                    rng.random(),
                    rng.random(),
                ]
            } else {
                [0.0; FEATURE_DIM]
            }
        })
        .collect();
    FeatureSequence::from_rows(rows, valid, valid).unwrap()
}

/// Central-difference gradient of the batch loss over every trainable
/// parameter, in `ModelWeights::trainable` order.
pub fn finite_difference(
    weights: &ModelWeights,
    pairs: &[TrainingPair],
    margin: f64,
) -> Vec<Vec<f64>> {
    let loss = |w: &ModelWeights| batch_loss(w, pairs, margin, &mut model_rng(0)).unwrap();
    let shapes: Vec<usize> = weights.trainable().iter().map(|b| b.len()).collect();
    let mut out = Vec::new();
    for (block, &n) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let mut plus = weights.clone();
            plus.trainable_mut()[block][i] += STEP;
            let mut minus = weights.clone();
            minus.trainable_mut()[block][i] -= STEP;
            g.push((loss(&plus) - loss(&minus)) / (2.0 * STEP));
        }
        out.push(g);
    }
    out
}

pub fn max_relative_error(analytic: &[&[f64]], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&a, &n) in a.iter().zip(n) {
            let denom = a.abs().max(n.abs());
            if denom < 1e-7 {
                // Both effectively zero; compare absolutely.
                worst = worst.max((a - n).abs() / 1e-7);
            } else {
                worst = worst.max((a - n).abs() / denom);
            }
        }
    }
    worst
}

pub fn gradient_check_case(draw: u64) -> f64 {
    gradient_check_with_readout(draw, Readout::Last)
}

pub fn gradient_check_with_readout(draw: u64, readout: Readout) -> f64 {
    let mut rng = model_rng(1000 + draw);
    let units = if rng.random::<bool>() { 2 } else { 3 };
    let m = if rng.random::<bool>() { 2 } else { 5 };
    let config = ModelConfig {
        hidden_units: units,
        sequence_len: m,
        dropout_rate: 0.0,
        recurrent_dropout_rate: 0.0,
        readout,
        rng_seed: draw,
        ..ModelConfig::default()
    };
    let mut weights = ModelWeights::init(&config).unwrap();
    // Perturb batch-norm parameters away from identity.
    for n in &mut weights.norms {
        n.gamma
            .iter_mut()
            .for_each(|g| *g = rng.random_range(0.5..1.5));
        n.beta
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let pairs: Vec<TrainingPair> = (0..2)
        .map(|i| {
            let (la, lb) = (rng.random_range(1..=m), rng.random_range(1..=m));
            TrainingPair {
                a: random_sequence(&mut rng, la, m),
                b: random_sequence(&mut rng, lb, m),
                same_user: i == 0,
            }
        })
        .collect();
    let margin = 1.5;
    let analytic = batch_loss_and_gradients(&weights, &pairs, margin, &mut model_rng(0))
        .unwrap()
        .gradients;
    let numeric = finite_difference(&weights, &pairs, margin);
    max_relative_error(&analytic.blocks(), &numeric)
}
