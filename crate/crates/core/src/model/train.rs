use std::io::Write;

use rand::Rng;

use super::network::batch_loss_and_gradients;
use super::{model_rng, ModelConfig, ModelError, ModelRng, ModelWeights, TrainingPair};
use crate::features::FeatureSequence;

const DROPOUT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub weights: ModelWeights,
    pub loss_log: Vec<LossRecord>,
}

impl TrainingReport {
    /// Mean batch loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.loss_log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); epochs];
        for r in &self.loss_log {
            sums[r.epoch].0 += r.loss;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    /// `epoch,batch,loss` CSV.
    pub fn write_loss_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,batch,loss")?;
        for r in &self.loss_log {
            writeln!(out, "{},{},{}", r.epoch, r.batch, r.loss)?;
        }
        Ok(())
    }
}

fn sample_batch(
    users: &[Vec<FeatureSequence>],
    batch_size: usize,
    rng: &mut ModelRng,
) -> Vec<TrainingPair> {
    let genuine = batch_size / 2;
    (0..batch_size)
        .map(|i| {
            if i < genuine {
                let u = &users[rng.random_range(0..users.len())];
                let a = rng.random_range(0..u.len());
                let mut b = rng.random_range(0..u.len() - 1);
                if b >= a {
                    b += 1;
                }
                TrainingPair {
                    a: u[a].clone(),
                    b: u[b].clone(),
                    same_user: true,
                }
            } else {
                let ua = rng.random_range(0..users.len());
                let mut ub = rng.random_range(0..users.len() - 1);
                if ub >= ua {
                    ub += 1;
                }
                let (ua, ub) = (&users[ua], &users[ub]);
                TrainingPair {
                    a: ua[rng.random_range(0..ua.len())].clone(),
                    b: ub[rng.random_range(0..ub.len())].clone(),
                    same_user: false,
                }
            }
        })
        .collect()
}

/// Trains from scratch on sequences grouped by user. Each batch holds
/// `batch_size / 2` same-user pairs and the rest different-user pairs.
pub fn train(
    config: &ModelConfig,
    users: &[Vec<FeatureSequence>],
) -> Result<TrainingReport, ModelError> {
    train_with_progress(config, users, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with_progress<F>(
    config: &ModelConfig,
    users: &[Vec<FeatureSequence>],
    mut on_epoch: F,
) -> Result<TrainingReport, ModelError>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    if users.len() < 2 {
        return Err(ModelError::InsufficientUsers(format!(
            "{} user(s)",
            users.len()
        )));
    }
    if let Some(i) = users.iter().position(|u| u.len() < 2) {
        return Err(ModelError::InsufficientUsers(format!(
            "user #{i} has {} sequence(s)",
            users[i].len()
        )));
    }

    let mut weights = ModelWeights::init(config)?;
    let mut pair_rng = model_rng(config.rng_seed.wrapping_add(1));
    let mut dropout_rng = model_rng(config.rng_seed ^ DROPOUT_STREAM);
    let mut loss_log = Vec::with_capacity(config.epochs * config.batches_per_epoch);
    let momentum = config.bn_momentum;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for batch in 0..config.batches_per_epoch {
            let pairs = sample_batch(users, config.batch_size, &mut pair_rng);
            let mut outcome =
                batch_loss_and_gradients(&weights, &pairs, config.margin, &mut dropout_rng)
                    .map_err(|e| match e {
                        ModelError::NonFiniteActivation | ModelError::NonFiniteGradient => {
                            ModelError::DivergedTraining { epoch, batch }
                        }
                        other => other,
                    })?;
            if !outcome.loss.is_finite() {
                return Err(ModelError::DivergedTraining { epoch, batch });
            }
            let norm = outcome.gradients.l2_norm();
            if norm > config.clip_norm {
                outcome.gradients.scale(config.clip_norm / norm);
            }
            for (param, grad) in weights
                .trainable_mut()
                .into_iter()
                .zip(outcome.gradients.blocks())
            {
                param
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(p, g)| *p -= config.learning_rate * g);
            }
            for (bn, (mean, var)) in weights.norms.iter_mut().zip(&outcome.norm_stats) {
                for j in 0..bn.dim() {
                    bn.running_mean[j] = momentum * bn.running_mean[j] + (1.0 - momentum) * mean[j];
                    bn.running_var[j] = momentum * bn.running_var[j] + (1.0 - momentum) * var[j];
                }
            }
            epoch_loss += outcome.loss;
            loss_log.push(LossRecord {
                epoch,
                batch,
                loss: outcome.loss,
            });
        }
        on_epoch(epoch, epoch_loss / config.batches_per_epoch as f64);
    }
    if !weights.is_finite() {
        return Err(ModelError::DivergedTraining {
            epoch: config.epochs,
            batch: 0,
        });
    }
    Ok(TrainingReport { weights, loss_log })
}
