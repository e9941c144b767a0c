//! The embedding network: stacked masked LSTM layers with batch
//! normalization and dropout between them, trained on sequence pairs with a
//! contrastive objective.

mod io;
mod loss;
mod lstm;
mod network;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::features::{FeatureSequence, DEFAULT_SEQUENCE_LEN, FEATURE_DIM};

pub use io::{load_weights, load_weights_expecting, read_weights, save_weights, write_weights};
pub use loss::{contrastive_loss, contrastive_loss_grad};
pub use lstm::LstmLayer;
pub use network::{
    backward, batch_loss, batch_loss_and_gradients, embed, embed_all, forward, BatchOutcome,
};
pub use train::{train, train_with_progress, LossRecord, TrainingReport};

/// Random source for dropout masks and pair sampling.
pub type ModelRng = rand_chacha::ChaCha8Rng;

pub fn model_rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation (weights diverged)")]
    NonFiniteActivation,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training needs at least 2 users with at least 2 sequences each: {0}")]
    InsufficientUsers(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    DivergedTraining { epoch: usize, batch: usize },
    #[error("weights file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt weights file: {0}")]
    CorruptFile(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch statistics in batch normalization.
    Train,
    /// Deterministic: no dropout, running statistics.
    Infer,
}

/// How a sequence's last-layer hidden states become its embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Readout {
    /// Hidden state at the last unmasked timestep.
    #[default]
    Last,
    /// Mean of the hidden states over unmasked timesteps.
    Mean,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::Mean => "mean",
        })
    }
}

impl FromStr for Readout {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.trim() {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            other => Err(ModelError::InvalidConfig(format!(
                "readout must be `last` or `mean`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
    pub sequence_len: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub clip_norm: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub readout: Readout,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: FEATURE_DIM,
            hidden_units: 128,
            num_layers: 2,
            dropout_rate: 0.5,
            recurrent_dropout_rate: 0.2,
            sequence_len: DEFAULT_SEQUENCE_LEN,
            margin: 1.5,
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 30,
            batches_per_epoch: 50,
            clip_norm: 5.0,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            readout: Readout::Last,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network used by tests and desk-scale experiments.
    pub fn desk_scale() -> Self {
        Self {
            hidden_units: 32,
            ..Self::default()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.input_dim != FEATURE_DIM {
            return bad("input_dim must be 5");
        }
        if self.hidden_units == 0 || self.num_layers == 0 || self.sequence_len == 0 {
            return bad("hidden_units, num_layers and sequence_len must be >= 1");
        }
        for (name, r) in [
            ("dropout_rate", self.dropout_rate),
            ("recurrent_dropout_rate", self.recurrent_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1)"));
            }
        }
        if !(self.margin > 0.0) {
            return bad("margin must be > 0");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || !(self.bn_epsilon > 0.0) {
            return bad("learning_rate, clip_norm and bn_epsilon must be > 0");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must be in [0, 1]");
        }
        if self.batch_size < 2 || self.batches_per_epoch == 0 {
            return bad("batch_size must be >= 2 and batches_per_epoch >= 1");
        }
        Ok(())
    }

    /// Dimension of the output embedding.
    pub fn embedding_dim(&self) -> usize {
        self.hidden_units
    }

    /// `key=value` pairs, one per field, in a fixed order.
    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("hidden_units", self.hidden_units.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            (
                "recurrent_dropout_rate",
                self.recurrent_dropout_rate.to_string(),
            ),
            ("sequence_len", self.sequence_len.to_string()),
            ("margin", self.margin.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batches_per_epoch", self.batches_per_epoch.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_epsilon", self.bn_epsilon.to_string()),
            ("readout", self.readout.to_string()),
            ("rng_seed", self.rng_seed.to_string()),
        ]
    }

    /// Inverse of [`to_entries`](Self::to_entries). Missing keys keep their
    /// defaults; unknown keys are rejected.
    pub fn from_entries<'a, I>(entries: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.trim()
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("bad value `{v}` for {key}")))
        }
        let mut c = Self::default();
        for (k, v) in entries {
            match k {
                "input_dim" => c.input_dim = parse(k, v)?,
                "hidden_units" => c.hidden_units = parse(k, v)?,
                "num_layers" => c.num_layers = parse(k, v)?,
                "dropout_rate" => c.dropout_rate = parse(k, v)?,
                "recurrent_dropout_rate" => c.recurrent_dropout_rate = parse(k, v)?,
                "sequence_len" => c.sequence_len = parse(k, v)?,
                "margin" => c.margin = parse(k, v)?,
                "learning_rate" => c.learning_rate = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "epochs" => c.epochs = parse(k, v)?,
                "batches_per_epoch" => c.batches_per_epoch = parse(k, v)?,
                "clip_norm" => c.clip_norm = parse(k, v)?,
                "bn_momentum" => c.bn_momentum = parse(k, v)?,
                "bn_epsilon" => c.bn_epsilon = parse(k, v)?,
                "readout" => c.readout = v.parse()?,
                "rng_seed" => c.rng_seed = parse(k, v)?,
                other => return Err(ModelError::InvalidConfig(format!("unknown key `{other}`"))),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Batch normalization over hidden features: learned scale and shift plus
/// running statistics used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LstmLayer>,
    /// One per gap between consecutive layers.
    pub norms: Vec<BatchNorm>,
}

impl ModelWeights {
    /// Fresh weights: uniform in `±1/sqrt(hidden)`, forget-gate bias 1,
    /// other biases 0, batch norm at identity.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = model_rng(config.rng_seed);
        Ok(Self::init_with(config, &mut rng))
    }

    pub fn init_with<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden_units;
        let layers = (0..config.num_layers)
            .map(|l| LstmLayer::init(if l == 0 { config.input_dim } else { h }, h, rng))
            .collect();
        let norms = (1..config.num_layers).map(|_| BatchNorm::new(h)).collect();
        Self {
            config: config.clone(),
            layers,
            norms,
        }
    }

    /// Checks tensor shapes against the stored config.
    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        if self.layers.len() != c.num_layers || self.norms.len() + 1 != c.num_layers {
            return Err(ModelError::ShapeMismatch(format!(
                "{} layers / {} norms for num_layers={}",
                self.layers.len(),
                self.norms.len(),
                c.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let din = if l == 0 { c.input_dim } else { c.hidden_units };
            let h = c.hidden_units;
            if layer.input_dim != din
                || layer.hidden != h
                || layer.w_input.len() != 4 * h * din
                || layer.w_recurrent.len() != 4 * h * h
                || layer.bias.len() != 4 * h
            {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {l} does not match hidden_units={h}"
                )));
            }
        }
        for (l, n) in self.norms.iter().enumerate() {
            let h = c.hidden_units;
            if [
                n.gamma.len(),
                n.beta.len(),
                n.running_mean.len(),
                n.running_var.len(),
            ]
            .iter()
            .any(|&d| d != h)
            {
                return Err(ModelError::ShapeMismatch(format!(
                    "norm {l} does not match hidden_units={h}"
                )));
            }
        }
        Ok(())
    }

    /// Trainable parameter blocks in a fixed order.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([
                l.w_input.as_slice(),
                l.w_recurrent.as_slice(),
                l.bias.as_slice(),
            ]);
        }
        for n in &self.norms {
            out.extend([n.gamma.as_slice(), n.beta.as_slice()]);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_input.as_mut_slice());
            out.push(l.w_recurrent.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_mut_slice());
            out.push(n.beta.as_mut_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
            && self.norms.iter().all(|n| {
                n.running_mean
                    .iter()
                    .chain(&n.running_var)
                    .all(|v| v.is_finite())
            })
    }

    /// Named tensors for serialization.
    pub(crate) fn tensors(&self) -> BTreeMap<String, (Vec<usize>, &[f64])> {
        let mut out = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(
                format!("lstm{i}.w_input"),
                (vec![4 * l.hidden, l.input_dim], l.w_input.as_slice()),
            );
            out.insert(
                format!("lstm{i}.w_recurrent"),
                (vec![4 * l.hidden, l.hidden], l.w_recurrent.as_slice()),
            );
            out.insert(
                format!("lstm{i}.bias"),
                (vec![4 * l.hidden], l.bias.as_slice()),
            );
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.insert(format!("bn{i}.gamma"), (vec![n.dim()], n.gamma.as_slice()));
            out.insert(format!("bn{i}.beta"), (vec![n.dim()], n.beta.as_slice()));
            out.insert(
                format!("bn{i}.running_mean"),
                (vec![n.dim()], n.running_mean.as_slice()),
            );
            out.insert(
                format!("bn{i}.running_var"),
                (vec![n.dim()], n.running_var.as_slice()),
            );
        }
        out
    }
}

/// Gradient of the loss with respect to every trainable parameter, laid out
/// like [`ModelWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LstmLayer>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(weights: &ModelWeights) -> Self {
        Self {
            layers: weights.layers.iter().map(LstmLayer::zeros_like).collect(),
            gamma: weights.norms.iter().map(|n| vec![0.0; n.dim()]).collect(),
            beta: weights.norms.iter().map(|n| vec![0.0; n.dim()]).collect(),
        }
    }

    /// Blocks in the same order as [`ModelWeights::trainable`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([
                l.w_input.as_slice(),
                l.w_recurrent.as_slice(),
                l.bias.as_slice(),
            ]);
        }
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.extend([g.as_slice(), b.as_slice()]);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_input.as_mut_slice());
            out.push(l.w_recurrent.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for (g, b) in self.gamma.iter_mut().zip(self.beta.iter_mut()) {
            out.push(g.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Two sequences and whether they come from the same user.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub a: FeatureSequence,
    pub b: FeatureSequence,
    pub same_user: bool,
}

impl TrainingPair {
    pub fn label(&self) -> f64 {
        if self.same_user {
            1.0
        } else {
            0.0
        }
    }
}
