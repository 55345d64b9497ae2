//! CNN encoder with GRU or Transformer decoder, trained from scratch and
//! frozen to serve as a reanalysis-cube feature extractor.

mod checkpoint;
pub mod layers;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::positional_encoding;
pub use model::{CnnEncoder, Decoder, GruDecoder, Network, TransformerDecoder, TransformerLayer};
pub use train::{
    train_encoder_decoder, Dataset, EpochStats, TrainConfig, TrainOutcome, VecDataset,
};

/// A named parameter block with its gradient and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Included in the L2 penalty (weights, not biases or norm parameters).
    pub penalized: bool,
    /// Updated by the optimizer; running statistics are not.
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(name: String, value: Vec<f64>, penalized: bool) -> Self {
        let n = value.len();
        Self {
            name,
            value,
            grad: vec![0.0; n],
            penalized,
            trainable: true,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Non-trainable state saved with the model.
    pub fn buffer(name: String, value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value, false)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    Gru,
    Transformer,
}

impl DecoderKind {
    pub fn label(self) -> &'static str {
        match self {
            DecoderKind::Gru => "gru",
            DecoderKind::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Intensity,
    Track,
}

impl TargetKind {
    pub fn outputs(self) -> usize {
        match self {
            TargetKind::Intensity => 1,
            TargetKind::Track => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TargetKind::Intensity => "intensity",
            TargetKind::Track => "track",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            TargetKind::Intensity => 1e-3,
            TargetKind::Track => 4e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub decoder: DecoderKind,
    pub target: TargetKind,
    /// Statistical features per step.
    pub stat_dim: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub side: usize,
    /// Convolution output channels.
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub head_dims: [usize; 2],
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub tf_layers: usize,
    pub positional_encoding: bool,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(decoder: DecoderKind, target: TargetKind, stat_dim: usize) -> Self {
        Self {
            decoder,
            target,
            stat_dim,
            seq_len: 8,
            channels: 9,
            side: 25,
            widths: [32, 64, 128],
            embed_dim: 128,
            gru_hidden: 128,
            gru_layers: 2,
            head_dims: [512, 128],
            d_model: 142,
            heads: 2,
            ff_dim: 128,
            tf_layers: 2,
            positional_encoding: true,
            seed: 0,
        }
    }

    /// Length of the extracted embedding.
    pub fn embedding_dim(&self) -> usize {
        match self.decoder {
            DecoderKind::Gru => self.head_dims[1],
            DecoderKind::Transformer => self.d_model,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stat_dim,
            self.seq_len,
            self.channels,
            self.embed_dim,
            self.gru_hidden,
            self.gru_layers,
            self.d_model,
            self.heads,
            self.ff_dim,
            self.tf_layers,
        ];
        if positive.contains(&0) || self.widths.contains(&0) || self.head_dims.contains(&0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Mean squared error over all elements plus `λ Σ W²` over penalized blocks.
pub fn loss(pred: &[f64], truth: &[f64], params: &[&Param], lambda: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss of an empty batch".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda={lambda} must be non-negative")));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse + lambda * l2_penalty(params))
}

pub fn l2_penalty(params: &[&Param]) -> f64 {
    params
        .iter()
        .filter(|p| p.penalized)
        .map(|p| p.value.iter().map(|w| w * w).sum::<f64>())
        .sum()
}

/// Gradient of the MSE term with respect to the predictions.
pub fn mse_grad(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter().zip(truth).map(|(p, t)| 2.0 * (p - t) / n).collect()
}

pub fn add_l2_grad(params: &mut [&mut Param], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for p in params.iter_mut().filter(|p| p.penalized) {
        for (g, w) in p.grad.iter_mut().zip(&p.value) {
            *g += 2.0 * lambda * w;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// One bias-corrected update of every trainable block. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in {}[{i}] at step {}",
                    p.name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut().filter(|p| p.trainable) {
            if p.m.len() != p.value.len() {
                p.m = vec![0.0; p.value.len()];
                p.v = vec![0.0; p.value.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
