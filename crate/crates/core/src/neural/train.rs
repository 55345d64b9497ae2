use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_l2_grad, mse_grad, Adam, Network, NetworkConfig, TargetKind};
use crate::error::{Error, Result};

/// Random access to standardized training cases.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(frames, stat)`: `L·C·side·side` cube values and `L·S` statistical
    /// features of case `i`.
    fn input(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>)>;

    fn target(&self, i: usize) -> Vec<f64>;
}

/// In-memory dataset.
#[derive(Clone, Debug, Default)]
pub struct VecDataset {
    pub frames: Vec<Vec<f64>>,
    pub stat: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl VecDataset {
    pub fn push(&mut self, frames: Vec<f64>, stat: Vec<f64>, target: Vec<f64>) {
        self.frames.push(frames);
        self.stat.push(stat);
        self.targets.push(target);
    }
}

impl Dataset for VecDataset {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn input(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.frames[i].clone(), self.stat[i].clone()))
    }

    fn target(&self, i: usize) -> Vec<f64> {
        self.targets[i].clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// L2 coefficient on weights.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl TrainConfig {
    pub fn new(target: TargetKind) -> Self {
        Self {
            lr: target.default_lr(),
            batch_size: 64,
            lambda: 0.01,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda={} must be non-negative", self.lambda)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch MSE on standardized targets.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Frozen network at the best validation epoch.
    pub network: Network,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub diverged: bool,
}

fn gather(ds: &dyn Dataset, idx: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut frames = Vec::new();
    let mut stat = Vec::new();
    for &i in idx {
        let (f, s) = ds.input(i)?;
        frames.extend(f);
        stat.extend(s);
    }
    Ok((frames, stat))
}

fn target_stats(ds: &dyn Dataset, c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = ds.len() as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..ds.len() {
        let t = ds.target(i);
        if t.len() != c {
            return Err(Error::Dimension(format!("case {i} has {} targets, expected {c}", t.len())));
        }
        for k in 0..c {
            mean[k] += t[k];
            sq[k] += t[k] * t[k];
        }
    }
    let mut std = vec![1.0; c];
    for k in 0..c {
        mean[k] /= n;
        let var = (sq[k] / n - mean[k] * mean[k]).max(0.0);
        if var.sqrt() > 1e-12 {
            std[k] = var.sqrt();
        }
    }
    Ok((mean, std))
}

fn standardized(net: &Network, ds: &dyn Dataset, idx: &[usize]) -> Vec<f64> {
    let c = net.target_mean.len();
    idx.iter()
        .flat_map(|&i| ds.target(i))
        .enumerate()
        .map(|(j, v)| (v - net.target_mean[j % c]) / net.target_std[j % c])
        .collect()
}

/// Validation MSE on standardized targets, in inference mode.
fn evaluate(net: &Network, ds: &dyn Dataset, batch: usize) -> Result<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in all.chunks(batch) {
        let (f, s) = gather(ds, idx)?;
        let (pred, _) = net.infer(&f, &s)?;
        let truth = standardized(net, ds, idx);
        sum += pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count as f64)
}

fn snapshot(net: &Network) -> Vec<Vec<f64>> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(net: &mut Network, snap: &[Vec<f64>]) {
    for (p, v) in net.params_mut().into_iter().zip(snap) {
        p.value.clone_from(v);
    }
}

/// Train from scratch with Adam on MSE + L2, early-stopping on validation
/// loss. The returned network holds the best epoch's weights and is frozen.
pub fn train_encoder_decoder(
    config: NetworkConfig,
    train: &dyn Dataset,
    val: &dyn Dataset,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    let mut net = Network::new(config)?;
    let c = net.config.target.outputs();
    let (mean, std) = target_stats(train, c)?;
    net.target_mean = mean;
    net.target_std = std;

    let mut opt = Adam::new(tc.lr);
    opt.beta1 = tc.beta1;
    opt.beta2 = tc.beta2;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut diverged = false;

    'epochs: for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(tc.batch_size) {
            let (f, s) = gather(train, idx)?;
            let truth = standardized(&net, train, idx);
            for p in net.params_mut() {
                p.zero_grad();
            }
            let (pred, _) = net.forward(&f, &s)?;
            let mse = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
            if !mse.is_finite() {
                log::warn!("epoch {epoch}: non-finite batch loss, stopping");
                diverged = true;
                break 'epochs;
            }
            net.backward(&mse_grad(&pred, &truth));
            let mut params = net.params_mut();
            add_l2_grad(&mut params, tc.lambda);
            match opt.step(&mut params) {
                Ok(()) => {}
                Err(Error::Diverged(msg)) => {
                    log::warn!("epoch {epoch}: {msg}");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += mse;
            batches += 1;
        }
        let val_loss = evaluate(&net, val, tc.batch_size)?;
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        let train_loss = loss_sum / batches as f64;
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, snapshot(&net)));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= tc.patience {
            break;
        }
    }

    let Some((_, best_epoch, snap)) = best else {
        return Err(Error::Diverged("no epoch completed with a finite loss".into()));
    };
    restore(&mut net, &snap);
    net.freeze();
    Ok(TrainOutcome {
        network: net,
        curve,
        best_epoch,
        diverged,
    })
}
