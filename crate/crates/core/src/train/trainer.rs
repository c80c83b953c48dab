//! Mini-batch training with a seeded per-epoch shuffle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::loss::{loss, LossKind};
use crate::error::{Error, Result};
use crate::net::{write_weights, NetworkConfig, NetworkWeights, Tensor5, UNet};
use crate::scalar::Real;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Constant ADAM step size.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds both weight initialization and the shuffle.
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L1,
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 200,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training and network settings as one flat key/value document.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingSetup {
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatSetup {
    loss: Option<LossKind>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    levels: Option<usize>,
    base_channels: Option<usize>,
    convs_per_level: Option<usize>,
    final_kernel: Option<usize>,
    residual: Option<bool>,
}

impl TrainingSetup {
    /// Parses TOML `key = value` lines; missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: FlatSetup = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut s = Self::default();
        let t = &mut s.train;
        let n = &mut s.network;
        t.loss = f.loss.unwrap_or(t.loss);
        t.learning_rate = f.learning_rate.unwrap_or(t.learning_rate);
        t.batch_size = f.batch_size.unwrap_or(t.batch_size);
        t.epochs = f.epochs.unwrap_or(t.epochs);
        t.seed = f.seed.unwrap_or(t.seed);
        t.checkpoint_every = f.checkpoint_every.unwrap_or(t.checkpoint_every);
        n.levels = f.levels.unwrap_or(n.levels);
        n.base_channels = f.base_channels.unwrap_or(n.base_channels);
        n.convs_per_level = f.convs_per_level.unwrap_or(n.convs_per_level);
        n.final_kernel = f.final_kernel.unwrap_or(n.final_kernel);
        n.residual = f.residual.unwrap_or(n.residual);
        s.train.validate()?;
        s.network.validate()?;
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let (t, n) = (self.train, self.network);
        let flat = FlatSetup {
            loss: Some(t.loss),
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size),
            epochs: Some(t.epochs),
            seed: Some(t.seed),
            checkpoint_every: Some(t.checkpoint_every),
            levels: Some(n.levels),
            base_channels: Some(n.base_channels),
            convs_per_level: Some(n.convs_per_level),
            final_kernel: Some(n.final_kernel),
            residual: Some(n.residual),
        };
        toml::to_string(&flat).expect("flat config serializes")
    }
}

/// A degraded input and its ground truth, same dims.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub id: String,
    pub input: Volume3D<T>,
    pub target: Volume3D<T>,
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch_loss: f64,
    /// Running mean of the batch losses seen so far in this epoch.
    pub epoch_mean_loss: f64,
}

/// Where the training loop writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub loss_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub weights: NetworkWeights<T>,
    pub history: Vec<LossRecord>,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn check_corpus<T: Real>(corpus: &[TrainingPair<T>], net: &NetworkConfig) -> Result<()> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Config("training corpus is empty".into()))?;
    for p in corpus {
        first.input.same_dims(&p.input)?;
        p.input.same_dims(&p.target)?;
    }
    net.check_dims(first.input.dims())
}

/// Trains `init` on `corpus`. Identical inputs, config and thread count give
/// bit-identical weights and loss history.
pub fn train<T: Real>(
    corpus: &[TrainingPair<T>],
    init: NetworkWeights<T>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    check_corpus(corpus, init.config())?;
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut log = match &outputs.loss_log {
        Some(path) => Some(csv::Writer::from_path(path)?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = UNet::new(init);
    let mut opt = OptimizerState::new(net.weights().len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let diverged = |reason: String, cps: &[PathBuf]| Error::Diverged {
                step,
                epoch,
                reason,
                last_good: cps.last().cloned(),
            };
            let inputs: Vec<&Volume3D<T>> = batch.iter().map(|&i| &corpus[i].input).collect();
            let targets: Vec<&Volume3D<T>> = batch.iter().map(|&i| &corpus[i].target).collect();
            let x = Tensor5::from_volumes(&inputs)?;
            let y = Tensor5::from_volumes(&targets)?;
            let pred = net.forward(&x)?;
            let (value, grad) = loss(cfg.loss, &pred, &y)?;
            if !value.is_finite() {
                return Err(diverged(format!("batch loss is {value}"), &checkpoints));
            }
            let grads = net.backward(&grad)?;
            match adam_step(net.params_mut(), &grads.params, &mut opt, cfg.learning_rate) {
                Ok(()) => {}
                Err(Error::NonFinite(reason)) => return Err(diverged(reason, &checkpoints)),
                Err(e) => return Err(e),
            }
            if !net.weights().is_finite() {
                return Err(diverged("parameters became non-finite".into(), &checkpoints));
            }
            sum += value;
            batches += 1;
            let rec = LossRecord {
                step,
                epoch,
                batch_loss: value,
                epoch_mean_loss: sum / batches as f64,
            };
            if let Some(w) = &mut log {
                w.serialize(rec)?;
            }
            history.push(rec);
        }
        let mean = sum / batches as f64;
        epoch_losses.push(mean);
        log::info!("epoch {epoch}/{}: mean {} loss {mean:.6}", cfg.epochs, cfg.loss);
        if let Some(w) = &mut log {
            w.flush().map_err(|e| Error::io("flushing loss log", e))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{epoch:04}.srw"));
                write_weights(&path, net.weights())?;
                checkpoints.push(path);
            }
        }
    }

    Ok(TrainResult {
        weights: net.into_weights(),
        history,
        epoch_losses,
        checkpoints,
    })
}
