//! Architecture x loss ablation: {residual, plain} x {l1, l2}.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::trainer::{train, TrainConfig, TrainOutputs, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{mse, ssim, SsimConfig};
use crate::net::{unet_forward, NetworkConfig, NetworkWeights};
use crate::scalar::Real;
use crate::stats::{summarize, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: String,
    pub loss: LossKind,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Exactly four rows: residual/l1, residual/l2, plain/l1, plain/l2.
    pub rows: Vec<AblationRow>,
    /// Low-resolution inputs scored against the truth.
    pub baseline_ssim: Summary,
    pub baseline_mse: Summary,
}

impl AblationReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io_util::write_csv(path.as_ref(), &self.rows)
    }
}

pub fn architecture_name(residual: bool) -> &'static str {
    if residual {
        "residual U-Net"
    } else {
        "U-Net"
    }
}

/// Per-volume SSIM and MSE of the network output against the targets. With
/// `weights = None` the inputs themselves are scored.
pub fn score<T: Real>(
    weights: Option<&NetworkWeights<T>>,
    test: &[TrainingPair<T>],
    ssim_cfg: &SsimConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut s = Vec::with_capacity(test.len());
    let mut m = Vec::with_capacity(test.len());
    for pair in test {
        let out = match weights {
            Some(w) => unet_forward(&pair.input, w)?,
            None => pair.input.clone(),
        };
        s.push(ssim(&out, &pair.target, ssim_cfg)?);
        m.push(mse(&out, &pair.target)?);
    }
    Ok((s, m))
}

/// Builds the report from four already-trained variants.
pub fn ablation_from_weights<T: Real>(
    variants: &[(NetworkWeights<T>, LossKind)],
    test: &[TrainingPair<T>],
    ssim_cfg: &SsimConfig,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(4);
    for residual in [true, false] {
        for kind in [LossKind::L1, LossKind::L2] {
            let matches: Vec<_> = variants
                .iter()
                .filter(|(w, k)| w.config().residual == residual && *k == kind)
                .collect();
            let [(w, _)] = matches.as_slice() else {
                return Err(Error::Config(format!(
                    "ablation needs exactly one {} / {kind} variant, got {}",
                    architecture_name(residual),
                    matches.len()
                )));
            };
            let (s, m) = score(Some(w), test, ssim_cfg)?;
            let (s, m) = (summarize(&s)?, summarize(&m)?);
            rows.push(AblationRow {
                architecture: architecture_name(residual).to_string(),
                loss: kind,
                ssim_mean: s.mean,
                ssim_sd: s.sd,
                mse_mean: m.mean,
                mse_sd: m.sd,
            });
        }
    }
    if variants.len() != 4 {
        return Err(Error::Config(format!("ablation takes 4 variants, got {}", variants.len())));
    }
    let (s, m) = score(None, test, ssim_cfg)?;
    Ok(AblationReport {
        rows,
        baseline_ssim: summarize(&s)?,
        baseline_mse: summarize(&m)?,
    })
}

/// Trains all four variants from the same seed and scores them on `test`.
pub fn ablation<T: Real>(
    corpus: &[TrainingPair<T>],
    test: &[TrainingPair<T>],
    network: &NetworkConfig,
    cfg: &TrainConfig,
    ssim_cfg: &SsimConfig,
) -> Result<AblationReport> {
    let mut variants = Vec::with_capacity(4);
    for residual in [true, false] {
        for kind in [LossKind::L1, LossKind::L2] {
            let net = network.with_residual(residual);
            let init = NetworkWeights::init(net, cfg.seed)?;
            let run = TrainConfig { loss: kind, ..*cfg };
            log::info!("ablation: training {} with {kind}", architecture_name(residual));
            let result = train(corpus, init, &run, &TrainOutputs::default())?;
            variants.push((result.weights, kind));
        }
    }
    ablation_from_weights(&variants, test, ssim_cfg)
}
