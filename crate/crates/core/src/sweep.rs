//! Input-resolution sweep: degrade a held-out corpus at fractions 0.1..=1.0,
//! super-resolve each input with one fixed network and score it against the
//! high-resolution truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{make_training_pair, DegradeConfig, PairConfig};
use crate::metrics::{mse, ssim, SsimConfig};
use crate::net::{unet_forward, NetworkWeights};
use crate::scalar::Real;
use crate::stats::summarize;
use crate::volume::Volume3D;

/// The ten swept fractions, 0.1 to 1.0.
pub fn sweep_fractions() -> [f64; 10] {
    std::array::from_fn(|i| (i + 1) as f64 / 10.0)
}

/// One fraction of the sweep. `ssim_*`/`mse_*` score the network output;
/// `lr_*` score the degraded input itself. The `control_*` columns are only
/// filled on the `fraction = 1` row and repeat the measurement with partial
/// Fourier switched off (full sampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub lr_ssim_mean: f64,
    pub lr_mse_mean: f64,
    pub control_ssim_mean: Option<f64>,
    pub control_mse_mean: Option<f64>,
    pub control_lr_ssim_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != 10 {
            return Err(Error::Shape(format!("sweep report has {} rows, expected 10", self.rows.len())));
        }
        if self.rows.windows(2).any(|w| !(w[0].fraction < w[1].fraction)) {
            return Err(Error::Shape("sweep fractions are not strictly increasing".into()));
        }
        Ok(())
    }

    /// Fraction with the highest mean network-output SSIM.
    pub fn best_fraction(&self) -> Option<f64> {
        self.rows
            .iter()
            .max_by(|a, b| a.ssim_mean.total_cmp(&b.ssim_mean))
            .map(|r| r.fraction)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io_util::write_csv(path.as_ref(), &self.rows)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let report = Self {
            rows: crate::io_util::read_csv(path.as_ref())?,
        };
        report.validate()?;
        Ok(report)
    }
}

struct Scores {
    sr_ssim: Vec<f64>,
    sr_mse: Vec<f64>,
    lr_ssim: Vec<f64>,
    lr_mse: Vec<f64>,
}

fn score_at<T: Real>(
    weights: &NetworkWeights<T>,
    truth: &[Volume3D<T>],
    cfg: &PairConfig,
    ssim_cfg: &SsimConfig,
) -> Result<Scores> {
    let mut s = Scores {
        sr_ssim: Vec::with_capacity(truth.len()),
        sr_mse: Vec::with_capacity(truth.len()),
        lr_ssim: Vec::with_capacity(truth.len()),
        lr_mse: Vec::with_capacity(truth.len()),
    };
    for hr in truth {
        let (input, target) = make_training_pair(hr, cfg)?;
        let out = unet_forward(&input, weights)?;
        s.sr_ssim.push(ssim(&out, &target, ssim_cfg)?);
        s.sr_mse.push(mse(&out, &target)?);
        s.lr_ssim.push(ssim(&input, &target, ssim_cfg)?);
        s.lr_mse.push(mse(&input, &target)?);
    }
    Ok(s)
}

/// Runs the sweep over high-resolution test volumes.
///
/// `base` supplies the grid, window and the partial Fourier factors, which
/// stay fixed; the fraction replaces the base fraction on both phase-encode
/// axes.
pub fn run_sweep<T: Real>(
    weights: &NetworkWeights<T>,
    truth: &[Volume3D<T>],
    base: &PairConfig,
    ssim_cfg: &SsimConfig,
) -> Result<SweepReport> {
    if truth.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let at = |frac: f64, pf_y: f64, pf_z: f64| {
        base.with_degrade(DegradeConfig {
            frac_y: frac,
            frac_z: frac,
            pf_y,
            pf_z,
        })
    };
    let (pf_y, pf_z) = (base.degrade.pf_y, base.degrade.pf_z);
    let mut rows = Vec::with_capacity(10);
    for frac in sweep_fractions() {
        log::info!("sweep: fraction {frac:.1}");
        let s = score_at(weights, truth, &at(frac, pf_y, pf_z), ssim_cfg)?;
        let (ss, sm) = (summarize(&s.sr_ssim)?, summarize(&s.sr_mse)?);
        let mut row = SweepRow {
            fraction: frac,
            ssim_mean: ss.mean,
            ssim_sd: ss.sd,
            mse_mean: sm.mean,
            mse_sd: sm.sd,
            lr_ssim_mean: summarize(&s.lr_ssim)?.mean,
            lr_mse_mean: summarize(&s.lr_mse)?.mean,
            control_ssim_mean: None,
            control_mse_mean: None,
            control_lr_ssim_mean: None,
        };
        if frac == 1.0 {
            let c = score_at(weights, truth, &at(1.0, 1.0, 1.0), ssim_cfg)?;
            row.control_ssim_mean = Some(summarize(&c.sr_ssim)?.mean);
            row.control_mse_mean = Some(summarize(&c.sr_mse)?.mean);
            row.control_lr_ssim_mean = Some(summarize(&c.lr_ssim)?.mean);
        }
        rows.push(row);
    }
    Ok(SweepReport { rows })
}
