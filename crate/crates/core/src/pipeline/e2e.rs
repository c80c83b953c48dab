//! The seven-stage desk run: phantom, degrade, train, infer, eval, sweep,
//! stats.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, StageRecord};
use super::{
    create_dir, infer, phantom_corpus, volume_path, write_phantom_corpus, write_rows, EvalAnnotations,
    PhantomEntry,
};
use crate::error::{Error, Result};
use crate::kspace::{make_training_pair, DegradeConfig, PairConfig};
use crate::metrics::{EdgeConfig, MetricReport, SsimConfig};
use crate::net::{write_weights, NetworkConfig, NetworkWeights};
use crate::phantom::{cardiac_profile_half_length, measure_diameter, CardiacOptions, DiameterConfig};
use crate::stats::{summarize, AgreementReport, PairRecord, PairedMeasurements};
use crate::sweep::run_sweep;
use crate::train::{train, LossKind, TrainConfig, TrainOutputs, TrainingPair};
use crate::volume::{write_volume, Volume3D};

/// Stage names in execution order.
pub const STAGES: [&str; 7] = ["phantom", "degrade", "train", "infer", "eval", "sweep", "stats"];

/// Everything the desk run needs besides the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub phantom: CardiacOptions,
    /// Training pairs use this window; test pairs keep the full grid.
    pub pair: PairConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ssim: SsimConfig,
    pub edge: EdgeConfig,
}

impl E2eConfig {
    /// 40 training and 8 test noiseless phantoms at 64x64x32, f = 0.5,
    /// p = 0.75, a three-level residual U-Net with 8 base channels, l1 loss
    /// and 20 epochs.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            train_count: 40,
            test_count: 8,
            phantom: CardiacOptions { noise: 0.0, ..CardiacOptions::default() },
            pair: PairConfig::phantom().with_degrade(DegradeConfig::uniform(0.5, 0.75)),
            network: NetworkConfig::new(3, 8),
            train: TrainConfig {
                loss: LossKind::L1,
                learning_rate: 1e-3,
                batch_size: 2,
                epochs: 20,
                seed,
                checkpoint_every: 0,
            },
            ssim: SsimConfig::default(),
            edge: EdgeConfig::default(),
        }
    }

    /// Parses a TOML document with the same nested layout as this struct.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Test pairs: the training setup without the in-plane crop.
    pub fn test_pair(&self) -> PairConfig {
        PairConfig {
            window: [self.pair.grid[0], self.pair.grid[1]],
            ..self.pair
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("e2e needs at least one training and one test phantom".into()));
        }
        if self.phantom.dims != self.pair.grid {
            return Err(Error::Config(format!(
                "phantom grid {:?} differs from the pair grid {:?}",
                self.phantom.dims, self.pair.grid
            )));
        }
        self.pair.validate()?;
        self.network.validate()?;
        self.network.check_dims(self.pair.output_dims())?;
        self.network.check_dims(self.test_pair().output_dims())?;
        self.train.validate()
    }
}

/// One vessel measured on the clean, degraded and super-resolved test
/// volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterRow {
    pub phantom_id: String,
    pub vessel_id: usize,
    pub true_mm: f64,
    pub clean_mm: f64,
    pub lr_mm: f64,
    pub sr_mm: f64,
}

/// Headline numbers of a desk run, also written to `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eSummary {
    pub lr_ssim_mean: f64,
    pub sr_ssim_mean: f64,
    pub lr_mse_mean: f64,
    pub sr_mse_mean: f64,
    pub clean_diameter_mean: f64,
    pub lr_diameter_mean: f64,
    pub sr_diameter_mean: f64,
    pub best_sweep_fraction: f64,
    pub final_epoch_loss: f64,
}

/// An [`AgreementReport`] labeled with what was compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub comparison: String,
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub icc: f64,
    pub icc_ci_low: f64,
    pub icc_ci_high: f64,
    pub n: usize,
}

impl AgreementRow {
    fn new(comparison: &str, r: AgreementReport) -> Self {
        Self {
            comparison: comparison.to_string(),
            bias: r.bias,
            loa_low: r.loa_low,
            loa_high: r.loa_high,
            icc: r.icc,
            icc_ci_low: r.icc_ci_low,
            icc_ci_high: r.icc_ci_high,
            n: r.n,
        }
    }
}

struct Stages<'a> {
    root: &'a Path,
    manifest: RunManifest,
}

impl Stages<'_> {
    /// Runs one stage, naming it in any error and recording its outputs.
    fn run<R>(&mut self, name: &str, f: impl FnOnce(&mut Vec<PathBuf>, &mut RunManifest) -> Result<R>) -> Result<R> {
        log::info!("e2e: stage {name}");
        let start = Instant::now();
        let mut written = Vec::new();
        let out = f(&mut written, &mut self.manifest)
            .map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e) })?;
        let mut labels = Vec::with_capacity(written.len());
        for p in &written {
            let label = p
                .strip_prefix(self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            self.manifest.add_output(p, label.clone())?;
            labels.push(label);
        }
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs: labels,
        });
        Ok(out)
    }
}

fn write_pairs(dir: &Path, pairs: &[TrainingPair<f32>], written: &mut Vec<PathBuf>) -> Result<()> {
    for sub in ["input", "target"] {
        create_dir(&dir.join(sub))?;
    }
    for p in pairs {
        for (sub, v) in [("input", &p.input), ("target", &p.target)] {
            let path = volume_path(&dir.join(sub), &p.id);
            write_volume(v, &path)?;
            written.push(path);
        }
    }
    Ok(())
}

fn make_pairs(entries: &[PhantomEntry<f64>], cfg: &PairConfig) -> Result<Vec<TrainingPair<f32>>> {
    entries
        .par_iter()
        .map(|e| {
            let (x, y) = make_training_pair(&e.volume, cfg)?;
            Ok(TrainingPair {
                id: e.id.clone(),
                input: x.cast(),
                target: y.cast(),
            })
        })
        .collect()
}

fn mean_of(rows: &[MetricReport], f: impl Fn(&MetricReport) -> Option<f64>) -> Result<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    Ok(summarize(&v)?.mean)
}

/// Runs all seven stages into `out_dir` and writes `manifest.json` there.
/// Every artifact except the manifest's timing fields is a pure function
/// of `cfg` and the thread count.
pub fn end_to_end(cfg: &E2eConfig, out_dir: &Path) -> Result<(RunManifest, E2eSummary)> {
    cfg.validate()?;
    let start = Instant::now();
    create_dir(out_dir)?;
    let config = serde_json::to_value(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    let mut st = Stages {
        root: out_dir,
        manifest: RunManifest::new("e2e", cfg.seed, config),
    };

    // Training phantoms come first in the seed sequence, then the test set.
    let (train_set, test_set) = st.run("phantom", |w, _| {
        let mut all = phantom_corpus::<f64>(&cfg.phantom, cfg.train_count + cfg.test_count, cfg.seed)?;
        let test_set = all.split_off(cfg.train_count);
        w.extend(write_phantom_corpus(&out_dir.join("phantoms/train"), &all)?);
        w.extend(write_phantom_corpus(&out_dir.join("phantoms/test"), &test_set)?);
        Ok((all, test_set))
    })?;

    let (train_pairs, test_pairs) = st.run("degrade", |w, _| {
        let train_pairs = make_pairs(&train_set, &cfg.pair)?;
        let test_pairs = make_pairs(&test_set, &cfg.test_pair())?;
        write_pairs(&out_dir.join("pairs/train"), &train_pairs, w)?;
        write_pairs(&out_dir.join("pairs/test"), &test_pairs, w)?;
        Ok((train_pairs, test_pairs))
    })?;
    drop(train_set);

    let (weights, final_epoch_loss) = st.run("train", |w, _| {
        let init = NetworkWeights::init(cfg.network, cfg.seed)?;
        let log = out_dir.join("loss.csv");
        let res = train(
            &train_pairs,
            init,
            &cfg.train,
            &TrainOutputs {
                loss_log: Some(log.clone()),
                checkpoint_dir: None,
            },
        )?;
        let path = out_dir.join("weights.srw");
        write_weights(&path, &res.weights)?;
        w.push(log);
        w.push(path);
        Ok((res.weights, res.epoch_losses.last().copied().unwrap_or(f64::NAN)))
    })?;
    drop(train_pairs);

    let sr: Vec<Volume3D<f32>> = st.run("infer", |w, m| {
        let dir = out_dir.join("sr");
        create_dir(&dir)?;
        let mut out = Vec::with_capacity(test_pairs.len());
        for p in &test_pairs {
            let inf = infer(&weights, &p.input)?;
            m.timings.insert(format!("infer/{}", p.id), inf.seconds);
            let path = volume_path(&dir, &p.id);
            write_volume(&inf.output, &path)?;
            w.push(path);
            out.push(inf.output);
        }
        Ok(out)
    })?;

    let (lr_rows, sr_rows, diameters) = st.run("eval", |w, _| {
        let ann = EvalAnnotations {
            contours: test_set.iter().map(|e| (e.id.clone(), e.contour.clone())).collect(),
            rois: test_set.iter().map(|e| (e.id.clone(), e.truth.rois.clone())).collect(),
        };
        let truth: Vec<(String, Volume3D<f32>)> =
            test_pairs.iter().map(|p| (p.id.clone(), p.target.clone())).collect();
        let lr: Vec<(String, Volume3D<f32>)> = test_pairs.iter().map(|p| (p.id.clone(), p.input.clone())).collect();
        let srv: Vec<(String, Volume3D<f32>)> =
            test_pairs.iter().zip(&sr).map(|(p, v)| (p.id.clone(), v.clone())).collect();
        let lr_rows = super::evaluate(&truth, &lr, &ann, &cfg.ssim, &cfg.edge)?;
        let sr_rows = super::evaluate(&truth, &srv, &ann, &cfg.ssim, &cfg.edge)?;

        let dc = DiameterConfig {
            half_length_mm: cardiac_profile_half_length(&cfg.phantom),
            ..DiameterConfig::default()
        };
        let mut diameters = Vec::new();
        for ((p, e), s) in test_pairs.iter().zip(&test_set).zip(&sr) {
            for v in &e.truth.vessels {
                let m = |vol: &Volume3D<f32>| measure_diameter(vol, v.center, v.axis, &dc);
                diameters.push(DiameterRow {
                    phantom_id: e.id.clone(),
                    vessel_id: v.id,
                    true_mm: v.diameter_mm,
                    clean_mm: m(&p.target)?,
                    lr_mm: m(&p.input)?,
                    sr_mm: m(s)?,
                });
            }
        }
        for (name, res) in [
            ("eval_lr.csv", write_rows(out_dir.join("eval_lr.csv"), &lr_rows)),
            ("eval_sr.csv", write_rows(out_dir.join("eval_sr.csv"), &sr_rows)),
            ("diameters.csv", write_rows(out_dir.join("diameters.csv"), &diameters)),
        ] {
            res?;
            w.push(out_dir.join(name));
        }
        Ok((lr_rows, sr_rows, diameters))
    })?;

    let sweep = st.run("sweep", |w, _| {
        let hr: Vec<Volume3D<f32>> = test_set.iter().map(|e| e.volume.cast()).collect();
        let report = run_sweep(&weights, &hr, &cfg.test_pair(), &cfg.ssim)?;
        let path = out_dir.join("sweep.csv");
        report.write_csv(&path)?;
        w.push(path);
        Ok(report)
    })?;

    let summary = st.run("stats", |w, _| {
        let pairs = |f: fn(&DiameterRow) -> f64| PairedMeasurements {
            pairs: diameters
                .iter()
                .map(|d| PairRecord {
                    id: format!("{}/{}", d.phantom_id, d.vessel_id),
                    reference: d.clean_mm,
                    test: f(d),
                })
                .collect(),
        };
        let rows = vec![
            AgreementRow::new("lr_vs_clean", AgreementReport::compute(&pairs(|d| d.lr_mm), None)?),
            AgreementRow::new("sr_vs_clean", AgreementReport::compute(&pairs(|d| d.sr_mm), None)?),
        ];
        let path = out_dir.join("agreement.csv");
        write_rows(&path, &rows)?;
        w.push(path);

        let mean = |f: fn(&DiameterRow) -> f64| diameters.iter().map(f).sum::<f64>() / diameters.len() as f64;
        let summary = E2eSummary {
            lr_ssim_mean: mean_of(&lr_rows, |r| r.ssim)?,
            sr_ssim_mean: mean_of(&sr_rows, |r| r.ssim)?,
            lr_mse_mean: mean_of(&lr_rows, |r| r.mse)?,
            sr_mse_mean: mean_of(&sr_rows, |r| r.mse)?,
            clean_diameter_mean: mean(|d| d.clean_mm),
            lr_diameter_mean: mean(|d| d.lr_mm),
            sr_diameter_mean: mean(|d| d.sr_mm),
            best_sweep_fraction: sweep.best_fraction().unwrap_or(f64::NAN),
            final_epoch_loss,
        };
        let path = out_dir.join("summary.csv");
        write_rows(&path, std::slice::from_ref(&summary))?;
        w.push(path);
        Ok(summary)
    })?;

    let mut manifest = st.manifest;
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok((manifest, summary))
}
