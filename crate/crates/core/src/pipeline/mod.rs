//! Corpus files, sidecar tables, inference and evaluation glue shared by the
//! command line and the end-to-end run.
//!
//! A corpus is a directory of `<id>.srv` volumes. Phantom corpora carry three
//! sidecars: `truth.csv` (vessel diameters and centerlines), `rois.csv`
//! (SNR/CNR boxes) and `contours.csv` (the edge-sharpness outline).

mod e2e;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cnr, edge_sharpness, mse, snr, ssim, Contour, EdgeConfig, MetricReport, SsimConfig};
use crate::net::{unet_forward, NetworkWeights};
use crate::phantom::{
    cardiac_edge_contour, cardiac_spec, generate, CardiacOptions, PhantomTruth, RoiKind,
};
use crate::scalar::Real;
use crate::volume::{read_volume, write_volume, Roi3D, Volume3D};

pub use e2e::{end_to_end, AgreementRow, DiameterRow, E2eConfig, E2eSummary, STAGES};
pub use manifest::{sha256_file, Artifact, RunManifest, StageRecord};

/// File extension of corpus volumes.
pub const VOLUME_EXT: &str = "srv";

/// Seed of the `index`-th phantom of a corpus generated from `seed`.
pub fn corpus_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

/// One generated phantom with everything needed to score it.
#[derive(Debug, Clone)]
pub struct PhantomEntry<T> {
    pub id: String,
    pub volume: Volume3D<T>,
    pub truth: PhantomTruth,
    pub contour: Contour,
}

/// `count` cardiac phantoms named `phantom_000`, `phantom_001`, ...
pub fn phantom_corpus<T: Real>(
    opts: &CardiacOptions,
    count: usize,
    seed: u64,
) -> Result<Vec<PhantomEntry<T>>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = cardiac_spec(opts, corpus_seed(seed, i));
            let (volume, truth) = generate(&spec)?;
            Ok(PhantomEntry {
                id: format!("phantom_{i:03}"),
                volume,
                truth,
                contour: cardiac_edge_contour(&spec, 64)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub phantom_id: String,
    pub vessel_id: usize,
    pub diameter_mm: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub center_z: f64,
    pub axis_x: f64,
    pub axis_y: f64,
    pub axis_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub id: String,
    pub roi: RoiKind,
    pub lo_x: usize,
    pub lo_y: usize,
    pub lo_z: usize,
    pub hi_x: usize,
    pub hi_y: usize,
    pub hi_z: usize,
}

/// One vertex of a closed contour; rows of one `id` are in polygon order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourRow {
    pub id: String,
    pub point: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub normal_x: f64,
    pub normal_y: f64,
    pub normal_z: f64,
}

pub fn truth_rows<T>(entries: &[PhantomEntry<T>]) -> Vec<TruthRow> {
    entries
        .iter()
        .flat_map(|e| {
            e.truth.vessels.iter().map(|v| TruthRow {
                phantom_id: e.id.clone(),
                vessel_id: v.id,
                diameter_mm: v.diameter_mm,
                center_x: v.center[0],
                center_y: v.center[1],
                center_z: v.center[2],
                axis_x: v.axis[0],
                axis_y: v.axis[1],
                axis_z: v.axis[2],
            })
        })
        .collect()
}

pub fn roi_rows<T>(entries: &[PhantomEntry<T>]) -> Vec<RoiRow> {
    entries
        .iter()
        .flat_map(|e| {
            e.truth.rois.iter().map(|(kind, r)| RoiRow {
                id: e.id.clone(),
                roi: *kind,
                lo_x: r.lo[0],
                lo_y: r.lo[1],
                lo_z: r.lo[2],
                hi_x: r.hi[0],
                hi_y: r.hi[1],
                hi_z: r.hi[2],
            })
        })
        .collect()
}

pub fn contour_rows<T>(entries: &[PhantomEntry<T>]) -> Vec<ContourRow> {
    let mut rows = Vec::new();
    for e in entries {
        let n = e.contour.normal();
        for (point, p) in e.contour.points().iter().enumerate() {
            rows.push(ContourRow {
                id: e.id.clone(),
                point,
                x: p[0],
                y: p[1],
                z: p[2],
                normal_x: n[0],
                normal_y: n[1],
                normal_z: n[2],
            });
        }
    }
    rows
}

/// ROI boxes grouped by volume id.
pub fn rois_by_id(rows: &[RoiRow]) -> Result<BTreeMap<String, Vec<(RoiKind, Roi3D)>>> {
    let mut out: BTreeMap<String, Vec<(RoiKind, Roi3D)>> = BTreeMap::new();
    for r in rows {
        let roi = Roi3D::new([r.lo_x, r.lo_y, r.lo_z], [r.hi_x, r.hi_y, r.hi_z])?;
        out.entry(r.id.clone()).or_default().push((r.roi, roi));
    }
    Ok(out)
}

/// Contours grouped by volume id, vertices ordered by `point`.
pub fn contours_by_id(rows: &[ContourRow]) -> Result<BTreeMap<String, Contour>> {
    let mut grouped: BTreeMap<String, Vec<&ContourRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.id.clone()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_by_key(|r| r.point);
            let normal = [rs[0].normal_x, rs[0].normal_y, rs[0].normal_z];
            let contour = Contour::new(rs.iter().map(|r| [r.x, r.y, r.z]).collect(), normal)?;
            Ok((id, contour))
        })
        .collect()
}

pub fn write_rows<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    crate::io_util::write_csv(path.as_ref(), rows)
}

pub fn read_rows<R: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    crate::io_util::read_csv(path.as_ref())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Writes the volumes and the three sidecars; returns every written path.
pub fn write_phantom_corpus<T: Real>(dir: &Path, entries: &[PhantomEntry<T>]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::with_capacity(entries.len() + 3);
    for e in entries {
        let path = volume_path(dir, &e.id);
        write_volume(&e.volume, &path)?;
        written.push(path);
    }
    for (name, res) in [
        ("truth.csv", write_rows(dir.join("truth.csv"), &truth_rows(entries))),
        ("rois.csv", write_rows(dir.join("rois.csv"), &roi_rows(entries))),
        ("contours.csv", write_rows(dir.join("contours.csv"), &contour_rows(entries))),
    ] {
        res?;
        written.push(dir.join(name));
    }
    Ok(written)
}

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{VOLUME_EXT}"))
}

/// Volume files of a corpus directory, sorted by id.
pub fn list_corpus(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(VOLUME_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_corpus<T: Real>(dir: &Path) -> Result<Vec<(String, Volume3D<T>)>> {
    let files = list_corpus(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .{VOLUME_EXT} volumes in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|(id, p)| Ok((id, read_volume(&p)?)))
        .collect()
}

/// True when the intensities already span `[0, 1]` (to 1e-6).
pub fn is_normalized<T: Real>(v: &Volume3D<T>) -> bool {
    let (lo, hi) = v.min_max();
    lo.as_f64().abs() <= 1e-6 && (hi.as_f64() - 1.0).abs() <= 1e-6
}

/// Result of [`infer`].
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub output: Volume3D<T>,
    /// The input was rescaled to `[0, 1]` before the forward pass.
    pub normalized_input: bool,
    pub seconds: f64,
}

/// Super-resolves one volume. Inputs that are not already normalized are
/// rescaled to `[0, 1]` first, with a warning.
pub fn infer<T: Real>(weights: &NetworkWeights<T>, input: &Volume3D<T>) -> Result<Inference<T>> {
    weights.config().check_dims(input.dims())?;
    let start = Instant::now();
    let normalized_input = !is_normalized(input);
    let output = if normalized_input {
        log::warn!("input intensities are not in [0, 1]; normalizing before inference");
        unet_forward(&input.normalize(), weights)?
    } else {
        unet_forward(input, weights)?
    };
    Ok(Inference {
        output,
        normalized_input,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Optional per-volume annotations for [`evaluate`].
#[derive(Debug, Clone, Default)]
pub struct EvalAnnotations {
    pub contours: BTreeMap<String, Contour>,
    pub rois: BTreeMap<String, Vec<(RoiKind, Roi3D)>>,
}

/// Scores one test volume against its truth. Edge sharpness, SNR and CNR
/// are measured on `test` and left empty when the annotation is missing or
/// the ratio is undefined.
pub fn evaluate_volume<T: Real>(
    id: &str,
    truth: &Volume3D<T>,
    test: &Volume3D<T>,
    ann: &EvalAnnotations,
    ssim_cfg: &SsimConfig,
    edge_cfg: &EdgeConfig,
) -> Result<MetricReport> {
    let mut r = MetricReport::new(id);
    r.ssim = Some(ssim(test, truth, ssim_cfg)?);
    r.mse = Some(mse(test, truth)?);
    if let Some(c) = ann.contours.get(id) {
        r.edge_sharpness_mm_inv = Some(edge_sharpness(test, c, edge_cfg)?);
    }
    if let Some(rois) = ann.rois.get(id) {
        let find = |k: RoiKind| rois.iter().find(|(kind, _)| *kind == k).map(|(_, r)| r);
        if let Some(blood) = find(RoiKind::Blood) {
            if let Some(lung) = find(RoiKind::Lung) {
                r.snr = defined(id, snr(test, blood, lung))?;
            }
            if let Some(myo) = find(RoiKind::Myocardium) {
                r.cnr = defined(id, cnr(test, blood, myo))?;
            }
        }
    }
    Ok(r)
}

/// A ratio over a region that is exactly zero (the lung of a normalized
/// noiseless volume) is left empty instead of failing the whole report.
fn defined(id: &str, r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(e @ Error::UndefinedRatio(_)) => {
            log::warn!("{id}: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Pairs `truth` and `test` volumes by id and scores each pair.
pub fn evaluate<T: Real>(
    truth: &[(String, Volume3D<T>)],
    test: &[(String, Volume3D<T>)],
    ann: &EvalAnnotations,
    ssim_cfg: &SsimConfig,
    edge_cfg: &EdgeConfig,
) -> Result<Vec<MetricReport>> {
    let by_id: BTreeMap<&str, &Volume3D<T>> = truth.iter().map(|(id, v)| (id.as_str(), v)).collect();
    test.par_iter()
        .map(|(id, v)| {
            let t = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Config(format!("no truth volume for {id:?}")))?;
            evaluate_volume(id, t, v, ann, ssim_cfg, edge_cfg)
        })
        .collect()
}
