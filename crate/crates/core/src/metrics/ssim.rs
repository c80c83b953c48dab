//! Volumetric structural similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume3D;

/// Windowing and stability constants. Near the borders the cubic window is
/// clipped to the volume and the statistics use the voxels that remain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Window edge in voxels (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(Error::Config(format!("SSIM constants must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Sums of `values` over a clipped box of radius `r` around every voxel,
/// computed one axis at a time with running prefix sums.
fn box_sums(values: Vec<f64>, dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = values;
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let mut next = vec![0.0; cur.len()];
        let lines = cur.len() / n;
        for line in 0..lines {
            // `line` enumerates all index combinations of the other two axes.
            let base = if axis == 0 {
                line * n
            } else {
                let inner = line % stride;
                let outer = line / stride;
                outer * stride * n + inner
            };
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for i in 0..n {
                acc += cur[base + i * stride];
                prefix.push(acc);
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                next[base + i * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

/// Mean SSIM over all voxels.
pub fn ssim<T: Real>(a: &Volume3D<T>, b: &Volume3D<T>, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    a.same_dims(b)?;
    let dims = a.dims();
    if dims.iter().any(|&d| d < cfg.window) {
        return Err(Error::Shape(format!(
            "SSIM window {} is larger than volume dims {dims:?}",
            cfg.window
        )));
    }
    let r = cfg.window / 2;
    let av: Vec<f64> = a.data().iter().map(|x| x.as_f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|x| x.as_f64()).collect();
    let sa = box_sums(av.clone(), dims, r);
    let sb = box_sums(bv.clone(), dims, r);
    let saa = box_sums(av.iter().map(|x| x * x).collect(), dims, r);
    let sbb = box_sums(bv.iter().map(|x| x * x).collect(), dims, r);
    let sab = box_sums(av.iter().zip(&bv).map(|(x, y)| x * y).collect(), dims, r);

    let count_1d = |n: usize, i: usize| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64;
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let n = count_1d(dims[0], i) * count_1d(dims[1], j) * count_1d(dims[2], k);
                total += ssim_from_sums(sa[idx], sb[idx], saa[idx], sbb[idx], sab[idx], n, c1, c2);
                idx += 1;
            }
        }
    }
    Ok(total / a.len() as f64)
}

/// SSIM of one window from its raw sums (population statistics).
#[allow(clippy::too_many_arguments)]
pub(crate) fn ssim_from_sums(sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64, n: f64, c1: f64, c2: f64) -> f64 {
    let (ma, mb) = (sa / n, sb / n);
    let va = saa / n - ma * ma;
    let vb = sbb / n - mb * mb;
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}
