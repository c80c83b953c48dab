//! Synthetic low-resolution forward model.
//!
//! A high-resolution magnitude volume is Fourier transformed, the periphery
//! of k-space is zeroed along the phase (y) and slice (z) axes, one further
//! edge of the remaining band is zeroed to mimic partial Fourier sampling,
//! and the magnitude of the inverse transform is returned on the original
//! grid. The readout axis (x) is never degraded.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume3D;

// Guards floor/ceil of products like 0.7 * 20 against representation error.
const ROUNDING_GUARD: f64 = 1e-9;

/// Resolution fraction `f` and partial-Fourier fraction `p` for the phase (y)
/// and slice (z) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub frac_y: f64,
    pub frac_z: f64,
    pub pf_y: f64,
    pub pf_z: f64,
}

impl Default for DegradeConfig {
    /// Half resolution with 6/8 partial Fourier on both axes.
    fn default() -> Self {
        Self::uniform(0.5, 0.75)
    }
}

/// Which of the two degradable axes a [`DegradeConfig`] touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeAxes {
    Y,
    Z,
    YZ,
}

impl std::str::FromStr for DegradeAxes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "y" => Ok(Self::Y),
            "z" => Ok(Self::Z),
            "yz" | "zy" => Ok(Self::YZ),
            other => Err(Error::Config(format!("axes must be one of y, z, yz; got {other:?}"))),
        }
    }
}

impl DegradeConfig {
    pub fn uniform(frac: f64, pf: f64) -> Self {
        Self {
            frac_y: frac,
            frac_z: frac,
            pf_y: pf,
            pf_z: pf,
        }
    }

    /// Full band, full sampling. Exact only on even axes: an odd axis of
    /// length n still loses its +n/2 line, because the band is [-h, h-1].
    pub fn identity() -> Self {
        Self::uniform(1.0, 1.0)
    }

    pub fn with_axes(frac: f64, pf: f64, axes: DegradeAxes) -> Self {
        let mut cfg = Self::uniform(frac, pf);
        if axes == DegradeAxes::Z {
            cfg.frac_y = 1.0;
            cfg.pf_y = 1.0;
        }
        if axes == DegradeAxes::Y {
            cfg.frac_z = 1.0;
            cfg.pf_z = 1.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        check_fractions(self.frac_y, self.pf_y)?;
        check_fractions(self.frac_z, self.pf_z)
    }
}

fn check_fractions(frac: f64, pf: f64) -> Result<()> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("resolution fraction must lie in (0, 1], got {frac}")));
    }
    if !(pf > 0.5 && pf <= 1.0) {
        return Err(Error::Config(format!(
            "partial-Fourier fraction must lie in (0.5, 1], got {pf}"
        )));
    }
    Ok(())
}

/// Kept/zeroed k-space lines along one axis.
///
/// `keep[i]` refers to the centered line index `c = i - n/2` (integer
/// division), so DC sits at position `n/2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    keep: Vec<bool>,
}

impl SamplingMask {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Keep flags in centered order.
    pub fn centered(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Whether the line at centered frequency `c` is kept.
    pub fn keeps(&self, c: isize) -> bool {
        let offset = (self.keep.len() / 2) as isize;
        let i = c + offset;
        i >= 0 && (i as usize) < self.keep.len() && self.keep[i as usize]
    }

    /// Keep flags in unshifted DFT bin order (bin 0 = DC).
    pub fn fft_order(&self) -> Vec<bool> {
        let n = self.keep.len();
        (0..n).map(|k| self.keeps(centered_frequency(k, n))).collect()
    }
}

/// Centered frequency of DFT bin `k` on an `n`-point axis, in
/// `-floor(n/2) ..= ceil(n/2) - 1`.
pub fn centered_frequency(k: usize, n: usize) -> isize {
    if k < n.div_ceil(2) {
        k as isize
    } else {
        k as isize - n as isize
    }
}

/// Builds the truncation + partial-Fourier mask for one axis.
///
/// With half-width `h = floor(f n / 2)` the truncation band is
/// `c in [-h, h - 1]` (`B = 2h` lines). Partial Fourier keeps the
/// `ceil(p B)` highest lines of that band, zeroing the negative edge.
pub fn build_mask(n: usize, frac: f64, pf: f64) -> Result<SamplingMask> {
    if n < 2 {
        return Err(Error::Config(format!("k-space axis needs at least 2 lines, got {n}")));
    }
    check_fractions(frac, pf)?;
    if frac * n as f64 + ROUNDING_GUARD < 2.0 {
        return Err(Error::Config(format!(
            "resolution fraction {frac} keeps fewer than 2 of {n} lines"
        )));
    }
    let h = (frac * n as f64 / 2.0 + ROUNDING_GUARD).floor() as isize;
    let band = 2 * h;
    let kept = (pf * band as f64 - ROUNDING_GUARD).ceil() as isize;
    let lo = h - kept;
    let offset = (n / 2) as isize;
    let keep = (0..n as isize)
        .map(|i| {
            let c = i - offset;
            c >= lo && c < h
        })
        .collect();
    Ok(SamplingMask { keep })
}

struct Plans<T: Real> {
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Plans<T> {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: dims.map(|n| planner.plan_fft_forward(n)),
            inverse: dims.map(|n| planner.plan_fft_inverse(n)),
        }
    }
}

/// In-place unnormalized DFT along one axis of an x-fastest complex volume.
fn fft_axis<T: Real>(data: &mut [Complex<T>], dims: [usize; 3], axis: usize, fft: &dyn Fft<T>) {
    let [nx, ny, nz] = dims;
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    match axis {
        0 => {
            for row in data.chunks_exact_mut(nx) {
                fft.process_with_scratch(row, &mut scratch);
            }
        }
        _ => {
            let (n, stride, outer) = if axis == 1 {
                (ny, nx, nz)
            } else {
                (nz, nx * ny, 1)
            };
            let mut line = vec![Complex::default(); n];
            for o in 0..outer {
                let block = if axis == 1 { o * nx * ny } else { 0 };
                for inner in 0..stride {
                    let base = block + inner;
                    for (t, l) in line.iter_mut().enumerate() {
                        *l = data[base + t * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (t, l) in line.iter().enumerate() {
                        data[base + t * stride] = *l;
                    }
                }
            }
        }
    }
}

/// Forward 3D DFT, mask, inverse 3D DFT; the complex image before the
/// magnitude is taken.
pub fn degrade_complex<T: Real>(v: &Volume3D<T>, cfg: &DegradeConfig) -> Result<Vec<Complex<T>>> {
    cfg.validate()?;
    let dims = v.dims();
    let mask_y = build_mask(dims[1], cfg.frac_y, cfg.pf_y)?.fft_order();
    let mask_z = build_mask(dims[2], cfg.frac_z, cfg.pf_z)?.fft_order();

    let plans = Plans::<T>::new(dims);
    let mut data: Vec<Complex<T>> = v.data().iter().map(|&x| Complex::new(x, T::zero())).collect();
    for axis in 0..3 {
        fft_axis(&mut data, dims, axis, plans.forward[axis].as_ref());
    }
    let [nx, ny, _] = dims;
    for (idx, c) in data.iter_mut().enumerate() {
        let j = (idx / nx) % ny;
        let k = idx / (nx * ny);
        if !(mask_y[j] && mask_z[k]) {
            *c = Complex::default();
        }
    }
    for axis in 0..3 {
        fft_axis(&mut data, dims, axis, plans.inverse[axis].as_ref());
    }
    let scale = T::lit(1.0 / v.len() as f64);
    for c in &mut data {
        *c = *c * scale;
    }
    Ok(data)
}

/// Synthetic low-resolution volume on the same grid as `v`.
pub fn degrade<T: Real>(v: &Volume3D<T>, cfg: &DegradeConfig) -> Result<Volume3D<T>> {
    if !v.is_finite() {
        return Err(Error::Config("cannot degrade a volume with non-finite voxels".into()));
    }
    let data = degrade_complex(v, cfg)?.into_iter().map(|c| c.norm()).collect();
    Volume3D::new(v.dims(), v.spacing(), data)
}

/// Grid and crop settings for synthesizing (low-res, high-res) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub degrade: DegradeConfig,
    /// Canonical grid every volume is cropped or padded to before degradation.
    pub grid: [usize; 3],
    /// In-plane (x, y) training window; all slices are kept.
    pub window: [usize; 2],
}

impl PairConfig {
    /// 256x256x96 acquisition grid cropped to a 192x192 window.
    pub fn clinical() -> Self {
        Self {
            degrade: DegradeConfig::default(),
            grid: [256, 256, 96],
            window: [192, 192],
        }
    }

    /// Desk-scale phantom grid: 64x64x32 cropped to 48x48.
    pub fn phantom() -> Self {
        Self {
            degrade: DegradeConfig::default(),
            grid: [64, 64, 32],
            window: [48, 48],
        }
    }

    pub fn with_degrade(mut self, degrade: DegradeConfig) -> Self {
        self.degrade = degrade;
        self
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.window[0], self.window[1], self.grid[2]]
    }

    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        if self.grid.contains(&0) || self.window.contains(&0) {
            return Err(Error::Config("grid and window sizes must be positive".into()));
        }
        if self.window[0] > self.grid[0] || self.window[1] > self.grid[1] {
            return Err(Error::Config(format!(
                "training window {:?} exceeds canonical grid {:?}",
                self.window, self.grid
            )));
        }
        Ok(())
    }
}

/// Builds one `(low-res input, high-res target)` training pair from a
/// high-resolution volume. Both outputs are normalized to `[0, 1]`
/// independently.
pub fn make_training_pair<T: Real>(
    hr: &Volume3D<T>,
    cfg: &PairConfig,
) -> Result<(Volume3D<T>, Volume3D<T>)> {
    cfg.validate()?;
    let canonical = hr.crop_pad(cfg.grid)?;
    let low = degrade(&canonical, &cfg.degrade)?;
    let out = cfg.output_dims();
    let input = low.crop_pad(out)?.normalize();
    let target = canonical.crop_pad(out)?.normalize();
    Ok((input, target))
}
