//! The 3D volume type and the geometric primitives the pipeline is built on.
//!
//! Voxels are stored x-fastest, then y, then z. The center of voxel `i` along
//! an axis sits at the physical coordinate `(i + 0.5) * spacing`, so a volume
//! spans `[0, n * spacing]` mm on each axis.

mod io;
mod roi;

pub use io::{decode_volume, encode_volume, read_volume, write_volume, SRV1_MAGIC};
pub use roi::Roi3D;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A 3D scalar field with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Real> Volume3D<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape(format!(
                "voxel spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "{}x{}x{} volume needs {n} voxels, got {}",
                dims[0],
                dims[1],
                dims[2],
                data.len()
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::filled(dims, spacing, T::zero())
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// Physical extent `n * spacing` along each axis, in mm.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Physical coordinate of a voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            (i as f64 + 0.5) * self.spacing[0],
            (j as f64 + 0.5) * self.spacing[1],
            (k as f64 + 0.5) * self.spacing[2],
        ]
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts the voxel type, e.g. `f64` volumes into `f32` network input.
    pub fn cast<U: Real>(&self) -> Volume3D<U> {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
    }

    pub fn mean(&self) -> T {
        let sum: f64 = self.data.iter().map(|x| x.as_f64()).sum();
        T::lit(sum / self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Min-max rescale to `[0, 1]`; a constant volume maps to all zeros.
    pub fn normalize(&self) -> Self {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return self.map(|_| T::zero());
        }
        let range = hi - lo;
        let mut out = self.map(|x| (x - lo) / range);
        // (max - min) / range can round below 1; pin the maximum so the
        // operation is idempotent.
        for (o, &x) in out.data.iter_mut().zip(&self.data) {
            if x == hi {
                *o = T::one();
            }
        }
        out
    }

    /// Centers the volume in a `target` grid, zero-padding or cropping each
    /// axis. When the size difference is odd the extra voxel is added or
    /// removed on the high-index side.
    pub fn crop_pad(&self, target: [usize; 3]) -> Result<Self> {
        if target.contains(&0) {
            return Err(Error::Shape(format!("crop/pad target must be positive, got {target:?}")));
        }
        // source index = destination index + shift
        let shift: [isize; 3] = std::array::from_fn(|a| {
            let d = self.dims[a] as isize - target[a] as isize;
            d.signum() * (d.abs() / 2)
        });
        let mut out = Self::zeros(target, self.spacing)?;
        for k in 0..target[2] {
            let sk = k as isize + shift[2];
            if sk < 0 || sk >= self.dims[2] as isize {
                continue;
            }
            for j in 0..target[1] {
                let sj = j as isize + shift[1];
                if sj < 0 || sj >= self.dims[1] as isize {
                    continue;
                }
                for i in 0..target[0] {
                    let si = i as isize + shift[0];
                    if si < 0 || si >= self.dims[0] as isize {
                        continue;
                    }
                    let v = self.get(si as usize, sj as usize, sk as usize);
                    out.set(i, j, k, v);
                }
            }
        }
        Ok(out)
    }

    /// Trilinear interpolation at a physical point (mm).
    ///
    /// Points in the half-voxel rim between the outermost voxel centers and
    /// the volume boundary take the border value along that axis.
    pub fn sample_trilinear(&self, point: [f64; 3]) -> Result<T> {
        let extent = self.extent();
        let inside = (0..3).all(|a| point[a] >= 0.0 && point[a] <= extent[a]);
        if !inside {
            return Err(Error::OutOfBounds {
                x: point[0],
                y: point[1],
                z: point[2],
                ex: extent[0],
                ey: extent[1],
                ez: extent[2],
            });
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                continue;
            }
            let u = (point[a] / self.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let step: [usize; 3] = std::array::from_fn(|a| usize::from(self.dims[a] > 1));
        let mut acc = 0.0f64;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wx * wy * wz;
                    if w == 0.0 {
                        continue;
                    }
                    let v = self.get(
                        base[0] + dx * step[0],
                        base[1] + dy * step[1],
                        base[2] + dz * step[2],
                    );
                    acc += w * v.as_f64();
                }
            }
        }
        Ok(T::lit(acc))
    }

    /// Copies the voxels of `roi` into a flat vector (x-fastest).
    pub fn roi_values(&self, roi: &Roi3D) -> Result<Vec<T>> {
        roi.check_within(self.dims)?;
        let mut out = Vec::with_capacity(roi.len());
        for k in roi.lo[2]..roi.hi[2] {
            for j in roi.lo[1]..roi.hi[1] {
                let row = self.index(roi.lo[0], j, k);
                out.extend_from_slice(&self.data[row..row + roi.hi[0] - roi.lo[0]]);
            }
        }
        Ok(out)
    }
}

/// Min-max normalization to `[0, 1]`; see [`Volume3D::normalize`].
pub fn normalize<T: Real>(v: &Volume3D<T>) -> Volume3D<T> {
    v.normalize()
}

/// Centered crop or zero-pad; see [`Volume3D::crop_pad`].
pub fn crop_pad<T: Real>(v: &Volume3D<T>, target: [usize; 3]) -> Result<Volume3D<T>> {
    v.crop_pad(target)
}

/// Trilinear sample at a physical point; see [`Volume3D::sample_trilinear`].
pub fn sample_trilinear<T: Real>(v: &Volume3D<T>, point: [f64; 3]) -> Result<T> {
    v.sample_trilinear(point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(values: &[f64]) -> Volume3D<f64> {
        Volume3D::new([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
    }

    fn random(dims: [usize; 3], seed: u64) -> Volume3D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, [1.0, 1.5, 2.0], |_, _, _| rng.random_range(-3.0..5.0)).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume3D::<f64>::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume3D::<f64>::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume3D::<f64>::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn normalize_affine() {
        let v = line(&[2.0, 4.0, 6.0]).normalize();
        assert_eq!(v.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = line(&[5.0, 5.0, 5.0]).normalize();
        assert_eq!(v.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_random_spans_unit_interval() {
        let v = random([4, 4, 4], 3).normalize();
        let (lo, hi) = v.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        assert_eq!(v.spacing(), [1.0, 1.5, 2.0]);
    }

    #[test]
    fn crop_ones() {
        let v = Volume3D::<f64>::filled([4, 4, 4], [1.0; 3], 1.0).unwrap();
        let c = v.crop_pad([2, 2, 2]).unwrap();
        assert_eq!(c.dims(), [2, 2, 2]);
        assert!(c.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn pad_ones_centered() {
        let v = Volume3D::<f64>::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let p = v.crop_pad([4, 4, 4]).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let interior = [i, j, k].iter().all(|&x| (1..3).contains(&x));
                    assert_eq!(p.get(i, j, k), if interior { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn odd_crop_split_removes_extra_on_high_side() {
        // Enumerate both conventions for 5 -> 2 and confirm the documented one.
        let v = line(&[10.0, 11.0, 12.0, 13.0, 14.0]);
        let c = v.crop_pad([2, 1, 1]).unwrap();
        let high_side_extra = [11.0, 12.0]; // remove 1 low, 2 high
        let low_side_extra = [12.0, 13.0]; // remove 2 low, 1 high
        assert_eq!(c.data(), &high_side_extra);
        assert_ne!(c.data(), &low_side_extra);

        let p = line(&[1.0, 2.0]).crop_pad([5, 1, 1]).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn trilinear_at_center_and_midpoint() {
        let v = random([3, 4, 5], 9);
        let c = v.voxel_center(1, 2, 3);
        assert_eq!(v.sample_trilinear(c).unwrap(), v.get(1, 2, 3));

        let l = line(&[0.0, 1.0]);
        assert_eq!(l.sample_trilinear([1.0, 0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn trilinear_out_of_bounds() {
        let v = random([3, 3, 3], 1);
        assert!(matches!(
            v.sample_trilinear([-0.01, 1.0, 1.0]),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            v.sample_trilinear([1.0, 1.0, 6.01]),
            Err(Error::OutOfBounds { .. })
        ));
        // boundary itself is inside
        assert!(v.sample_trilinear([3.0, 4.5, 6.0]).is_ok());
    }

    #[test]
    fn roi_values_extracts_box() {
        let v = Volume3D::<f64>::from_fn([4, 4, 4], [1.0; 3], |i, j, k| (i + 10 * j + 100 * k) as f64).unwrap();
        let roi = Roi3D::new([1, 2, 3], [3, 3, 4]).unwrap();
        assert_eq!(v.roi_values(&roi).unwrap(), vec![321.0, 322.0]);
        let outside = Roi3D::new([0, 0, 0], [5, 1, 1]).unwrap();
        assert!(v.roi_values(&outside).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), nx in 1usize..5, ny in 1usize..5, nz in 1usize..5) {
            let once = random([nx, ny, nz], seed).normalize();
            prop_assert_eq!(once.normalize(), once);
        }

        #[test]
        fn pad_then_crop_round_trips(seed in any::<u64>(), dims in prop::array::uniform3(1usize..6), extra in prop::array::uniform3(0usize..5)) {
            let v = random(dims, seed);
            let bigger = [dims[0] + extra[0], dims[1] + extra[1], dims[2] + extra[2]];
            let back = v.crop_pad(bigger).unwrap().crop_pad(dims).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn trilinear_reproduces_affine_fields(
            coef in prop::array::uniform4(-2.0f64..2.0),
            frac in prop::array::uniform3(0.0f64..1.0),
        ) {
            let spacing = [0.7, 1.3, 2.1];
            let dims = [5, 4, 6];
            let f = |p: [f64; 3]| coef[0] + coef[1] * p[0] + coef[2] * p[1] + coef[3] * p[2];
            let v = Volume3D::from_fn(dims, spacing, |i, j, k| {
                f([(i as f64 + 0.5) * spacing[0], (j as f64 + 0.5) * spacing[1], (k as f64 + 0.5) * spacing[2]])
            }).unwrap();
            // interior: between the first and last voxel centers
            let p: [f64; 3] = std::array::from_fn(|a| (0.5 + frac[a] * (dims[a] as f64 - 1.0)) * spacing[a]);
            let got = v.sample_trilinear(p).unwrap();
            prop_assert!((got - f(p)).abs() < 1e-12, "got {} want {}", got, f(p));
        }
    }
}
