use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume3D;

/// Batch x channel x (x, y, z) activations. Within a channel voxels are
/// x-fastest, matching [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    batch: usize,
    channels: usize,
    spatial: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(batch: usize, channels: usize, spatial: [usize; 3]) -> Result<Self> {
        let n = batch * channels * spatial.iter().product::<usize>();
        Self::from_vec(batch, channels, spatial, vec![T::zero(); n])
    }

    pub fn from_vec(batch: usize, channels: usize, spatial: [usize; 3], data: Vec<T>) -> Result<Self> {
        if batch == 0 || channels == 0 || spatial.contains(&0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive: {batch}x{channels}x{spatial:?}"
            )));
        }
        let n = batch * channels * spatial.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!("tensor needs {n} elements, got {}", data.len())));
        }
        Ok(Self {
            batch,
            channels,
            spatial,
            data,
        })
    }

    /// Stacks single-channel volumes into one batch.
    pub fn from_volumes(volumes: &[&Volume3D<T>]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::Shape("cannot build a tensor from zero volumes".into()))?;
        let mut data = Vec::with_capacity(volumes.len() * first.len());
        for v in volumes {
            first.same_dims(v)?;
            data.extend_from_slice(v.data());
        }
        Self::from_vec(volumes.len(), 1, first.dims(), data)
    }

    pub fn from_volume(v: &Volume3D<T>) -> Self {
        Self {
            batch: 1,
            channels: 1,
            spatial: v.dims(),
            data: v.data().to_vec(),
        }
    }

    /// Extracts channel `c` of batch item `b` as a volume.
    pub fn to_volume(&self, b: usize, c: usize, spacing: [f64; 3]) -> Result<Volume3D<T>> {
        Volume3D::new(self.spatial, spacing, self.channel(b, c).to_vec())
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    #[inline]
    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.spatial[0], self.spatial[1], self.spatial[2]]
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

    /// All channels of batch item `b`.
    #[inline]
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.channels * self.voxels();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.voxels();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (b * self.channels + c) * v;
        &self.data[start..start + v]
    }

    #[inline]
    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (b * self.channels + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
