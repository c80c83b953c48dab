use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned voxel-index box, inclusive `lo`, exclusive `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi3D {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi3D {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| hi[a] <= lo[a]) {
            return Err(Error::Shape(format!("empty ROI: lo {lo:?}, hi {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_within(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.hi[a] > dims[a] || self.hi[a] <= self.lo[a]) {
            return Err(Error::Shape(format!(
                "ROI {:?}..{:?} does not fit a {dims:?} volume",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn intersects(&self, other: &Roi3D) -> bool {
        (0..3).all(|a| self.lo[a] < other.hi[a] && other.lo[a] < self.hi[a])
    }
}
