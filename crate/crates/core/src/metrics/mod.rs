//! Image-quality measurements: MSE, SSIM, edge sharpness, SNR and CNR.

mod edge;
mod ssim;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use edge::{edge_sharpness, Contour, EdgeConfig};
pub use ssim::{ssim, SsimConfig};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Roi3D, Volume3D};

/// Mean squared voxel difference.
pub fn mse<T: Real>(a: &Volume3D<T>, b: &Volume3D<T>) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn roi_mean<T: Real>(v: &Volume3D<T>, roi: &Roi3D) -> Result<f64> {
    let values = v.roi_values(roi)?;
    Ok(values.iter().map(|x| x.as_f64()).sum::<f64>() / values.len() as f64)
}

fn ratio(num: f64, den: f64, den_name: &'static str) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::UndefinedRatio(den_name));
    }
    Ok(num / den)
}

/// Mean blood signal over mean lung signal.
pub fn snr<T: Real>(v: &Volume3D<T>, blood: &Roi3D, lung: &Roi3D) -> Result<f64> {
    ratio(roi_mean(v, blood)?, roi_mean(v, lung)?, "lung")
}

/// Mean blood signal over mean myocardial signal.
pub fn cnr<T: Real>(v: &Volume3D<T>, blood: &Roi3D, myocardium: &Roi3D) -> Result<f64> {
    ratio(roi_mean(v, blood)?, roi_mean(v, myocardium)?, "myocardium")
}

/// One row of an evaluation report; absent measurements stay empty in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub edge_sharpness_mm_inv: Option<f64>,
    pub snr: Option<f64>,
    pub cnr: Option<f64>,
}

impl MetricReport {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ssim: None,
            mse: None,
            edge_sharpness_mm_inv: None,
            snr: None,
            cnr: None,
        }
    }
}

pub fn write_metric_reports(path: impl AsRef<Path>, rows: &[MetricReport]) -> Result<()> {
    crate::io_util::write_csv(path.as_ref(), rows)
}

pub fn read_metric_reports(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    crate::io_util::read_csv(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_values() {
        let a = Volume3D::from_fn([4, 3, 2], [1.0; 3], |x, y, z| (x + y + z) as f64 / 10.0).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ratios() {
        let mut v = Volume3D::filled([4, 1, 1], [1.0; 3], 5.0f64).unwrap();
        v.set(0, 0, 0, 100.0);
        let blood = Roi3D::new([0, 0, 0], [1, 1, 1]).unwrap();
        let lung = Roi3D::new([1, 0, 0], [3, 1, 1]).unwrap();
        assert_eq!(snr(&v, &blood, &lung).unwrap(), 20.0);
        assert_eq!(cnr(&v, &blood, &blood).unwrap(), 1.0);
        v.set(3, 0, 0, 0.0);
        let empty = Roi3D::new([3, 0, 0], [4, 1, 1]).unwrap();
        assert!(matches!(snr(&v, &blood, &empty), Err(Error::UndefinedRatio("lung"))));
    }

    #[test]
    fn report_csv_has_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut r = MetricReport::new("a");
        r.ssim = Some(0.5);
        write_metric_reports(&path, &[r.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,ssim,mse,edge_sharpness_mm_inv,snr,cnr\na,0.5,,,,\n");
        assert_eq!(read_metric_reports(&path).unwrap(), vec![r]);
    }
}
