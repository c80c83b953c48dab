//! Edge sharpness from intensity profiles across a closed contour.

use crate::error::{Error, Result};
use crate::phantom::{add, cross, dot, norm, scale, sub, unit};
use crate::scalar::Real;
use crate::volume::Volume3D;

/// A closed planar polyline in physical coordinates (mm). The last point
/// connects back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    points: Vec<[f64; 3]>,
    normal: [f64; 3],
}

impl Contour {
    /// `points` must span a plane with normal `normal`; at least 3 points.
    pub fn new(points: Vec<[f64; 3]>, normal: [f64; 3]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Config("a contour needs at least 3 points".into()));
        }
        if !(norm(normal) > 0.0) {
            return Err(Error::Config("contour plane normal must be non-zero".into()));
        }
        let c = Self {
            points,
            normal: unit(normal),
        };
        if !(c.perimeter() > 0.0) {
            return Err(Error::Config("contour has zero length".into()));
        }
        Ok(c)
    }

    /// Regular polygon with `segments` vertices approximating a circle in
    /// the plane perpendicular to `normal`.
    pub fn circle(center: [f64; 3], radius: f64, normal: [f64; 3], segments: usize) -> Result<Self> {
        if !(radius > 0.0) || segments < 3 {
            return Err(Error::Config(format!(
                "circle needs radius > 0 and >= 3 segments, got {radius} and {segments}"
            )));
        }
        let (u, w) = crate::phantom::perpendicular_pair(unit(normal));
        let points = (0..segments)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / segments as f64;
                add(center, add(scale(u, radius * t.cos()), scale(w, radius * t.sin())))
            })
            .collect();
        Self::new(points, normal)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Unit normal of the contour plane.
    pub fn normal(&self) -> [f64; 3] {
        self.normal
    }

    pub fn perimeter(&self) -> f64 {
        (0..self.points.len())
            .map(|i| norm(sub(self.points[(i + 1) % self.points.len()], self.points[i])))
            .sum()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let s = self.points.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        scale(s, 1.0 / self.points.len() as f64)
    }

    /// `n` positions equally spaced by arc length, starting at the first
    /// vertex, each with its unit outward normal.
    pub fn stations(&self, n: usize) -> Vec<([f64; 3], [f64; 3])> {
        let total = self.perimeter();
        let centroid = self.centroid();
        let m = self.points.len();
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        let mut seg_start = 0.0;
        for s in 0..n {
            let target = total * s as f64 / n as f64;
            loop {
                let len = norm(sub(self.points[(seg + 1) % m], self.points[seg]));
                if target <= seg_start + len || seg == m - 1 {
                    break;
                }
                seg_start += len;
                seg += 1;
            }
            let a = self.points[seg];
            let d = sub(self.points[(seg + 1) % m], a);
            let len = norm(d);
            let pos = add(a, scale(d, ((target - seg_start) / len).clamp(0.0, 1.0)));
            let mut nrm = unit(cross(d, self.normal));
            if dot(nrm, sub(pos, centroid)) < 0.0 {
                nrm = scale(nrm, -1.0);
            }
            out.push((pos, nrm));
        }
        out
    }
}

/// Profile geometry for [`edge_sharpness`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EdgeConfig {
    pub rays: usize,
    /// Profile extends this far on each side of the contour, mm.
    pub half_length_mm: f64,
    /// Sample step as a fraction of the smallest voxel spacing.
    pub step_fraction: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            rays: 60,
            half_length_mm: 3.0,
            step_fraction: 0.1,
        }
    }
}

/// Maximum slope of one min-max normalized profile, or `None` if flat.
pub(crate) fn profile_sharpness(profile: &[f64], step: f64) -> Option<f64> {
    let (lo, hi) = profile
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        return None;
    }
    let slope = profile
        .windows(3)
        .map(|w| ((w[2] - w[0]) / range).abs() / (2.0 * step))
        .fold(0.0, f64::max);
    Some(slope)
}

/// Mean over rays of the maximum gradient (mm⁻¹) of the normalized
/// intensity profile along the outward contour normal. Flat profiles are
/// skipped.
pub fn edge_sharpness<T: Real>(v: &Volume3D<T>, contour: &Contour, cfg: &EdgeConfig) -> Result<f64> {
    if cfg.rays == 0 || !(cfg.half_length_mm > 0.0) || !(cfg.step_fraction > 0.0) {
        return Err(Error::Config(format!("invalid edge sharpness settings: {cfg:?}")));
    }
    let step = cfg.step_fraction * v.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let half = (cfg.half_length_mm / step).round() as i64;
    let mut total = 0.0;
    let mut used = 0usize;
    let mut profile = Vec::with_capacity(2 * half as usize + 1);
    for (pos, nrm) in contour.stations(cfg.rays) {
        profile.clear();
        for i in -half..=half {
            let p = add(pos, scale(nrm, i as f64 * step));
            profile.push(v.sample_trilinear(p)?.as_f64());
        }
        if let Some(s) = profile_sharpness(&profile, step) {
            total += s;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::MeasurementFailed(format!(
            "all {} edge profiles are flat",
            cfg.rays
        )));
    }
    Ok(total / used as f64)
}
