//! Deterministic synthetic "cardiac-like" volumes with known geometry.
//!
//! A phantom is a constant background (lung-like signal) with ellipsoidal
//! chambers and capped cylindrical vessels composited on top in declaration
//! order. Boundaries are hard or Gaussian-smoothed, Gaussian noise is added
//! last and the result is clipped to `[0, 1]`. Each phantom comes with its
//! analytic truth: vessel diameters and centerlines plus labeled ROIs for
//! SNR/CNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Contour;
use crate::scalar::Real;
use crate::volume::{Roi3D, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned ellipsoid.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
    /// Capped cylinder; `axis` need not be normalized.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        half_length: f64,
        intensity: f64,
    },
}

impl Primitive {
    pub fn intensity(&self) -> f64 {
        match *self {
            Primitive::Ellipsoid { intensity, .. } | Primitive::Cylinder { intensity, .. } => {
                intensity
            }
        }
    }

    /// Signed distance (mm), negative inside. Exact for cylinders, the usual
    /// first-order approximation for ellipsoids.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Ellipsoid { center, radii, .. } => {
                let d = sub(p, center);
                let q: [f64; 3] = std::array::from_fn(|a| d[a] / radii[a]);
                let q2: [f64; 3] = std::array::from_fn(|a| d[a] / (radii[a] * radii[a]));
                let k0 = norm(q);
                let k1 = norm(q2);
                if k1 == 0.0 {
                    -radii.iter().cloned().fold(f64::INFINITY, f64::min)
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                half_length,
                ..
            } => {
                let a = unit(axis);
                let d = sub(p, center);
                let t = dot(d, a);
                let radial = norm(sub(d, scale(a, t)));
                let dr = radial - radius;
                let dl = t.abs() - half_length;
                dr.max(dl).min(0.0) + (dr.max(0.0).powi(2) + dl.max(0.0).powi(2)).sqrt()
            }
        }
    }

    /// Half-widths of the axis-aligned bounding box around the center.
    fn half_extent(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Primitive::Ellipsoid { center, radii, .. } => (center, radii),
            Primitive::Cylinder {
                center,
                axis,
                radius,
                half_length,
                ..
            } => {
                let a = unit(axis);
                let h = std::array::from_fn(|i| {
                    half_length * a[i].abs() + radius * (1.0 - a[i] * a[i]).max(0.0).sqrt()
                });
                (center, h)
            }
        }
    }

    fn check(&self, extent: [f64; 3]) -> Result<()> {
        let i = self.intensity();
        if !(0.0..=1.0).contains(&i) {
            return Err(Error::Config(format!("primitive intensity {i} outside [0, 1]")));
        }
        match *self {
            Primitive::Ellipsoid { radii, .. } if radii.iter().any(|&r| !(r > 0.0)) => {
                return Err(Error::Config(format!("ellipsoid radii must be positive: {radii:?}")));
            }
            Primitive::Cylinder {
                axis,
                radius,
                half_length,
                ..
            } if !(radius > 0.0 && half_length > 0.0 && norm(axis) > 0.0) => {
                return Err(Error::Config("cylinder needs positive radius, length and axis".into()));
            }
            _ => {}
        }
        let (c, h) = self.half_extent();
        if (0..3).any(|a| c[a] - h[a] < 0.0 || c[a] + h[a] > extent[a]) {
            return Err(Error::Config(format!("primitive {self:?} leaves the grid extent {extent:?}")));
        }
        Ok(())
    }
}

/// Regions used for SNR and CNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Blood,
    Lung,
    Myocardium,
}

impl RoiKind {
    pub fn name(self) -> &'static str {
        match self {
            RoiKind::Blood => "blood",
            RoiKind::Lung => "lung",
            RoiKind::Myocardium => "myocardium",
        }
    }
}

impl std::str::FromStr for RoiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blood" => Ok(RoiKind::Blood),
            "lung" => Ok(RoiKind::Lung),
            "myocardium" => Ok(RoiKind::Myocardium),
            other => Err(Error::Parse(format!("unknown ROI kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Seeds the noise field.
    pub seed: u64,
    pub background: f64,
    pub primitives: Vec<Primitive>,
    /// Gaussian edge softness in mm; 0 renders hard boundaries.
    pub softness: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub rois: Vec<(RoiKind, Roi3D)>,
}

impl PhantomSpec {
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom grid needs positive dims and spacing".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config(format!("background {} outside [0, 1]", self.background)));
        }
        if !(self.noise >= 0.0) || !(self.softness >= 0.0) {
            return Err(Error::Config("noise and softness must be non-negative".into()));
        }
        let extent = self.extent();
        for p in &self.primitives {
            p.check(extent)?;
        }
        for (i, (kind, roi)) in self.rois.iter().enumerate() {
            roi.check_within(self.dims)?;
            for (other_kind, other) in &self.rois[i + 1..] {
                if roi.intersects(other) || kind == other_kind {
                    return Err(Error::Config(format!(
                        "ROI definitions overlap: {} and {}",
                        kind.name(),
                        other_kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselTruth {
    pub id: usize,
    pub diameter_mm: f64,
    pub center: [f64; 3],
    /// Unit centerline direction.
    pub axis: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub vessels: Vec<VesselTruth>,
    pub rois: Vec<(RoiKind, Roi3D)>,
}

impl PhantomTruth {
    pub fn roi(&self, kind: RoiKind) -> Option<Roi3D> {
        self.rois.iter().find(|(k, _)| *k == kind).map(|(_, r)| *r)
    }
}

fn membership(sd: f64, softness: f64) -> f64 {
    if softness == 0.0 {
        if sd <= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        // Gaussian-blurred half-space indicator.
        0.5 * libm::erfc(sd / (softness * std::f64::consts::SQRT_2))
    }
}

/// Renders a phantom. Pure function of the spec, seed included.
pub fn generate<T: Real>(spec: &PhantomSpec) -> Result<(Volume3D<T>, PhantomTruth)> {
    spec.validate()?;
    let s = spec.spacing;
    let mut values = Vec::with_capacity(spec.dims.iter().product());
    for k in 0..spec.dims[2] {
        for j in 0..spec.dims[1] {
            for i in 0..spec.dims[0] {
                let p = [(i as f64 + 0.5) * s[0], (j as f64 + 0.5) * s[1], (k as f64 + 0.5) * s[2]];
                let mut value = spec.background;
                for prim in &spec.primitives {
                    let m = membership(prim.signed_distance(p), spec.softness);
                    if m > 0.0 {
                        value = value * (1.0 - m) + prim.intensity() * m;
                    }
                }
                values.push(value);
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    let data = values.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect();
    let volume = Volume3D::new(spec.dims, spec.spacing, data)?;

    let vessels = spec
        .primitives
        .iter()
        .filter_map(|p| match *p {
            Primitive::Cylinder {
                center,
                axis,
                radius,
                ..
            } => Some((center, unit(axis), radius)),
            _ => None,
        })
        .enumerate()
        .map(|(id, (center, axis, radius))| VesselTruth {
            id,
            diameter_mm: 2.0 * radius,
            center,
            axis,
        })
        .collect();
    Ok((
        volume,
        PhantomTruth {
            vessels,
            rois: spec.rois.clone(),
        },
    ))
}

/// Randomized settings for [`cardiac_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardiacOptions {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise: f64,
    pub softness: f64,
}

impl Default for CardiacOptions {
    /// 64x64x32 grid at 1.6 mm isotropic.
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            spacing: [1.6; 3],
            noise: 0.01,
            softness: 0.4,
        }
    }
}

/// Half-length (mm) of the diameter profiles that fits the
/// [`cardiac_spec`] layout for a given grid.
pub fn cardiac_profile_half_length(opts: &CardiacOptions) -> f64 {
    let e = [
        opts.dims[0] as f64 * opts.spacing[0],
        opts.dims[1] as f64 * opts.spacing[1],
    ];
    0.11 * e[0].min(e[1])
}

/// A seeded cardiac-like layout: a myocardial shell around a blood pool on
/// the left of the field of view, three vessels running along z on the
/// right, and lung-like background elsewhere.
pub fn cardiac_spec(opts: &CardiacOptions, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe_f00d_d00d);
    let e: [f64; 3] = std::array::from_fn(|a| opts.dims[a] as f64 * opts.spacing[a]);
    let plane = e[0].min(e[1]);
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let heart_center = [
        e[0] * (0.38 + jitter(-0.02, 0.02)),
        e[1] * (0.5 + jitter(-0.03, 0.03)),
        e[2] * 0.5,
    ];
    let myo_radii = [
        e[0] * jitter(0.19, 0.22),
        e[1] * jitter(0.22, 0.26),
        e[2] * jitter(0.28, 0.34),
    ];
    let wall = plane * jitter(0.09, 0.11);
    let blood_radii = myo_radii.map(|r| r - wall);
    let myo_intensity = jitter(0.25, 0.35);
    let blood_intensity = jitter(0.85, 0.95);
    let background = jitter(0.04, 0.06);

    let mut primitives = vec![
        Primitive::Ellipsoid {
            center: heart_center,
            radii: myo_radii,
            intensity: myo_intensity,
        },
        Primitive::Ellipsoid {
            center: heart_center,
            radii: blood_radii,
            intensity: blood_intensity,
        },
    ];
    for frac_y in [0.2, 0.5, 0.8] {
        primitives.push(Primitive::Cylinder {
            center: [
                e[0] * (0.8 + jitter(-0.01, 0.01)),
                e[1] * (frac_y + jitter(-0.02, 0.02)),
                e[2] * 0.5,
            ],
            axis: [0.0, 0.0, 1.0],
            // Small vessels, 3-5 mm across on the default grid.
            radius: plane * jitter(0.0146, 0.0245),
            half_length: e[2] * 0.38,
            intensity: jitter(0.8, 0.95),
        });
    }

    let to_roi = |lo_mm: [f64; 3], hi_mm: [f64; 3]| -> Roi3D {
        let lo = std::array::from_fn(|a| ((lo_mm[a] / opts.spacing[a] - 0.5).ceil().max(0.0)) as usize);
        let hi = std::array::from_fn(|a| {
            let h = ((hi_mm[a] / opts.spacing[a] - 0.5).floor() + 1.0).max(0.0) as usize;
            h.clamp(lo[a] + 1, opts.dims[a])
        });
        Roi3D { lo, hi }
    };
    let blood_half = blood_radii.map(|r| 0.3 * r);
    let blood = to_roi(
        std::array::from_fn(|a| heart_center[a] - blood_half[a]),
        std::array::from_fn(|a| heart_center[a] + blood_half[a]),
    );
    let shell_mid = heart_center[0] + blood_radii[0] + wall / 2.0;
    let myo_half = [wall / 4.0, 0.1 * blood_radii[1], 0.2 * blood_radii[2]];
    let myocardium = to_roi(
        [shell_mid - myo_half[0], heart_center[1] - myo_half[1], heart_center[2] - myo_half[2]],
        [shell_mid + myo_half[0], heart_center[1] + myo_half[1], heart_center[2] + myo_half[2]],
    );
    let lung = to_roi(
        [0.03 * e[0], 0.1 * e[1], 0.35 * e[2]],
        [0.12 * e[0], 0.3 * e[1], 0.65 * e[2]],
    );

    PhantomSpec {
        dims: opts.dims,
        spacing: opts.spacing,
        seed,
        background,
        primitives,
        softness: opts.softness,
        noise: opts.noise,
        rois: vec![
            (RoiKind::Blood, blood),
            (RoiKind::Lung, lung),
            (RoiKind::Myocardium, myocardium),
        ],
    }
}

/// Mid-plane equator of the last ellipsoid in `spec` (the blood pool for
/// [`cardiac_spec`]), as a polygon in the axial plane for edge sharpness.
pub fn cardiac_edge_contour(spec: &PhantomSpec, segments: usize) -> Result<Contour> {
    let Some((center, radii)) = spec.primitives.iter().rev().find_map(|p| match *p {
        Primitive::Ellipsoid { center, radii, .. } => Some((center, radii)),
        _ => None,
    }) else {
        return Err(Error::Config("phantom has no ellipsoid to outline".into()));
    };
    if segments < 3 {
        return Err(Error::Config(format!("contour needs >= 3 segments, got {segments}")));
    }
    let points = (0..segments)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / segments as f64;
            [center[0] + radii[0] * t.cos(), center[1] + radii[1] * t.sin(), center[2]]
        })
        .collect();
    Contour::new(points, [0.0, 0.0, 1.0])
}

/// Settings for [`measure_diameter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiameterConfig {
    /// Profile half-length on each side of the centerline, mm.
    pub half_length_mm: f64,
    /// Fraction of each profile end used to estimate the background plateau.
    pub tail_fraction: f64,
}

impl Default for DiameterConfig {
    fn default() -> Self {
        Self {
            half_length_mm: 12.0,
            tail_fraction: 0.1,
        }
    }
}

/// Vessel diameter as the mean of two perpendicular full-width-at-half-
/// maximum measurements through `center`.
///
/// Each profile is sampled trilinearly every `0.1 * min(spacing)` mm. The
/// half-maximum level sits halfway between the centerline value (vessel
/// plateau) and the mean of the profile tails (background plateau).
pub fn measure_diameter<T: Real>(
    v: &Volume3D<T>,
    center: [f64; 3],
    axis: [f64; 3],
    cfg: &DiameterConfig,
) -> Result<f64> {
    v.sample_trilinear(center)?;
    if !(norm(axis) > 0.0) {
        return Err(Error::Config("vessel axis must be non-zero".into()));
    }
    let (u, w) = perpendicular_pair(unit(axis));
    let a = profile_fwhm(v, center, u, cfg)?;
    let b = profile_fwhm(v, center, w, cfg)?;
    Ok(0.5 * (a + b))
}

fn profile_fwhm<T: Real>(
    v: &Volume3D<T>,
    center: [f64; 3],
    dir: [f64; 3],
    cfg: &DiameterConfig,
) -> Result<f64> {
    let step = 0.1 * v.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let n = (cfg.half_length_mm / step).round() as isize;
    // Samples outward from the center on each side; stop at the volume edge.
    let side = |sign: f64| -> Vec<f64> {
        (1..=n)
            .map_while(|i| {
                let p = add(center, scale(dir, sign * i as f64 * step));
                v.sample_trilinear(p).ok().map(|x| x.as_f64())
            })
            .collect()
    };
    let left = side(-1.0);
    let right = side(1.0);
    let peak = v.sample_trilinear(center)?.as_f64();
    let tail = |s: &[f64]| -> Option<f64> {
        let m = ((s.len() as f64 * cfg.tail_fraction).ceil() as usize).max(1);
        (s.len() >= m).then(|| s[s.len() - m..].iter().sum::<f64>() / m as f64)
    };
    let (Some(bl), Some(br)) = (tail(&left), tail(&right)) else {
        return Err(Error::MeasurementFailed("profile leaves the volume immediately".into()));
    };
    let background = 0.5 * (bl + br);
    let contrast = peak - background;
    if contrast.abs() <= 1e-6 {
        return Err(Error::MeasurementFailed(format!(
            "no vessel contrast at centerline ({peak:.4} vs background {background:.4})"
        )));
    }
    let half = background + 0.5 * contrast;
    let crossing = |s: &[f64]| -> Option<f64> {
        let mut prev = peak;
        for (i, &x) in s.iter().enumerate() {
            if (x - half) * contrast.signum() <= 0.0 {
                let t = (prev - half) / (prev - x);
                return Some((i as f64 + t) * step);
            }
            prev = x;
        }
        None
    };
    match (crossing(&left), crossing(&right)) {
        (Some(l), Some(r)) => Ok(l + r),
        _ => Err(Error::MeasurementFailed("profile never crosses half maximum".into())),
    }
}

pub(crate) fn perpendicular_pair(a: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // Pick the coordinate axis least aligned with `a` as a seed.
    let seed = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
        [1.0, 0.0, 0.0]
    } else if a[1].abs() <= a[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let u = unit(sub(seed, scale(a, dot(seed, a))));
    let w = cross(a, u);
    (u, w)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}
