//! Independent reference implementations shared by the oracle tests and the
//! acceptance target. Nothing here calls the code it checks, except to build
//! inputs and read results.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svsr::kspace::{build_mask, centered_frequency, DegradeConfig};
use svsr::net::layers::*;
use svsr::net::{NetworkConfig, NetworkWeights, Tensor5, UNet};
use svsr::{Roi3D, Volume};

pub fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> Volume {
    Volume::from_fn(dims, spacing, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- k-space -------------------------------------------------------------

type C = (f64, f64);

fn cmul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Direct O(n^2) DFT of one line; `sign` -1 forward, +1 inverse (unscaled).
fn dft(line: &[C], sign: f64) -> Vec<C> {
    let n = line.len();
    (0..n)
        .map(|k| {
            line.iter().enumerate().fold((0.0, 0.0), |acc, (t, &x)| {
                let ang = sign * std::f64::consts::TAU * ((k * t) % n) as f64 / n as f64;
                let w = cmul(x, (ang.cos(), ang.sin()));
                (acc.0 + w.0, acc.1 + w.1)
            })
        })
        .collect()
}

fn dft_axis(data: &mut [C], dims: [usize; 3], axis: usize, sign: f64) {
    let idx = |p: [usize; 3]| p[0] + dims[0] * (p[1] + dims[1] * p[2]);
    let n = dims[axis];
    for a in 0..dims[(axis + 1) % 3] {
        for b in 0..dims[(axis + 2) % 3] {
            let at = |t: usize| {
                let mut p = [0; 3];
                p[axis] = t;
                p[(axis + 1) % 3] = a;
                p[(axis + 2) % 3] = b;
                idx(p)
            };
            let line: Vec<C> = (0..n).map(|t| data[at(t)]).collect();
            for (t, v) in dft(&line, sign).into_iter().enumerate() {
                data[at(t)] = v;
            }
        }
    }
}

/// Magnitude image after masking with the centered keep rule, all by
/// direct DFTs.
pub fn oracle_degrade(v: &Volume, cfg: &DegradeConfig) -> Vec<f64> {
    let dims = v.dims();
    let my = build_mask(dims[1], cfg.frac_y, cfg.pf_y).unwrap();
    let mz = build_mask(dims[2], cfg.frac_z, cfg.pf_z).unwrap();
    let mut data: Vec<C> = v.data().iter().map(|&x| (x, 0.0)).collect();
    for axis in 0..3 {
        dft_axis(&mut data, dims, axis, -1.0);
    }
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            if !(my.keeps(centered_frequency(j, ny)) && mz.keeps(centered_frequency(k, nz))) {
                for i in 0..nx {
                    data[i + nx * (j + ny * k)] = (0.0, 0.0);
                }
            }
        }
    }
    for axis in 0..3 {
        dft_axis(&mut data, dims, axis, 1.0);
    }
    let n = v.len() as f64;
    data.iter().map(|c| (c.0 * c.0 + c.1 * c.1).sqrt() / n).collect()
}

// ---- image metrics -------------------------------------------------------

/// Mean over voxels of SSIM on the clipped cubic window, with two-pass means
/// and (co)variances.
pub fn ssim_oracle(a: &Volume, b: &Volume, window: usize, k1: f64, k2: f64, data_range: f64) -> f64 {
    let d = a.dims();
    let r = (window / 2) as isize;
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let inside = |x: isize, n: usize| x >= 0 && x < n as isize;
    let mut total = 0.0;
    for k in 0..d[2] as isize {
        for j in 0..d[1] as isize {
            for i in 0..d[0] as isize {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dk in -r..=r {
                    for dj in -r..=r {
                        for di in -r..=r {
                            let (x, y, z) = (i + di, j + dj, k + dk);
                            if inside(x, d[0]) && inside(y, d[1]) && inside(z, d[2]) {
                                xs.push(a.get(x as usize, y as usize, z as usize));
                                ys.push(b.get(x as usize, y as usize, z as usize));
                            }
                        }
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
                let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / a.len() as f64
}

pub fn mse_oracle(a: &Volume, b: &Volume) -> f64 {
    let d = a.dims();
    let mut s = 0.0;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                s += (a.get(i, j, k) - b.get(i, j, k)).powi(2);
            }
        }
    }
    s / a.len() as f64
}

/// Trilinear sample with voxel centers at `(i + 0.5) * spacing`, clamped to
/// the outermost centers.
pub fn sample(v: &Volume, p: [f64; 3]) -> f64 {
    let d = v.dims();
    let s = v.spacing();
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let u = (p[a] / s[a] - 0.5).max(0.0).min((d[a] - 1) as f64);
        let i = (u as usize).min(d[a].saturating_sub(2));
        lo[a] = i;
        t[a] = u - i as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            w *= if hi { t[a] } else { 1.0 - t[a] };
            idx[a] = (lo[a] + usize::from(hi)).min(d[a] - 1);
        }
        acc += w * v.get(idx[0], idx[1], idx[2]);
    }
    acc
}

/// Edge sharpness for an axial polygon: stations by cumulative arc length,
/// outward in-plane normals, symmetric profiles, max central difference of
/// the min-max normalized profile, flat profiles skipped.
pub fn edge_oracle(v: &Volume, pts: &[[f64; 3]], rays: usize, half_length_mm: f64, step_fraction: f64) -> f64 {
    let m = pts.len();
    let seg_len: Vec<f64> = (0..m)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % m]);
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
        })
        .collect();
    let mut cum = vec![0.0];
    for l in &seg_len {
        cum.push(cum.last().unwrap() + l);
    }
    let total = cum[m];
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / m as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / m as f64;
    let h = step_fraction * v.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let half = (half_length_mm / h).round() as i64;
    let (mut sum, mut used) = (0.0, 0);
    for r in 0..rays {
        let target = total * r as f64 / rays as f64;
        let seg = (0..m).find(|&s| target <= cum[s + 1]).unwrap_or(m - 1);
        let (a, b) = (pts[seg], pts[(seg + 1) % m]);
        let t = ((target - cum[seg]) / seg_len[seg]).clamp(0.0, 1.0);
        let pos = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2]];
        let (dx, dy) = ((b[0] - a[0]) / seg_len[seg], (b[1] - a[1]) / seg_len[seg]);
        let mut n = [dy, -dx];
        if n[0] * (pos[0] - cx) + n[1] * (pos[1] - cy) < 0.0 {
            n = [-n[0], -n[1]];
        }
        let prof: Vec<f64> = (-half..=half)
            .map(|i| sample(v, [pos[0] + n[0] * i as f64 * h, pos[1] + n[1] * i as f64 * h, pos[2]]))
            .collect();
        let lo = prof.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = prof.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
            continue;
        }
        let g = (1..prof.len() - 1)
            .map(|i| ((prof[i + 1] - prof[i - 1]) / (hi - lo)).abs() / (2.0 * h))
            .fold(0.0, f64::max);
        sum += g;
        used += 1;
    }
    sum / used as f64
}

pub fn roi_mean_oracle(v: &Volume, r: &Roi3D) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for k in r.lo[2]..r.hi[2] {
        for j in r.lo[1]..r.hi[1] {
            for i in r.lo[0]..r.hi[0] {
                s += v.get(i, j, k);
                n += 1.0;
            }
        }
    }
    s / n
}

// ---- statistics ----------------------------------------------------------

/// MSB and MSW from explicit sums of squares over every cell.
pub fn anova(rows: &[Vec<f64>]) -> (f64, f64) {
    let n = rows.len();
    let k = rows[0].len();
    let mut total = 0.0;
    for r in rows {
        for x in r {
            total += x;
        }
    }
    let grand = total / (n * k) as f64;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for r in rows {
        let mut s = 0.0;
        for x in r {
            s += x;
        }
        let m = s / k as f64;
        for x in r {
            ssb += (m - grand) * (m - grand);
            ssw += (x - m) * (x - m);
        }
    }
    (ssb / (n - 1) as f64, ssw / (n * (k - 1)) as f64)
}

/// F(1, 1) CDF by composite Simpson on the density in the substitution
/// x = t^2, which removes the 1/sqrt(x) singularity at the origin.
pub fn f11_cdf_by_integration(x: f64) -> f64 {
    // pdf(x) = 1 / (pi sqrt(x) (1 + x)); with x = t^2, dx = 2t dt the
    // integrand is 2 / (pi (1 + t^2)).
    let b = x.sqrt();
    let n = 20_000;
    let h = b / n as f64;
    let g = |t: f64| 2.0 / (std::f64::consts::PI * (1.0 + t * t));
    let mut s = g(0.0) + g(b);
    for i in 1..n {
        s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

// ---- optimizer -----------------------------------------------------------

/// Scalar ADAM written out step by step from theta = 0.
pub fn adam_oracle(grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        out.push(theta);
    }
    out
}

// ---- finite differences --------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

/// The whole net has thousands of ReLU and max-pool switches; a smaller
/// step keeps central differences from straddling one of them.
pub const NET_FD_STEP: f64 = 1e-7;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, sp: [usize; 3]) -> Tensor5<f64> {
    let n = b * c * sp.iter().product::<usize>();
    Tensor5::from_vec(b, c, sp, random_vec(rng, n)).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// max |analytic - numeric| relative to the larger gradient magnitude.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_grad_step(x, FD_STEP, f)
}

pub fn numeric_grad_step(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x);
            x[i] = orig - step;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

fn random_shape(rng: &mut ChaCha8Rng, even: bool) -> [usize; 3] {
    std::array::from_fn(|_| {
        if even {
            2 * rng.random_range(1..=2)
        } else {
            rng.random_range(1..=4)
        }
    })
}

/// Worst relative error of the conv3d input, weight and bias gradients.
pub fn conv3d_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = if seed % 4 == 3 { 1 } else { 3 };
    let shape = ConvShape::new(rng.random_range(1..=2), rng.random_range(1..=2), kernel);
    let sp = random_shape(&mut rng, false);
    let batch = rng.random_range(1..=2);
    let x = random_tensor(&mut rng, batch, shape.in_ch, sp);
    let w = random_vec(&mut rng, shape.weight_len());
    let b = random_vec(&mut rng, shape.out_ch);
    let r = random_vec(&mut rng, x.batch() * shape.out_ch * x.voxels());
    let up = Tensor5::from_vec(x.batch(), shape.out_ch, sp, r.clone()).unwrap();
    let g = conv3d_backward(&x, shape, &w, &up).unwrap();
    let loss = |x: &Tensor5<f64>, w: &[f64], b: &[f64]| dot(conv3d_forward(x, shape, w, b).unwrap().data(), &r);
    let nx = numeric_grad(x.data(), |d| loss(&Tensor5::from_vec(x.batch(), x.channels(), sp, d.to_vec()).unwrap(), &w, &b));
    let nw = numeric_grad(&w, |d| loss(&x, d, &b));
    let nb = numeric_grad(&b, |d| loss(&x, &w, d));
    rel_err(g.input.data(), &nx).max(rel_err(&g.weight, &nw)).max(rel_err(&g.bias, &nb))
}

pub fn relu_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = random_shape(&mut rng, false);
    let x = random_tensor(&mut rng, 1, 2, sp);
    // Keep away from the kink.
    let kept: Vec<f64> = x.data().iter().map(|v| if v.abs() < 1e-3 { 0.5 } else { *v }).collect();
    let x = Tensor5::from_vec(1, 2, x.spatial(), kept).unwrap();
    let r = random_vec(&mut rng, x.data().len());
    let y = relu_forward(&x);
    let g = relu_backward(&y, &Tensor5::from_vec(1, 2, x.spatial(), r.clone()).unwrap()).unwrap();
    let n = numeric_grad(x.data(), |d| dot(relu_forward(&Tensor5::from_vec(1, 2, x.spatial(), d.to_vec()).unwrap()).data(), &r));
    rel_err(g.data(), &n)
}

pub fn maxpool_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = random_shape(&mut rng, true);
    let x = random_tensor(&mut rng, 2, 2, sp);
    let (y, arg) = maxpool2_forward(&x).unwrap();
    let r = random_vec(&mut rng, y.data().len());
    let g = maxpool2_backward(&Tensor5::from_vec(2, 2, y.spatial(), r.clone()).unwrap(), &arg).unwrap();
    let n = numeric_grad(x.data(), |d| dot(maxpool2_forward(&Tensor5::from_vec(2, 2, sp, d.to_vec()).unwrap()).unwrap().0.data(), &r));
    rel_err(g.data(), &n)
}

pub fn upconv_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = UpConvShape::new(rng.random_range(1..=3), rng.random_range(1..=3));
    let sp = random_shape(&mut rng, false);
    let batch = rng.random_range(1..=2);
    let x = random_tensor(&mut rng, batch, shape.in_ch, sp);
    let w = random_vec(&mut rng, shape.weight_len());
    let b = random_vec(&mut rng, shape.out_ch);
    let r = random_vec(&mut rng, x.batch() * shape.out_ch * 8 * x.voxels());
    let up = Tensor5::from_vec(x.batch(), shape.out_ch, sp.map(|d| 2 * d), r.clone()).unwrap();
    let g = upconv2_backward(&x, shape, &w, &up).unwrap();
    let loss = |x: &Tensor5<f64>, w: &[f64], b: &[f64]| dot(upconv2_forward(x, shape, w, b).unwrap().data(), &r);
    let nx = numeric_grad(x.data(), |d| loss(&Tensor5::from_vec(x.batch(), x.channels(), sp, d.to_vec()).unwrap(), &w, &b));
    let nw = numeric_grad(&w, |d| loss(&x, d, &b));
    let nb = numeric_grad(&b, |d| loss(&x, &w, d));
    rel_err(g.input.data(), &nx).max(rel_err(&g.weight, &nw)).max(rel_err(&g.bias, &nb))
}

pub fn concat_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = random_shape(&mut rng, false);
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let a = random_tensor(&mut rng, 2, ca, sp);
    let b = random_tensor(&mut rng, 2, cb, sp);
    let r = random_vec(&mut rng, 2 * (ca + cb) * a.voxels());
    let (ga, gb) = concat_channels_backward(&Tensor5::from_vec(2, ca + cb, sp, r.clone()).unwrap(), ca).unwrap();
    let na = numeric_grad(a.data(), |d| dot(concat_channels_forward(&Tensor5::from_vec(2, ca, sp, d.to_vec()).unwrap(), &b).unwrap().data(), &r));
    let nb = numeric_grad(b.data(), |d| dot(concat_channels_forward(&a, &Tensor5::from_vec(2, cb, sp, d.to_vec()).unwrap()).unwrap().data(), &r));
    rel_err(ga.data(), &na).max(rel_err(gb.data(), &nb))
}

/// Both losses at a random point, gradient against central differences.
pub fn loss_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..40);
    let pred = random_vec(&mut rng, n);
    let target = random_vec(&mut rng, n);
    let (_, g2) = svsr::train::loss_l2(&pred, &target).unwrap();
    let n2 = numeric_grad(&pred, |p| svsr::train::loss_l2(p, &target).unwrap().0);
    // Random points are almost surely off the l1 kinks.
    let (_, g1) = svsr::train::loss_l1(&pred, &target).unwrap();
    let n1 = numeric_grad(&pred, |p| svsr::train::loss_l1(p, &target).unwrap().0);
    rel_err(&g2, &n2).max(rel_err(&g1, &n1))
}

/// Loss `<r, net(x)>` and its analytic gradients.
pub fn net_loss_and_grads(w: &NetworkWeights<f64>, x: &Tensor5<f64>, r: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut net = UNet::new(w.clone());
    let y = net.forward(x).unwrap();
    let g = net.backward(&Tensor5::from_vec(x.batch(), 1, x.spatial(), r.to_vec()).unwrap()).unwrap();
    (dot(y.data(), r), g.params, g.input.into_data())
}

pub fn net_loss(w: &NetworkWeights<f64>, x: &Tensor5<f64>, r: &[f64]) -> f64 {
    dot(UNet::new(w.clone()).predict(x).unwrap().data(), r)
}

pub fn tiny_input(rng: &mut ChaCha8Rng, batch: usize) -> Tensor5<f64> {
    let n = batch * 512;
    Tensor5::from_vec(batch, 1, [8, 8, 8], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Whole L=2, C=2 net on an 8^3 input: worst relative error over the
/// parameter and input gradients.
pub fn unet_check(seed: u64, residual: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetworkConfig::new(2, 2).with_residual(residual);
    let mut w = NetworkWeights::<f64>::init(cfg, seed).unwrap();
    // Nonzero biases so every layer's bias gradient is exercised.
    let bias_slots: Vec<_> = w.layout().iter().map(|s| s.bias_range()).collect();
    for range in bias_slots {
        for p in &mut w.params_mut()[range] {
            *p = rng.random_range(0.0..0.1);
        }
    }
    let x = tiny_input(&mut rng, 1 + seed as usize % 2);
    let r = random_vec(&mut rng, x.data().len());
    let (_, gp, gx) = net_loss_and_grads(&w, &x, &r);
    let np = numeric_grad_step(w.params(), NET_FD_STEP, |p| net_loss(&NetworkWeights::from_params(cfg, p.to_vec()).unwrap(), &x, &r));
    let nx = numeric_grad_step(x.data(), NET_FD_STEP, |d| net_loss(&w, &Tensor5::from_vec(x.batch(), 1, x.spatial(), d.to_vec()).unwrap(), &r));
    rel_err(&gp, &np).max(rel_err(&gx, &nx))
}
