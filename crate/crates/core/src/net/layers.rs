//! Layer kernels with hand-written reverse-mode gradients.
//!
//! Convolutions lower to GEMM: a block of z-planes is unfolded into a
//! `(in_ch * k^3) x positions` column matrix, multiplied by the
//! `out_ch x (in_ch * k^3)` kernel matrix, and folded back for the input
//! gradient. All loops run in a fixed order, so results are bitwise
//! reproducible.

use super::tensor::Tensor5;
use crate::error::{Error, Result};
use crate::scalar::Real;

// Positions unfolded per GEMM call (rounded to whole z-planes).
const CHUNK_POSITIONS: usize = 2048;

/// Shape of a 3D convolution: `kernel` is the (odd) edge length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Kernel layout: `[out_ch][in_ch][kz][ky][kx]`.
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.taps()
    }

    fn check(&self, input: &Tensor5<impl Real>, weight_len: usize, bias_len: usize) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Shape(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if input.channels() != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        if weight_len != self.weight_len() || bias_len != self.out_ch {
            return Err(Error::Shape(format!(
                "conv {self:?} needs {} weights and {} biases, got {weight_len} and {bias_len}",
                self.weight_len(),
                self.out_ch
            )));
        }
        Ok(())
    }
}

/// Gradients of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Tensor5<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn planes_per_chunk(spatial: [usize; 3]) -> usize {
    (CHUNK_POSITIONS / (spatial[0] * spatial[1])).clamp(1, spatial[2])
}

/// Unfolds planes `z0..z1` of every channel of `src` into `cols`.
fn im2col<T: Real>(src: &[T], shape: ConvShape, spatial: [usize; 3], z0: usize, z1: usize, cols: &mut [T]) {
    let [nx, ny, nz] = spatial;
    let k = shape.kernel;
    let r = (k / 2) as isize;
    let voxels = nx * ny * nz;
    let len = nx * ny * (z1 - z0);
    for ci in 0..shape.in_ch {
        let chan = &src[ci * voxels..(ci + 1) * voxels];
        for tap in 0..shape.taps() {
            let ox = (tap % k) as isize - r;
            let oy = ((tap / k) % k) as isize - r;
            let oz = (tap / (k * k)) as isize - r;
            let row_idx = ci * shape.taps() + tap;
            let row = &mut cols[row_idx * len..(row_idx + 1) * len];
            let x_lo = (-ox).clamp(0, nx as isize) as usize;
            let x_hi = (nx as isize - ox).clamp(x_lo as isize, nx as isize) as usize;
            for z in z0..z1 {
                let sz = z as isize + oz;
                for y in 0..ny {
                    let sy = y as isize + oy;
                    let dst = &mut row[((z - z0) * ny + y) * nx..][..nx];
                    if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[(sz as usize * ny + sy as usize) * nx..][..nx];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + ox) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dst`.
fn col2im<T: Real>(cols: &[T], shape: ConvShape, spatial: [usize; 3], z0: usize, z1: usize, dst: &mut [T]) {
    let [nx, ny, nz] = spatial;
    let k = shape.kernel;
    let r = (k / 2) as isize;
    let voxels = nx * ny * nz;
    let len = nx * ny * (z1 - z0);
    for ci in 0..shape.in_ch {
        let chan = &mut dst[ci * voxels..(ci + 1) * voxels];
        for tap in 0..shape.taps() {
            let ox = (tap % k) as isize - r;
            let oy = ((tap / k) % k) as isize - r;
            let oz = (tap / (k * k)) as isize - r;
            let row_idx = ci * shape.taps() + tap;
            let row = &cols[row_idx * len..(row_idx + 1) * len];
            let x_lo = (-ox).clamp(0, nx as isize) as usize;
            let x_hi = (nx as isize - ox).clamp(x_lo as isize, nx as isize) as usize;
            for z in z0..z1 {
                let sz = z as isize + oz;
                if sz < 0 || sz >= nz as isize {
                    continue;
                }
                for y in 0..ny {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let src = &row[((z - z0) * ny + y) * nx..][..nx];
                    let s0 = (x_lo as isize + ox) as usize;
                    let out_row = &mut chan[(sz as usize * ny + sy as usize) * nx..][..nx];
                    for (o, &g) in out_row[s0..s0 + (x_hi - x_lo)].iter_mut().zip(&src[x_lo..x_hi]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

/// `dst` (cols x rows) = transpose of `src` (rows x cols), cache-blocked.
fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        let r1 = (r0 + B).min(rows);
        for c0 in (0..cols).step_by(B) {
            let c1 = (c0 + B).min(cols);
            for r in r0..r1 {
                let row = &src[r * cols..];
                for c in c0..c1 {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

/// Same-padded (zero) 3D cross-correlation with bias.
pub fn conv3d_forward<T: Real>(
    input: &Tensor5<T>,
    shape: ConvShape,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor5<T>> {
    shape.check(input, weight.len(), bias.len())?;
    let spatial = input.spatial();
    let voxels = input.voxels();
    let plane = spatial[0] * spatial[1];
    let mut out = Tensor5::zeros(input.batch(), shape.out_ch, spatial)?;
    let step = planes_per_chunk(spatial);
    let rows = shape.in_ch * shape.taps();
    let mut cols = vec![T::zero(); rows * plane * step];
    let mut tmp = vec![T::zero(); shape.out_ch * plane * step];
    for b in 0..input.batch() {
        let src = input.item(b);
        let dst = out.item_mut(b);
        for z0 in (0..spatial[2]).step_by(step) {
            let z1 = (z0 + step).min(spatial[2]);
            let len = plane * (z1 - z0);
            let cols = &mut cols[..rows * len];
            let tmp = &mut tmp[..shape.out_ch * len];
            im2col(src, shape, spatial, z0, z1, cols);
            T::gemm(shape.out_ch, rows, len, T::one(), weight, false, cols, false, T::zero(), tmp);
            for co in 0..shape.out_ch {
                let o = &mut dst[co * voxels + z0 * plane..][..len];
                for (o, &t) in o.iter_mut().zip(&tmp[co * len..(co + 1) * len]) {
                    *o = t + bias[co];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] given the upstream gradient. Parameter
/// gradients are accumulated into `grad_weight` / `grad_bias`; the input
/// gradient is returned.
pub fn conv3d_backward_into<T: Real>(
    input: &Tensor5<T>,
    shape: ConvShape,
    weight: &[T],
    grad_out: &Tensor5<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Result<Tensor5<T>> {
    shape.check(input, weight.len(), grad_bias.len())?;
    if grad_weight.len() != weight.len() {
        return Err(Error::Shape("weight gradient buffer has the wrong length".into()));
    }
    if grad_out.dims() != [input.batch(), shape.out_ch, input.spatial()[0], input.spatial()[1], input.spatial()[2]] {
        return Err(Error::Shape(format!(
            "conv output gradient has shape {:?}, expected {} channels over {:?}",
            grad_out.dims(),
            shape.out_ch,
            input.spatial()
        )));
    }
    let spatial = input.spatial();
    let voxels = input.voxels();
    let plane = spatial[0] * spatial[1];
    let mut grad_in = Tensor5::zeros(input.batch(), shape.in_ch, spatial)?;
    let step = planes_per_chunk(spatial);
    let rows = shape.in_ch * shape.taps();
    let mut cols = vec![T::zero(); rows * plane * step];
    let mut gcols = vec![T::zero(); rows * plane * step];
    let mut cols_t = vec![T::zero(); rows * plane * step];
    let mut g = vec![T::zero(); shape.out_ch * plane * step];
    for b in 0..input.batch() {
        let src = input.item(b);
        let gsrc = grad_out.item(b);
        for z0 in (0..spatial[2]).step_by(step) {
            let z1 = (z0 + step).min(spatial[2]);
            let len = plane * (z1 - z0);
            let cols = &mut cols[..rows * len];
            let gcols = &mut gcols[..rows * len];
            let cols_t = &mut cols_t[..rows * len];
            let g = &mut g[..shape.out_ch * len];
            im2col(src, shape, spatial, z0, z1, cols);
            for co in 0..shape.out_ch {
                let gc = &gsrc[co * voxels + z0 * plane..][..len];
                g[co * len..(co + 1) * len].copy_from_slice(gc);
                grad_bias[co] += gc.iter().copied().sum::<T>();
            }
            // The GEMM backend is much faster with a contiguous right operand
            // than with a transposed one, so transpose explicitly.
            transpose(cols, rows, len, cols_t);
            T::gemm(shape.out_ch, len, rows, T::one(), g, false, cols_t, false, T::one(), grad_weight);
            T::gemm(rows, shape.out_ch, len, T::one(), weight, true, g, false, T::zero(), gcols);
            col2im(gcols, shape, spatial, z0, z1, grad_in.item_mut(b));
        }
    }
    Ok(grad_in)
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor5<T>,
    shape: ConvShape,
    weight: &[T],
    grad_out: &Tensor5<T>,
) -> Result<LayerGrads<T>> {
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); shape.out_ch];
    let gi = conv3d_backward_into(input, shape, weight, grad_out, &mut gw, &mut gb)?;
    Ok(LayerGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

pub fn relu_forward<T: Real>(input: &Tensor5<T>) -> Tensor5<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place<T: Real>(t: &mut Tensor5<T>) {
    for x in t.data_mut() {
        *x = x.max(T::zero());
    }
}

/// ReLU gradient; `output` is the forward result. The derivative at 0 is 0.
pub fn relu_backward<T: Real>(output: &Tensor5<T>, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
    output.same_shape(grad_out)?;
    let mut g = grad_out.clone();
    relu_mask_in_place(output, &mut g);
    Ok(g)
}

pub(crate) fn relu_mask_in_place<T: Real>(output: &Tensor5<T>, grad: &mut Tensor5<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Flat in-channel index of the maximum of every pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolArgmax {
    input_spatial: [usize; 3],
    index: Vec<u32>,
}

/// 2x2x2 max pooling with stride 2. Ties go to the first element in
/// x-fastest order.
pub fn maxpool2_forward<T: Real>(input: &Tensor5<T>) -> Result<(Tensor5<T>, PoolArgmax)> {
    let [nx, ny, nz] = input.spatial();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even dims, got {:?}",
            input.spatial()
        )));
    }
    let out_sp = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor5::zeros(input.batch(), input.channels(), out_sp)?;
    let mut index = Vec::with_capacity(out.data().len());
    for b in 0..input.batch() {
        for c in 0..input.channels() {
            let src = input.channel(b, c);
            let dst = out.channel_mut(b, c);
            let mut o = 0;
            for z in 0..out_sp[2] {
                for y in 0..out_sp[1] {
                    for x in 0..out_sp[0] {
                        let mut best = usize::MAX;
                        let mut best_val = T::neg_infinity();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = (2 * x + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                    if best == usize::MAX || src[i] > best_val {
                                        best = i;
                                        best_val = src[i];
                                    }
                                }
                            }
                        }
                        dst[o] = best_val;
                        index.push(best as u32);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolArgmax {
            input_spatial: input.spatial(),
            index,
        },
    ))
}

/// Routes each output gradient to the position of its window maximum.
pub fn maxpool2_backward<T: Real>(grad_out: &Tensor5<T>, argmax: &PoolArgmax) -> Result<Tensor5<T>> {
    if argmax.index.len() != grad_out.data().len() {
        return Err(Error::Shape("pooling gradient does not match the cached argmax".into()));
    }
    let mut g = Tensor5::zeros(grad_out.batch(), grad_out.channels(), argmax.input_spatial)?;
    let per_channel = grad_out.voxels();
    for b in 0..grad_out.batch() {
        for c in 0..grad_out.channels() {
            let src = grad_out.channel(b, c);
            let base = (b * grad_out.channels() + c) * per_channel;
            let dst = g.channel_mut(b, c);
            for (o, &go) in src.iter().enumerate() {
                dst[argmax.index[base + o] as usize] += go;
            }
        }
    }
    Ok(g)
}

/// Shape of a 2x2x2, stride-2 transposed convolution.
/// Kernel layout: `[in_ch][out_ch][az][ay][ax]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
}

impl UpConvShape {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        Self { in_ch, out_ch }
    }

    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * 8
    }

    fn check(&self, input: &Tensor5<impl Real>, weight_len: usize, bias_len: usize) -> Result<()> {
        if input.channels() != self.in_ch {
            return Err(Error::Shape(format!(
                "up-convolution expects {} input channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        if weight_len != self.weight_len() || bias_len != self.out_ch {
            return Err(Error::Shape(format!(
                "up-convolution {self:?} needs {} weights and {} biases",
                self.weight_len(),
                self.out_ch
            )));
        }
        Ok(())
    }
}

#[inline]
fn upsampled_index(x: usize, y: usize, z: usize, tap: usize, out_sp: [usize; 3]) -> usize {
    let (ax, ay, az) = (tap & 1, (tap >> 1) & 1, tap >> 2);
    (2 * x + ax) + out_sp[0] * ((2 * y + ay) + out_sp[1] * (2 * z + az))
}

pub fn upconv2_forward<T: Real>(
    input: &Tensor5<T>,
    shape: UpConvShape,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor5<T>> {
    shape.check(input, weight.len(), bias.len())?;
    let sp = input.spatial();
    let out_sp = sp.map(|d| 2 * d);
    let nin = input.voxels();
    let rows = shape.out_ch * 8;
    let mut out = Tensor5::zeros(input.batch(), shape.out_ch, out_sp)?;
    let mut y = vec![T::zero(); rows * nin];
    for b in 0..input.batch() {
        T::gemm(rows, shape.in_ch, nin, T::one(), weight, true, input.item(b), false, T::zero(), &mut y);
        for co in 0..shape.out_ch {
            let dst = out.channel_mut(b, co);
            for tap in 0..8 {
                let row = &y[(co * 8 + tap) * nin..][..nin];
                let mut p = 0;
                for z in 0..sp[2] {
                    for yy in 0..sp[1] {
                        for x in 0..sp[0] {
                            dst[upsampled_index(x, yy, z, tap, out_sp)] = row[p] + bias[co];
                            p += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2_backward_into<T: Real>(
    input: &Tensor5<T>,
    shape: UpConvShape,
    weight: &[T],
    grad_out: &Tensor5<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Result<Tensor5<T>> {
    shape.check(input, weight.len(), grad_bias.len())?;
    let sp = input.spatial();
    let out_sp = sp.map(|d| 2 * d);
    if grad_out.dims() != [input.batch(), shape.out_ch, out_sp[0], out_sp[1], out_sp[2]]
        || grad_weight.len() != weight.len()
    {
        return Err(Error::Shape(format!(
            "up-convolution gradient has shape {:?}, expected {} channels over {out_sp:?}",
            grad_out.dims(),
            shape.out_ch
        )));
    }
    let nin = input.voxels();
    let rows = shape.out_ch * 8;
    let mut grad_in = Tensor5::zeros(input.batch(), shape.in_ch, sp)?;
    let mut gy = vec![T::zero(); rows * nin];
    for b in 0..input.batch() {
        for co in 0..shape.out_ch {
            let src = grad_out.channel(b, co);
            grad_bias[co] += src.iter().copied().sum::<T>();
            for tap in 0..8 {
                let row = &mut gy[(co * 8 + tap) * nin..][..nin];
                let mut p = 0;
                for z in 0..sp[2] {
                    for yy in 0..sp[1] {
                        for x in 0..sp[0] {
                            row[p] = src[upsampled_index(x, yy, z, tap, out_sp)];
                            p += 1;
                        }
                    }
                }
            }
        }
        T::gemm(shape.in_ch, rows, nin, T::one(), weight, false, &gy, false, T::zero(), grad_in.item_mut(b));
        T::gemm(shape.in_ch, nin, rows, T::one(), input.item(b), false, &gy, true, T::one(), grad_weight);
    }
    Ok(grad_in)
}

pub fn upconv2_backward<T: Real>(
    input: &Tensor5<T>,
    shape: UpConvShape,
    weight: &[T],
    grad_out: &Tensor5<T>,
) -> Result<LayerGrads<T>> {
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); shape.out_ch];
    let gi = upconv2_backward_into(input, shape, weight, grad_out, &mut gw, &mut gb)?;
    Ok(LayerGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// Channel concatenation `[a, b]` per batch item.
pub fn concat_channels_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for i in 0..a.batch() {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor5::from_vec(a.batch(), a.channels() + b.channels(), a.spatial(), data)
}

/// Splits a concatenated gradient back into its first `a_channels` and the rest.
pub fn concat_channels_backward<T: Real>(
    grad: &Tensor5<T>,
    a_channels: usize,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    if a_channels == 0 || a_channels >= grad.channels() {
        return Err(Error::Shape(format!(
            "cannot split {} channels at {a_channels}",
            grad.channels()
        )));
    }
    let v = grad.voxels();
    let b_channels = grad.channels() - a_channels;
    let mut ga = Vec::with_capacity(grad.batch() * a_channels * v);
    let mut gb = Vec::with_capacity(grad.batch() * b_channels * v);
    for i in 0..grad.batch() {
        let item = grad.item(i);
        ga.extend_from_slice(&item[..a_channels * v]);
        gb.extend_from_slice(&item[a_channels * v..]);
    }
    Ok((
        Tensor5::from_vec(grad.batch(), a_channels, grad.spatial(), ga)?,
        Tensor5::from_vec(grad.batch(), b_channels, grad.spatial(), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, sp: [usize; 3]) -> Tensor5<f64> {
        let n = b * c * sp.iter().product::<usize>();
        Tensor5::from_vec(b, c, sp, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn conv_direct(input: &Tensor5<f64>, shape: ConvShape, w: &[f64], bias: &[f64]) -> Tensor5<f64> {
        let [nx, ny, nz] = input.spatial();
        let k = shape.kernel as isize;
        let r = k / 2;
        let mut out = Tensor5::zeros(input.batch(), shape.out_ch, input.spatial()).unwrap();
        for b in 0..input.batch() {
            for co in 0..shape.out_ch {
                for z in 0..nz as isize {
                    for y in 0..ny as isize {
                        for x in 0..nx as isize {
                            let mut acc = bias[co];
                            for ci in 0..shape.in_ch {
                                let chan = input.channel(b, ci);
                                for dz in 0..k {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let (sx, sy, sz) = (x + dx - r, y + dy - r, z + dz - r);
                                            if sx < 0 || sy < 0 || sz < 0 || sx >= nx as isize || sy >= ny as isize || sz >= nz as isize {
                                                continue;
                                            }
                                            let wi = ((co * shape.in_ch + ci) * shape.taps()) + ((dz * k + dy) * k + dx) as usize;
                                            acc += w[wi] * chan[(sx + nx as isize * (sy + ny as isize * sz)) as usize];
                                        }
                                    }
                                }
                            }
                            let idx = (x + nx as isize * (y + ny as isize * z)) as usize;
                            out.channel_mut(b, co)[idx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, sp) in [(3, [5, 4, 3]), (1, [3, 3, 2]), (3, [1, 2, 6]), (3, [48, 48, 2])] {
            let shape = ConvShape::new(2, 3, k);
            let input = random_tensor(&mut rng, 2, 2, sp);
            let w: Vec<f64> = (0..shape.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv3d_forward(&input, shape, &w, &bias).unwrap();
            let want = conv_direct(&input, shape, &w, &bias);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, 1, 1, [4, 5, 6]);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let out = conv3d_forward(&input, ConvShape::new(1, 1, 3), &w, &[0.0]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_on_constant_interior_is_27() {
        let input = Tensor5::from_vec(1, 1, [5, 5, 5], vec![1.0f64; 125]).unwrap();
        let out = conv3d_forward(&input, ConvShape::new(1, 1, 3), &[1.0; 27], &[0.0]).unwrap();
        let c = out.channel(0, 0);
        assert_eq!(c[2 + 5 * (2 + 5 * 2)], 27.0);
        assert_eq!(c[0], 8.0); // corner sees a 2x2x2 neighborhood
    }

    #[test]
    fn conv_shape_errors() {
        let input = Tensor5::<f64>::zeros(1, 2, [4, 4, 4]).unwrap();
        assert!(conv3d_forward(&input, ConvShape::new(1, 1, 3), &[0.0; 27], &[0.0]).is_err());
        assert!(conv3d_forward(&input, ConvShape::new(2, 1, 3), &[0.0; 27], &[0.0]).is_err());
        assert!(conv3d_forward(&input, ConvShape::new(2, 1, 2), &[0.0; 16], &[0.0]).is_err());
    }

    #[test]
    fn interior_translation_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = [8, 8, 8];
        let input = random_tensor(&mut rng, 1, 2, sp);
        // shift by one voxel along x
        let mut shifted = Tensor5::zeros(1, 2, sp).unwrap();
        for c in 0..2 {
            let src = input.channel(0, c).to_vec();
            let dst = shifted.channel_mut(0, c);
            for z in 0..8 {
                for y in 0..8 {
                    for x in 1..8 {
                        dst[x + 8 * (y + 8 * z)] = src[x - 1 + 8 * (y + 8 * z)];
                    }
                }
            }
        }
        let shape = ConvShape::new(2, 2, 3);
        let w: Vec<f64> = (0..shape.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = conv3d_forward(&input, shape, &w, &[0.1, -0.2]).unwrap();
        let b = conv3d_forward(&shifted, shape, &w, &[0.1, -0.2]).unwrap();
        for c in 0..2 {
            for z in 1..7 {
                for y in 1..7 {
                    for x in 2..7 {
                        let i = x + 8 * (y + 8 * z);
                        assert_eq!(b.channel(0, c)[i], a.channel(0, c)[i - 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn relu_values() {
        let t = Tensor5::from_vec(1, 1, [3, 1, 1], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_block() {
        let t = Tensor5::from_vec(1, 1, [2, 2, 2], (1..=8).map(|x| x as f64).collect()).unwrap();
        let (out, arg) = maxpool2_forward(&t).unwrap();
        assert_eq!(out.data(), &[8.0]);
        let g = maxpool2_backward(&Tensor5::from_vec(1, 1, [1, 1, 1], vec![3.0]).unwrap(), &arg).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let t = Tensor5::from_vec(1, 1, [2, 2, 2], vec![1.0f64; 8]).unwrap();
        let (_, arg) = maxpool2_forward(&t).unwrap();
        let g = maxpool2_backward(&Tensor5::from_vec(1, 1, [1, 1, 1], vec![1.0]).unwrap(), &arg).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        let t = Tensor5::<f64>::zeros(1, 1, [3, 2, 2]).unwrap();
        assert!(matches!(maxpool2_forward(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn upconv_places_taps() {
        // one input voxel, one channel: output block equals the kernel
        let t = Tensor5::from_vec(1, 1, [1, 1, 1], vec![2.0f64]).unwrap();
        let w: Vec<f64> = (0..8).map(|x| x as f64).collect();
        let out = upconv2_forward(&t, UpConvShape::new(1, 1), &w, &[1.0]).unwrap();
        assert_eq!(out.spatial(), [2, 2, 2]);
        let want: Vec<f64> = (0..8).map(|x| 2.0 * x as f64 + 1.0).collect();
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 2, 1, [2, 2, 2]);
        let b = random_tensor(&mut rng, 2, 3, [2, 2, 2]);
        let c = concat_channels_forward(&a, &b).unwrap();
        assert_eq!(c.channels(), 4);
        assert_eq!(c.channel(1, 0), a.channel(1, 0));
        assert_eq!(c.channel(1, 2), b.channel(1, 1));
        let (ga, gb) = concat_channels_backward(&c, 1).unwrap();
        assert_eq!((ga, gb), (a, b));
    }
}
