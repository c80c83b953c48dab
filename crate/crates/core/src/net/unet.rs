//! 3D (residual) U-Net with an explicit forward cache and reverse pass.
//!
//! Encoder level `l` runs `convs_per_level` 3x3x3 conv + ReLU layers with
//! `base_channels * 2^l` channels and is followed by 2x2x2 max pooling
//! (except the deepest level). Each decoder step upsamples with a 2x2x2
//! transposed conv + ReLU, concatenates `[skip, upsampled]` and runs the
//! same conv stack. A final conv without activation maps to one channel.
//! With `residual` set the output is `ReLU(input + head)`, otherwise
//! `ReLU(head)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels_backward, concat_channels_forward, conv3d_backward_into, conv3d_forward,
    maxpool2_backward, maxpool2_forward, relu_in_place, relu_mask_in_place, upconv2_backward_into,
    upconv2_forward, ConvShape, PoolArgmax, UpConvShape,
};
use super::tensor::Tensor5;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    /// Kernel edge of the output conv (3 or 1).
    pub final_kernel: usize,
    pub residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            convs_per_level: 2,
            final_kernel: 3,
            residual: true,
        }
    }
}

impl NetworkConfig {
    pub fn new(levels: usize, base_channels: usize) -> Self {
        Self {
            levels,
            base_channels,
            ..Self::default()
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.convs_per_level == 0 {
            return Err(Error::Config(format!(
                "levels, base_channels and convs_per_level must be >= 1: {self:?}"
            )));
        }
        if self.levels > 16 {
            return Err(Error::Config(format!("levels = {} is unreasonably deep", self.levels)));
        }
        if self.final_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("final_kernel must be odd, got {}", self.final_kernel)));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every spatial dim must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be divisible by 2^(levels-1) = {d} for a {}-level network",
                self.levels
            )));
        }
        Ok(())
    }

    /// Layers in parameter declaration order.
    pub fn layers(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            let c = self.channels_at(l);
            let cin = if l == 0 { 1 } else { self.channels_at(l - 1) };
            for i in 0..self.convs_per_level {
                out.push(LayerKind::Conv(ConvShape::new(if i == 0 { cin } else { c }, c, 3)));
            }
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.channels_at(l);
            out.push(LayerKind::UpConv(UpConvShape::new(self.channels_at(l + 1), c)));
            for i in 0..self.convs_per_level {
                out.push(LayerKind::Conv(ConvShape::new(if i == 0 { 2 * c } else { c }, c, 3)));
            }
        }
        out.push(LayerKind::Conv(ConvShape::new(self.base_channels, 1, self.final_kernel)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.weight_len() + l.bias_len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvShape),
    UpConv(UpConvShape),
}

impl LayerKind {
    pub fn weight_len(&self) -> usize {
        match self {
            LayerKind::Conv(s) => s.weight_len(),
            LayerKind::UpConv(s) => s.weight_len(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            LayerKind::Conv(s) => s.out_ch,
            LayerKind::UpConv(s) => s.out_ch,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            LayerKind::Conv(s) => (s.in_ch * s.taps(), s.out_ch * s.taps()),
            LayerKind::UpConv(s) => (s.in_ch * 8, s.out_ch * 8),
        }
    }
}

/// Location of one layer inside the flat parameter vector: kernel first,
/// then bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub kind: LayerKind,
    pub offset: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.kind.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.kind.weight_len();
        s..s + self.kind.bias_len()
    }
}

/// All learnable parameters as one flat vector plus its layout table.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    config: NetworkConfig,
    layout: Vec<LayerSlot>,
    params: Vec<T>,
}

fn layout_for(config: &NetworkConfig) -> (Vec<LayerSlot>, usize) {
    let mut offset = 0;
    let layout = config
        .layers()
        .into_iter()
        .map(|kind| {
            let slot = LayerSlot { kind, offset };
            offset += kind.weight_len() + kind.bias_len();
            slot
        })
        .collect();
    (layout, offset)
}

impl<T: Real> NetworkWeights<T> {
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (layout, n) = layout_for(&config);
        Ok(Self {
            config,
            layout,
            params: vec![T::zero(); n],
        })
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in w.layout.clone() {
            let (fan_in, fan_out) = slot.kind.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut w.params[slot.weight_range()] {
                *p = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(w)
    }

    pub fn from_params(config: NetworkConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (layout, n) = layout_for(&config);
        if params.len() != n {
            return Err(Error::Shape(format!(
                "network {config:?} has {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Parse("network parameters contain non-finite values".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::lit(p.as_f64())).collect(),
        }
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.params[self.layout[layer].weight_range()]
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.params[self.layout[layer].bias_range()]
    }

    fn conv_shape(&self, layer: usize) -> ConvShape {
        match self.layout[layer].kind {
            LayerKind::Conv(s) => s,
            LayerKind::UpConv(_) => unreachable!("layer {layer} is an up-convolution"),
        }
    }

    fn up_shape(&self, layer: usize) -> UpConvShape {
        match self.layout[layer].kind {
            LayerKind::UpConv(s) => s,
            LayerKind::Conv(_) => unreachable!("layer {layer} is a convolution"),
        }
    }

    fn conv(&self, layer: usize, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        conv3d_forward(x, self.conv_shape(layer), self.weight(layer), self.bias(layer))
    }

    fn conv_relu(&self, layer: usize, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut y = self.conv(layer, x)?;
        relu_in_place(&mut y);
        Ok(y)
    }

    fn up_relu(&self, layer: usize, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut y = upconv2_forward(x, self.up_shape(layer), self.weight(layer), self.bias(layer))?;
        relu_in_place(&mut y);
        Ok(y)
    }

    fn enc_layer(&self, level: usize, i: usize) -> usize {
        level * self.config.convs_per_level + i
    }

    /// Decoder step `s` (0 = deepest) starts with its up-convolution.
    fn up_layer(&self, s: usize) -> usize {
        let cpl = self.config.convs_per_level;
        self.config.levels * cpl + s * (1 + cpl)
    }

    fn head_layer(&self) -> usize {
        self.layout.len() - 1
    }
}

/// Activations kept by [`UNet::forward`] for the reverse pass.
#[derive(Debug, Clone)]
struct ForwardCache<T> {
    /// Input of every conv stack layer, per encoder level / decoder step;
    /// the last entry is the stack output (post-ReLU).
    enc: Vec<Vec<Tensor5<T>>>,
    pools: Vec<PoolArgmax>,
    /// Per decoder step: up-conv input is the previous stack output, so only
    /// its post-ReLU output is stored; `dec` mirrors `enc`.
    up_out: Vec<Tensor5<T>>,
    dec: Vec<Vec<Tensor5<T>>>,
    output: Tensor5<T>,
}

/// Gradients of a scalar loss with respect to the network parameters (same
/// layout as [`NetworkWeights::params`]) and the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<T>,
    pub input: Tensor5<T>,
}

/// A network plus the activations of its most recent forward pass.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    weights: NetworkWeights<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> UNet<T> {
    pub fn new(weights: NetworkWeights<T>) -> Self {
        Self {
            weights,
            cache: None,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        self.weights.config()
    }

    pub fn weights(&self) -> &NetworkWeights<T> {
        &self.weights
    }

    /// Mutable parameter access; drops any cached activations.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.cache = None;
        self.weights.params_mut()
    }

    pub fn into_weights(self) -> NetworkWeights<T> {
        self.weights
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Forward pass that keeps activations for [`UNet::backward`].
    pub fn forward(&mut self, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.cache = None;
        let cache = run_forward(&self.weights, input, true)?;
        let out = cache.output.clone();
        self.cache = Some(cache);
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn predict(&self, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(run_forward(&self.weights, input, false)?.output)
    }

    /// Reverse pass for the cached forward. `grad_out` is dLoss/dOutput.
    pub fn backward(&self, grad_out: &Tensor5<T>) -> Result<Gradients<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::State("backward called before forward"))?;
        run_backward(&self.weights, cache, grad_out)
    }
}

/// Applies the network to one volume.
pub fn unet_forward<T: Real>(v: &Volume3D<T>, weights: &NetworkWeights<T>) -> Result<Volume3D<T>> {
    let out = run_forward(weights, &Tensor5::from_volume(v), false)?.output;
    out.to_volume(0, 0, v.spacing())
}

fn run_forward<T: Real>(w: &NetworkWeights<T>, input: &Tensor5<T>, keep: bool) -> Result<ForwardCache<T>> {
    let cfg = *w.config();
    if input.channels() != 1 {
        return Err(Error::Shape(format!(
            "network input must have one channel, got {}",
            input.channels()
        )));
    }
    cfg.check_dims(input.spatial())?;
    let cpl = cfg.convs_per_level;

    // Stack lists hold the stack input followed by each conv output; when not
    // keeping, only the last element (needed as skip or next input) survives.
    let run_stack = |first: usize, x: Tensor5<T>| -> Result<Vec<Tensor5<T>>> {
        let mut acts = vec![x];
        for i in 0..cpl {
            let y = w.conv_relu(first + i, acts.last().expect("stack is nonempty"))?;
            if !keep {
                acts.clear();
            }
            acts.push(y);
        }
        Ok(acts)
    };

    let mut enc = Vec::with_capacity(cfg.levels);
    let mut pools = Vec::new();
    let mut x = input.clone();
    for l in 0..cfg.levels {
        let acts = run_stack(w.enc_layer(l, 0), x)?;
        if l + 1 < cfg.levels {
            let (pooled, arg) = maxpool2_forward(acts.last().expect("stack is nonempty"))?;
            pools.push(arg);
            x = pooled;
        } else {
            x = acts.last().expect("stack is nonempty").clone();
        }
        enc.push(acts);
    }

    let mut up_out = Vec::new();
    let mut dec: Vec<Vec<Tensor5<T>>> = Vec::new();
    for s in 0..cfg.levels - 1 {
        let l = cfg.levels - 2 - s;
        let up = w.up_relu(w.up_layer(s), &x)?;
        let skip = enc[l].last().expect("stack is nonempty");
        let cat = concat_channels_forward(skip, &up)?;
        if keep {
            up_out.push(up);
        } else {
            // The skip is consumed; release the level's memory.
            enc[l].clear();
        }
        let acts = run_stack(w.up_layer(s) + 1, cat)?;
        x = acts.last().expect("stack is nonempty").clone();
        if keep {
            dec.push(acts);
        }
    }

    let mut output = w.conv(w.head_layer(), &x)?;
    if cfg.residual {
        output.add_assign(input)?;
    }
    relu_in_place(&mut output);

    if !keep {
        enc.clear();
    }
    Ok(ForwardCache {
        enc,
        pools,
        up_out,
        dec,
        output,
    })
}

fn accumulate<T: Real>(slot: &mut Option<Tensor5<T>>, g: Tensor5<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn run_backward<T: Real>(
    w: &NetworkWeights<T>,
    cache: &ForwardCache<T>,
    grad_out: &Tensor5<T>,
) -> Result<Gradients<T>> {
    let cfg = *w.config();
    cache.output.same_shape(grad_out)?;
    let mut gparams = vec![T::zero(); w.len()];

    // Backprop through a conv stack whose activations are `acts`; returns the
    // gradient at the stack input.
    let stack_backward = |first: usize, acts: &[Tensor5<T>], mut g: Tensor5<T>, gp: &mut [T]| -> Result<Tensor5<T>> {
        for i in (0..acts.len() - 1).rev() {
            relu_mask_in_place(&acts[i + 1], &mut g);
            let slot = w.layout()[first + i];
            let (gw, gb) = split_grad(gp, &slot);
            g = conv3d_backward_into(&acts[i], w.conv_shape(first + i), w.weight(first + i), &g, gw, gb)?;
        }
        Ok(g)
    };

    let mut g_pre = grad_out.clone();
    relu_mask_in_place(&cache.output, &mut g_pre);
    let mut g_input = if cfg.residual {
        Some(g_pre.clone())
    } else {
        None
    };

    let head = w.head_layer();
    let head_in = match cache.dec.last() {
        Some(acts) => acts.last(),
        None => cache.enc.last().and_then(|a| a.last()),
    }
    .expect("forward cache holds the head input");
    let (gw, gb) = split_grad(&mut gparams, &w.layout()[head]);
    let mut g = conv3d_backward_into(head_in, w.conv_shape(head), w.weight(head), &g_pre, gw, gb)?;

    // Gradients arriving at each encoder level's output via skips.
    let mut skip_grads: Vec<Option<Tensor5<T>>> = vec![None; cfg.levels];
    for s in (0..cfg.levels - 1).rev() {
        let l = cfg.levels - 2 - s;
        let up_layer = w.up_layer(s);
        let g_cat = stack_backward(up_layer + 1, &cache.dec[s], g, &mut gparams)?;
        let (g_skip, mut g_up) = concat_channels_backward(&g_cat, cfg.channels_at(l))?;
        accumulate(&mut skip_grads[l], g_skip)?;
        relu_mask_in_place(&cache.up_out[s], &mut g_up);
        let up_in = if s == 0 {
            cache.enc[cfg.levels - 1].last()
        } else {
            cache.dec[s - 1].last()
        }
        .expect("forward cache holds the up-conv input");
        let (gw, gb) = split_grad(&mut gparams, &w.layout()[up_layer]);
        g = upconv2_backward_into(up_in, w.up_shape(up_layer), w.weight(up_layer), &g_up, gw, gb)?;
    }

    // `g` is now the gradient at the deepest encoder output.
    let mut carry = Some(g);
    for l in (0..cfg.levels).rev() {
        let mut g_level = carry.take();
        if let Some(sg) = skip_grads[l].take() {
            accumulate(&mut g_level, sg)?;
        }
        let g_level = g_level.expect("every encoder level receives a gradient");
        let g_in = stack_backward(w.enc_layer(l, 0), &cache.enc[l], g_level, &mut gparams)?;
        if l > 0 {
            carry = Some(maxpool2_backward(&g_in, &cache.pools[l - 1])?);
        } else {
            accumulate(&mut g_input, g_in)?;
        }
    }

    Ok(Gradients {
        params: gparams,
        input: g_input.expect("input gradient is always set"),
    })
}

fn split_grad<'a, T>(gp: &'a mut [T], slot: &LayerSlot) -> (&'a mut [T], &'a mut [T]) {
    let (gw, rest) = gp[slot.offset..].split_at_mut(slot.kind.weight_len());
    (gw, &mut rest[..slot.kind.bias_len()])
}
