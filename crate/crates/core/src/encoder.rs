//! Attention encoder: a convolutional trunk with channel + spatial attention
//! after every block, Gaussian heads for `(μ, log σ)`, and a mirrored
//! upsampling decoder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::distributions::{DiagGaussian, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const SPATIAL_KERNEL: usize = 7;
const SPATIAL_PAD: usize = 3;
const CONV_KERNEL: usize = 3;
const LOGSTD_BIAS_INIT: f64 = -1.0;

/// A single `(C, H, W)` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::contract("feature map dimensions must be positive"));
        }
        let tensor = Tensor::new(vec![1, channels, height, width], data)?;
        if !tensor.all_finite() {
            return Err(Error::contract("feature map entries must be finite"));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }
}

/// Weights of one attention block: the shared channel MLP and the 7×7
/// spatial filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub reduction: usize,
    /// `[C/r, C]`
    pub mlp_w0: Tensor,
    /// `[C, C/r]`
    pub mlp_w1: Tensor,
    /// `[1, 2, 7, 7]`
    pub spatial_kernel: Tensor,
}

impl AttentionParams {
    pub fn new(reduction: usize, mlp_w0: Tensor, mlp_w1: Tensor, spatial_kernel: Tensor) -> Result<Self> {
        let channels = mlp_w0.shape().get(1).copied().unwrap_or(0);
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::contract(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        if mlp_w0.shape() != [hidden, channels] || mlp_w1.shape() != [channels, hidden] {
            return Err(Error::contract("attention MLP weights have inconsistent shapes"));
        }
        if spatial_kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
            return Err(Error::contract("spatial kernel must be [1, 2, 7, 7]"));
        }
        if !(mlp_w0.all_finite() && mlp_w1.all_finite() && spatial_kernel.all_finite()) {
            return Err(Error::contract("attention parameters must be finite"));
        }
        Ok(AttentionParams { reduction, mlp_w0, mlp_w1, spatial_kernel })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract("reduction ratio must divide channel count"));
        }
        let hidden = channels / reduction;
        Self::new(
            reduction,
            Tensor::zeros(&[hidden, channels]),
            Tensor::zeros(&[channels, hidden]),
            Tensor::zeros(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
        )
    }

    pub fn channels(&self) -> usize {
        self.mlp_w0.shape()[1]
    }
}

/// Tape handles for one attention block's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionVars {
    pub w0: Var,
    pub w1: Var,
    pub kernel: Var,
}

/// `σ(ω₁ relu(ω₀ avg) + ω₁ relu(ω₀ max))`, per channel: `[N,C,H,W] → [N,C]`.
pub(crate) fn channel_map(tape: &mut Tape, x: Var, p: AttentionVars) -> Result<Var> {
    let avg = tape.mean_hw(x)?;
    let max = tape.max_hw(x)?;
    let branch = |tape: &mut Tape, v: Var| -> Result<Var> {
        let h = tape.linear(v, p.w0, None)?;
        let h = tape.relu(h);
        tape.linear(h, p.w1, None)
    };
    let a = branch(tape, avg)?;
    let m = branch(tape, max)?;
    let s = tape.add(a, m)?;
    Ok(tape.sigmoid(s))
}

/// `σ(f⁷ˣ⁷([mean_c; max_c]))`: `[N,C,H,W] → [N,1,H,W]`.
pub(crate) fn spatial_map(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    let avg = tape.mean_c(x)?;
    let max = tape.max_c(x)?;
    let cat = tape.concat_channels(&[avg, max])?;
    let conv = tape.conv2d(cat, kernel, None, SPATIAL_PAD)?;
    Ok(tape.sigmoid(conv))
}

/// Channel refinement first, then spatial refinement of the refined map.
pub(crate) fn attention_block(tape: &mut Tape, x: Var, p: AttentionVars) -> Result<Var> {
    let mc = channel_map(tape, x, p)?;
    let refined = tape.scale_channels(x, mc)?;
    let ms = spatial_map(tape, refined, p.kernel)?;
    tape.scale_spatial(refined, ms)
}

fn load_attention(tape: &mut Tape, phi: &FeatureMap, params: &AttentionParams) -> Result<(Var, AttentionVars)> {
    if phi.channels() != params.channels() {
        return Err(Error::contract(format!(
            "feature map has {} channels, attention expects {}",
            phi.channels(),
            params.channels()
        )));
    }
    let x = tape.leaf(phi.tensor.clone());
    let vars = AttentionVars {
        w0: tape.leaf(params.mlp_w0.clone()),
        w1: tape.leaf(params.mlp_w1.clone()),
        kernel: tape.leaf(params.spatial_kernel.clone()),
    };
    Ok((x, vars))
}

/// Channel attention weights, one per channel, each in `(0, 1)`.
pub fn channel_attention(phi: &FeatureMap, params: &AttentionParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (x, vars) = load_attention(&mut tape, phi, params)?;
    let m = channel_map(&mut tape, x, vars)?;
    Ok(tape.value(m).data().to_vec())
}

/// Spatial attention map of shape `(1, H, W)`, flattened row-major.
pub fn spatial_attention(phi: &FeatureMap, params: &AttentionParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (x, vars) = load_attention(&mut tape, phi, params)?;
    let m = spatial_map(&mut tape, x, vars.kernel)?;
    Ok(tape.value(m).data().to_vec())
}

/// Applies channel then spatial attention. Output shape equals input shape.
pub fn apply_attention(phi: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let (x, vars) = load_attention(&mut tape, phi, params)?;
    let out = attention_block(&mut tape, x, vars)?;
    Ok(FeatureMap { tensor: tape.value(out).clone() })
}

/// Channel-MLP reduction used when none is configured.
pub fn default_reduction(channels: usize) -> usize {
    if channels < 16 {
        4
    } else {
        8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub side: usize,
    pub widths: Vec<usize>,
    pub latent: usize,
    /// One channel-MLP reduction ratio per block.
    pub reductions: Vec<usize>,
}

impl Architecture {
    /// Architecture with the default reduction rule.
    pub fn new(in_channels: usize, side: usize, widths: Vec<usize>, latent: usize) -> Result<Self> {
        let reductions = widths.iter().map(|&w| default_reduction(w)).collect();
        Self::with_reductions(in_channels, side, widths, latent, reductions)
    }

    pub fn with_reductions(
        in_channels: usize,
        side: usize,
        widths: Vec<usize>,
        latent: usize,
        reductions: Vec<usize>,
    ) -> Result<Self> {
        let arch = Architecture { in_channels, side, widths, latent, reductions };
        arch.validate()?;
        Ok(arch)
    }

    /// Desk-scale default: widths 16/32/64, latent 32.
    pub fn desk(in_channels: usize, side: usize) -> Result<Self> {
        Self::new(in_channels, side, vec![16, 32, 64], 32)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.latent == 0 || self.widths.is_empty() {
            return Err(Error::contract("architecture needs input channels, widths and a latent size"));
        }
        if self.reductions.len() != self.widths.len() {
            return Err(Error::contract("one reduction ratio per block is required"));
        }
        for (&w, &r) in self.widths.iter().zip(&self.reductions) {
            if r == 0 || w % r != 0 {
                return Err(Error::contract(format!("reduction {r} does not divide width {w}")));
            }
        }
        let scale = 1usize << self.widths.len();
        if self.side == 0 || !self.side.is_multiple_of(scale) {
            return Err(Error::contract(format!(
                "image side {} must be a positive multiple of {scale}",
                self.side
            )));
        }
        Ok(())
    }

    /// Side length of the deepest feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.side >> self.widths.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.side, self.side]
    }

    fn last_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (i, (&w, &r)) in self.widths.iter().zip(&self.reductions).enumerate() {
            out.push((format!("conv{i}.weight"), vec![w, prev, CONV_KERNEL, CONV_KERNEL]));
            out.push((format!("conv{i}.bias"), vec![w]));
            out.push((format!("att{i}.mlp_w0"), vec![w / r, w]));
            out.push((format!("att{i}.mlp_w1"), vec![w, w / r]));
            out.push((format!("att{i}.spatial"), vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]));
            prev = w;
        }
        let c = self.last_width();
        out.push(("mu_head.weight".into(), vec![self.latent, c]));
        out.push(("mu_head.bias".into(), vec![self.latent]));
        out.push(("logstd_head.weight".into(), vec![self.latent, c]));
        out.push(("logstd_head.bias".into(), vec![self.latent]));
        let s0 = self.bottleneck_side();
        out.push(("dec.fc.weight".into(), vec![c * s0 * s0, self.latent]));
        out.push(("dec.fc.bias".into(), vec![c * s0 * s0]));
        for (j, i) in (0..self.widths.len()).rev().enumerate() {
            let cin = self.widths[i];
            let cout = if i == 0 { self.in_channels } else { self.widths[i - 1] };
            out.push((format!("dec.conv{j}.weight"), vec![cout, cin, CONV_KERNEL, CONV_KERNEL]));
            out.push((format!("dec.conv{j}.bias"), vec![cout]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Vars produced by one batched forward pass.
#[derive(Debug)]
pub struct Forward {
    pub params: Vec<Var>,
    /// `[N, d]`
    pub mean: Var,
    /// `[N, d]`, clamped to the allowed log-std range.
    pub log_std: Var,
    /// `[N, C, H, W]`, present when the decoder ran.
    pub recon: Option<Var>,
}

/// Where the decoder's latent comes from.
#[derive(Debug, Clone, Copy)]
pub enum DecodeFrom<'a> {
    None,
    Mean,
    /// `z = μ + ζ ⊙ σ` with the given `[N, d]` standard-normal draws.
    Sample(&'a Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    arch: Architecture,
    params: Vec<Param>,
}

impl EncoderModel {
    /// Uniform `±√(1/fan_in)` initialisation; the log-std head bias starts at −1.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::INIT]);
        let layout = arch.layout();
        let mut params = Vec::with_capacity(layout.len());
        let mut fan_in = 1;
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = if name == "logstd_head.bias" {
                vec![LOGSTD_BIAS_INIT; n]
            } else {
                if !name.ends_with(".bias") {
                    fan_in = shape[1..].iter().product();
                }
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.push(Param { name, value: Tensor::new(shape, data).expect("layout shape") });
        }
        EncoderModel { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::contract(format!(
                "architecture declares {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} should be {shape:?}, got {:?}",
                    p.value.shape()
                )));
            }
            if !p.value.all_finite() {
                return Err(Error::contract(format!("parameter {name} is not finite")));
            }
        }
        let params = layout
            .into_iter()
            .zip(params)
            .map(|((name, _), p)| Param { name, value: p.value })
            .collect();
        Ok(EncoderModel { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    /// Attention weights of block `i` as a standalone value.
    pub fn attention_params(&self, block: usize) -> Result<AttentionParams> {
        let base = block * 5;
        if block >= self.arch.widths.len() {
            return Err(Error::contract(format!("no attention block {block}")));
        }
        AttentionParams::new(
            self.arch.reductions[block],
            self.params[base + 2].value.clone(),
            self.params[base + 3].value.clone(),
            self.params[base + 4].value.clone(),
        )
    }

    /// Stacks `[C, H, W]` images into one `[N, C, H, W]` batch.
    pub fn batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let shape = self.arch.image_shape();
        let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
        for img in images {
            if img.shape() != shape {
                return Err(Error::contract(format!(
                    "image shape {:?} does not match model input {:?}",
                    img.shape(),
                    shape
                )));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: Tensor, decode: DecodeFrom<'_>) -> Result<Forward> {
        let [c, h, w] = self.arch.image_shape();
        let n = match *images.shape() {
            [n, ic, ih, iw] if (ic, ih, iw) == (c, h, w) && n > 0 => n,
            ref s => {
                return Err(Error::contract(format!(
                    "input batch {s:?} does not match model input [N, {c}, {h}, {w}]"
                )))
            }
        };
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let x = tape.leaf(images);
        let blocks = self.arch.widths.len();
        let mut hcur = x;
        for i in 0..blocks {
            let b = i * 5;
            hcur = tape.conv2d(hcur, params[b], Some(params[b + 1]), 1)?;
            hcur = tape.relu(hcur);
            hcur = tape.max_pool2(hcur)?;
            let att = AttentionVars { w0: params[b + 2], w1: params[b + 3], kernel: params[b + 4] };
            hcur = attention_block(tape, hcur, att)?;
        }
        let pooled = tape.mean_hw(hcur)?;
        let head = blocks * 5;
        let mean = tape.linear(pooled, params[head], Some(params[head + 1]))?;
        let raw_ls = tape.linear(pooled, params[head + 2], Some(params[head + 3]))?;
        let log_std = tape.clamp(raw_ls, LOG_STD_MIN, LOG_STD_MAX);

        let z = match decode {
            DecodeFrom::None => None,
            DecodeFrom::Mean => Some(mean),
            DecodeFrom::Sample(eps) => {
                if eps.shape() != [n, self.arch.latent] {
                    return Err(Error::contract("noise tensor must be [N, latent]"));
                }
                let sigma = tape.exp(log_std);
                let scaled = tape.mul_const(sigma, eps.clone())?;
                Some(tape.add(mean, scaled)?)
            }
        };
        let recon = match z {
            Some(z) => Some(self.decoder(tape, &params, z, n)?),
            None => None,
        };
        Ok(Forward { params, mean, log_std, recon })
    }

    fn decoder(&self, tape: &mut Tape, params: &[Var], z: Var, n: usize) -> Result<Var> {
        let blocks = self.arch.widths.len();
        let fc = blocks * 5 + 4;
        let s0 = self.arch.bottleneck_side();
        let c = self.arch.last_width();
        let h = tape.linear(z, params[fc], Some(params[fc + 1]))?;
        let h = tape.relu(h);
        let mut h = tape.reshape(h, &[n, c, s0, s0])?;
        for j in 0..blocks {
            let k = fc + 2 + 2 * j;
            h = tape.upsample2(h)?;
            h = tape.conv2d(h, params[k], Some(params[k + 1]), 1)?;
            h = if j + 1 == blocks { tape.sigmoid(h) } else { tape.relu(h) };
        }
        Ok(h)
    }

    /// Encodes a batch of images to their latent distributions.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Vec<DiagGaussian>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let batch = self.batch(images)?;
        let fwd = self.forward(&mut tape, batch, DecodeFrom::None)?;
        split_gaussians(tape.value(fwd.mean), tape.value(fwd.log_std))
    }

    pub fn encode(&self, image: &Tensor) -> Result<DiagGaussian> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Reconstruction from a latent code. The decoder has fixed geometry, so
    /// `out_shape` must equal the model's input shape.
    pub fn decode(&self, z: &[f64], out_shape: [usize; 3]) -> Result<Tensor> {
        if out_shape != self.arch.image_shape() {
            return Err(Error::contract(format!(
                "decoder produces {:?}, requested {out_shape:?}",
                self.arch.image_shape()
            )));
        }
        if z.len() != self.arch.latent || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("latent code must be finite with the model's latent size"));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let zv = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let out = self.decoder(&mut tape, &params, zv, 1)?;
        tape.value(out).clone().reshaped(&out_shape)
    }

    /// `decode(encode(x).mean)` for each image.
    pub fn reconstruct_from_mean(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let batch = self.batch(images)?;
        let fwd = self.forward(&mut tape, batch, DecodeFrom::Mean)?;
        let recon = tape.value(fwd.recon.expect("decoder requested"));
        let shape = self.arch.image_shape();
        let per: usize = shape.iter().product();
        recon
            .data()
            .chunks(per)
            .map(|c| Tensor::new(shape.to_vec(), c.to_vec()))
            .collect()
    }
}

pub(crate) fn split_gaussians(mean: &Tensor, log_std: &Tensor) -> Result<Vec<DiagGaussian>> {
    let d = mean.shape()[1];
    mean.data()
        .chunks(d)
        .zip(log_std.data().chunks(d))
        .map(|(m, l)| DiagGaussian::new(m.to_vec(), l.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    fn random_params(c: usize, r: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams::new(
            r,
            random_tensor(&[c / r, c], rng, 1.0),
            random_tensor(&[c, c / r], rng, 1.0),
            random_tensor(&[1, 2, 7, 7], rng, 0.3),
        )
        .unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line channel attention: pooled vectors through the dense MLP.
    fn channel_oracle(phi: &FeatureMap, p: &AttentionParams) -> Vec<f64> {
        let (c, hw) = (phi.channels(), phi.height() * phi.width());
        let hidden = c / p.reduction;
        let avg: Vec<f64> = (0..c).map(|ch| phi.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| phi.data()[ch * hw..(ch + 1) * hw].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let hdn: Vec<f64> = (0..hidden)
                .map(|j| (0..c).map(|i| p.mlp_w0.data()[j * c + i] * v[i]).sum::<f64>().max(0.0))
                .collect();
            (0..c).map(|i| (0..hidden).map(|j| p.mlp_w1.data()[i * hidden + j] * hdn[j]).sum()).collect()
        };
        let (a, m) = (mlp(&avg), mlp(&max));
        a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)).collect()
    }

    /// Nested-loop 7×7 convolution over `[mean_c; max_c]` with zero padding.
    fn spatial_oracle(phi: &FeatureMap, kernel: &Tensor) -> Vec<f64> {
        let (c, h, w) = (phi.channels(), phi.height(), phi.width());
        let mut pooled = vec![vec![0.0; h * w]; 2];
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| phi.get(ch, y, x)).collect();
                pooled[0][y * w + x] = vals.iter().sum::<f64>() / c as f64;
                pooled[1][y * w + x] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (ch, plane) in pooled.iter().enumerate() {
                    for ky in 0..7isize {
                        for kx in 0..7isize {
                            let (iy, ix) = (y + ky - 3, x + kx - 3);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += kernel.data()[(ch * 7 + ky as usize) * 7 + kx as usize]
                                * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[y as usize * w + x as usize] = sigmoid(acc);
            }
        }
        out
    }

    #[test]
    fn zero_weights_give_half_attention() {
        let phi = FeatureMap::new(8, 5, 5, vec![0.0; 200]).unwrap();
        let params = AttentionParams::zeros(8, 4).unwrap();
        assert!(channel_attention(&phi, &params).unwrap().iter().all(|&v| v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = random_map(8, 6, 7, &mut rng);
        let s = spatial_attention(&phi, &params).unwrap();
        assert_eq!(s.len(), 42);
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = random_map(8, 5, 6, &mut rng);
        let params = random_params(8, 4, &mut rng);
        let got = channel_attention(&phi, &params).unwrap();
        let want = channel_oracle(&phi, &params);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn spatial_attention_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = random_map(1, 9, 9, &mut rng);
        let mut kernel = Tensor::zeros(&[1, 2, 7, 7]);
        // Identity on the mean plane plus a small random max-plane filter.
        kernel.data_mut()[3 * 7 + 3] = 1.0;
        for v in &mut kernel.data_mut()[49..] {
            *v = rng.random_range(-0.2..0.2);
        }
        let params = AttentionParams::new(1, Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]), kernel.clone()).unwrap();
        let got = spatial_attention(&phi, &params).unwrap();
        let want = spatial_oracle(&phi, &kernel);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_attention_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi = random_map(8, 7, 5, &mut rng);
        let params = random_params(8, 2, &mut rng);
        let mc = channel_oracle(&phi, &params);
        let (h, w) = (7, 5);
        let refined =
            FeatureMap::new(8, h, w, (0..8 * h * w).map(|i| phi.data()[i] * mc[i / (h * w)]).collect()).unwrap();
        let ms = spatial_oracle(&refined, &params.spatial_kernel);
        let got = apply_attention(&phi, &params).unwrap();
        assert_eq!((got.channels(), got.height(), got.width()), (8, 7, 5));
        for i in 0..8 * h * w {
            let want = ms[i % (h * w)] * refined.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_attention_is_identity_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = random_map(4, 5, 5, &mut rng);
        // A large positive kernel centre on a positive map drives both maps to ≈1.
        let pos = FeatureMap::new(4, 5, 5, phi.data().iter().map(|v| v.abs() + 1.0).collect()).unwrap();
        let mut kernel = Tensor::zeros(&[1, 2, 7, 7]);
        kernel.data_mut()[3 * 7 + 3] = 1e3;
        let mut w1 = Tensor::zeros(&[4, 1]);
        w1.data_mut().fill(1e3);
        let mut w0 = Tensor::zeros(&[1, 4]);
        w0.data_mut().fill(1.0);
        let ones = AttentionParams::new(4, w0.clone(), w1.clone(), kernel.clone()).unwrap();
        let out = apply_attention(&pos, &ones).unwrap();
        assert_eq!(out.data(), pos.data());
        // Flipping the signs drives them to ≈0.
        w1.data_mut().fill(-1e3);
        kernel.data_mut()[3 * 7 + 3] = -1e3;
        let zeros = AttentionParams::new(4, w0, w1, kernel).unwrap();
        let out = apply_attention(&pos, &zeros).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn attention_rejects_inconsistent_shapes() {
        assert!(AttentionParams::zeros(6, 4).is_err());
        let params = AttentionParams::zeros(8, 4).unwrap();
        let phi = FeatureMap::new(4, 3, 3, vec![0.0; 36]).unwrap();
        assert!(channel_attention(&phi, &params).is_err());
        assert!(FeatureMap::new(0, 3, 3, vec![]).is_err());
    }

    #[test]
    fn reduction_rule() {
        assert_eq!(default_reduction(8), 4);
        assert_eq!(default_reduction(16), 8);
        let arch = Architecture::desk(1, 16).unwrap();
        assert_eq!(arch.reductions, vec![8, 8, 8]);
        assert!(Architecture::desk(1, 12).is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let arch = Architecture::desk(1, 16).unwrap();
        let model = EncoderModel::new(arch, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let a = model.encode(&img).unwrap();
        let b = model.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 32);
        assert!(a.mean().iter().chain(a.log_std()).all(|v| v.is_finite()));
        let wrong = Tensor::zeros(&[1, 8, 8]);
        assert!(model.encode(&wrong).is_err());
    }

    #[test]
    fn encode_is_locally_lipschitz() {
        let model = EncoderModel::new(Architecture::desk(1, 16).unwrap(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let base = model.encode(&img).unwrap();
        for pixel in [0, 37, 128, 255] {
            let mut bumped = img.clone();
            bumped.data_mut()[pixel] += 1e-6;
            let g = model.encode(&bumped).unwrap();
            let delta = base
                .mean()
                .iter()
                .zip(g.mean())
                .chain(base.log_std().iter().zip(g.log_std()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(delta <= 1e-2, "pixel {pixel}: {delta}");
        }
    }

    #[test]
    fn decode_range_and_shape() {
        let model = EncoderModel::new(Architecture::desk(3, 16).unwrap(), 3);
        let z: Vec<f64> = (0..32).map(|i| (i as f64 - 16.0) / 4.0).collect();
        let out = model.decode(&z, [3, 16, 16]).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(model.decode(&z, [3, 8, 8]).is_err());
        assert!(model.decode(&z[..4], [3, 16, 16]).is_err());
    }

    #[test]
    fn initial_log_std_bias() {
        let model = EncoderModel::new(Architecture::desk(1, 16).unwrap(), 4);
        let bias = model.params().iter().find(|p| p.name == "logstd_head.bias").unwrap();
        assert!(bias.value.data().iter().all(|&v| v == -1.0));
        assert_eq!(model.attention_params(1).unwrap().channels(), 32);
    }
}
