//! Primitive neural operators.
//!
//! Convolution comes in two flavours: a definitional loop ([`naive`]) that
//! serves as the correctness oracle, and an im2col + blocked-GEMM path
//! ([`optimized`]) used for real inference. Both implement the same
//! contract: with zero padding,
//!
//! `out[n,o,i,j] = Σ_c Σ_m Σ_v x_pad[n,c, i·s + d·m, j·s + d·v] · W[o,c,m,v] + bias[o]`
//!
//! where `d` is the atrous rate; `d = 1` reduces to standard convolution and
//! `groups = in = out` gives depthwise convolution.

mod naive;
mod optimized;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Selects the convolution implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPath {
    /// Definitional triple loop, strictly sequential. The oracle.
    Naive,
    /// im2col + blocked matrix multiply with 1x1 and depthwise
    /// specializations; may parallelize but is deterministic.
    Optimized,
}

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// Square kernel side k.
    pub kernel: usize,
    /// Atrous rate d; taps are spaced d pixels apart.
    pub rate: usize,
    pub stride: usize,
    /// Symmetric zero padding per side.
    pub padding: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: usize,
        rate: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> ConvSpec {
        ConvSpec {
            kernel,
            rate,
            stride,
            padding,
            groups,
            in_channels,
            out_channels,
        }
    }

    /// Same-resolution padding for odd k at rate d: `d·(k-1)/2`.
    pub fn same(kernel: usize, rate: usize, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::new(
            kernel,
            rate,
            1,
            rate * (kernel - 1) / 2,
            1,
            in_channels,
            out_channels,
        )
    }

    pub fn depthwise(kernel: usize, rate: usize, stride: usize, channels: usize) -> ConvSpec {
        ConvSpec::new(
            kernel,
            rate,
            stride,
            rate * (kernel - 1) / 2,
            channels,
            channels,
            channels,
        )
    }

    /// Kernel extent once the rate is applied: `k + (k-1)(d-1)`.
    pub fn effective_kernel(&self) -> usize {
        (self.kernel - 1) * self.rate + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.rate == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::spec("conv", "kernel, rate, stride and groups must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::spec(
                "conv",
                format!(
                    "channels ({} in, {} out) not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output length along one spatial axis, `floor((in + 2p - eff)/s) + 1`.
    pub fn out_dim(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        let eff = self.effective_kernel();
        if padded < eff {
            return Err(Error::spec(
                "conv",
                format!("effective kernel {eff} exceeds padded input {padded}"),
            ));
        }
        Ok((padded - eff) / self.stride + 1)
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.batch,
            self.out_channels,
            self.out_dim(input.height)?,
            self.out_dim(input.width)?,
        ))
    }

    /// Expected weight tensor shape `[out, in/groups, k, k]`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }
}

/// Per-channel inference-time batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

/// Default batch-norm epsilon (the cited normalization layer's constant).
pub const BN_EPSILON: f32 = 1e-5;
/// Default negative slope for the leaky rectifier.
pub const LEAKY_SLOPE: f32 = 0.01;

impl BatchNormParams {
    pub fn identity(channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (label, len) in [
            ("gamma", self.gamma.len()),
            ("beta", self.beta.len()),
            ("mean", self.mean.len()),
            ("variance", self.variance.len()),
        ] {
            if len != channels {
                return Err(Error::LengthMismatch {
                    context: format!("batchnorm {label}"),
                    expected: channels,
                    got: len,
                });
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::spec("batchnorm", "epsilon must be positive"));
        }
        if self.variance.iter().any(|&v| v < 0.0) {
            return Err(Error::spec("batchnorm", "variance must be non-negative"));
        }
        Ok(())
    }
}

/// Elementwise nonlinearities used by the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Relu6,
    LeakyRelu(f32),
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// 2-D convolution over `x` with `weights[out, in/groups, k, k]`.
pub fn conv2d(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    path: KernelPath,
) -> Result<Tensor> {
    spec.validate()?;
    if x.shape().channels != spec.in_channels {
        return Err(Error::shape(
            "conv2d input",
            format!("{} channels", spec.in_channels),
            format!("{} channels", x.shape().channels),
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d weights",
            spec.weight_shape().to_string(),
            weights.shape().to_string(),
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::LengthMismatch {
                context: "conv2d bias".into(),
                expected: spec.out_channels,
                got: b.len(),
            });
        }
    }
    let out_shape = spec.out_shape(x.shape())?;
    match path {
        KernelPath::Naive => naive::conv2d(x, weights, bias, spec, out_shape),
        KernelPath::Optimized => optimized::conv2d(x, weights, bias, spec, out_shape),
    }
}

/// `out = γ·(x − μ)/sqrt(σ² + ε) + β`, per channel.
pub fn batchnorm_inference(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let shape = x.shape();
    p.validate(shape.channels)?;
    let plane = shape.height * shape.width;
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..shape.batch {
        for c in 0..shape.channels {
            let scale = p.gamma[c] / (p.variance[c] + p.epsilon).sqrt();
            let shift = p.beta[c] - p.mean[c] * scale;
            let start = x.index(n, c, 0, 0);
            data.extend(x.data()[start..start + plane].iter().map(|v| v * scale + shift));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Folds a batch normalization that immediately follows a convolution into
/// the convolution's weights and bias:
/// `w'[o,..] = w[o,..]·γ[o]/sqrt(σ²[o]+ε)`, `b'[o] = (b[o] − μ[o])·γ[o]/sqrt(σ²[o]+ε) + β[o]`.
pub fn fold_batchnorm(
    weights: &Tensor,
    bias: Option<&[f32]>,
    p: &BatchNormParams,
) -> Result<(Tensor, Vec<f32>)> {
    let out_channels = weights.shape().batch;
    p.validate(out_channels)?;
    let per_filter = weights.shape().len() / out_channels;
    let mut folded = Vec::with_capacity(weights.shape().len());
    let mut new_bias = Vec::with_capacity(out_channels);
    for o in 0..out_channels {
        let scale = p.gamma[o] / (p.variance[o] + p.epsilon).sqrt();
        let start = o * per_filter;
        folded.extend(weights.data()[start..start + per_filter].iter().map(|w| w * scale));
        let b = bias.map_or(0.0, |b| b[o]);
        new_bias.push((b - p.mean[o]) * scale + p.beta[o]);
    }
    Ok((Tensor::from_vec(weights.shape(), folded)?, new_bias))
}

/// Applies the nonlinearity elementwise.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let f: fn(f32, f32) -> f32 = match kind {
        Activation::Relu => |v, _| v.max(0.0),
        Activation::Relu6 => |v, _| v.max(0.0).min(6.0),
        Activation::LeakyRelu(_) => |v, s| if v > 0.0 { v } else { s * v },
        Activation::Sigmoid => |v, _| 1.0 / (1.0 + (-v).exp()),
    };
    let slope = match kind {
        Activation::LeakyRelu(s) => s,
        _ => 0.0,
    };
    let data = x.data().iter().map(|&v| f(v, slope)).collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

/// Window pooling. Average pooling divides by the number of in-bounds
/// elements, so zero padding never distorts the mean.
pub fn pool2d(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if kernel == 0 || stride == 0 {
        return Err(Error::spec("pool2d", "kernel and stride must be positive"));
    }
    let shape = x.shape();
    let spec = ConvSpec::new(kernel, 1, stride, padding, 1, 1, 1);
    let out_h = spec.out_dim(shape.height)?;
    let out_w = spec.out_dim(shape.width)?;
    let out_shape = Shape::new(shape.batch, shape.channels, out_h, out_w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..shape.batch {
        for c in 0..shape.channels {
            let plane = x.plane(n, c);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let y0 = (oy * stride) as isize - padding as isize;
                    let x0 = (ox * stride) as isize - padding as isize;
                    match kind {
                        PoolKind::Avg => {
                            let mut sum = 0.0f64;
                            let mut count = 0u32;
                            for ky in 0..kernel {
                                let yy = y0 + ky as isize;
                                if yy < 0 || yy >= shape.height as isize {
                                    continue;
                                }
                                let row = yy as usize * shape.width;
                                for kx in 0..kernel {
                                    let xx = x0 + kx as isize;
                                    if xx < 0 || xx >= shape.width as isize {
                                        continue;
                                    }
                                    sum += plane[row + xx as usize] as f64;
                                    count += 1;
                                }
                            }
                            data.push(if count == 0 { 0.0 } else { (sum / count as f64) as f32 });
                        }
                        PoolKind::Max => {
                            let mut best = f32::NEG_INFINITY;
                            for ky in 0..kernel {
                                let yy = y0 + ky as isize;
                                if yy < 0 || yy >= shape.height as isize {
                                    continue;
                                }
                                let row = yy as usize * shape.width;
                                for kx in 0..kernel {
                                    let xx = x0 + kx as isize;
                                    if xx < 0 || xx >= shape.width as isize {
                                        continue;
                                    }
                                    best = best.max(plane[row + xx as usize]);
                                }
                            }
                            data.push(if best == f32::NEG_INFINITY { 0.0 } else { best });
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Mean over all spatial positions, per channel; output is `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let plane = (shape.height * shape.width) as f64;
    let mut data = Vec::with_capacity(shape.batch * shape.channels);
    for n in 0..shape.batch {
        for c in 0..shape.channels {
            let sum: f64 = x.plane(n, c).iter().map(|&v| v as f64).sum();
            data.push((sum / plane) as f32);
        }
    }
    Tensor::from_vec(Shape::new(shape.batch, shape.channels, 1, 1), data).expect("shape")
}

/// Bilinear resize with half-pixel centers: the source coordinate of output
/// index `i` is `(i + 0.5)·(in/out) − 0.5`, clamped to the borders. Resizing
/// to the input size is an exact identity.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::spec("bilinear_resize", "output size must be positive"));
    }
    let shape = x.shape();
    let out_shape = Shape::new(shape.batch, shape.channels, out_h, out_w);

    let coords = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        let ratio = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| {
                let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(out_h, shape.height);
    let xs = coords(out_w, shape.width);

    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..shape.batch {
        for c in 0..shape.channels {
            let plane = x.plane(n, c);
            for &(y0, y1, fy) in &ys {
                let row0 = y0 * shape.width;
                let row1 = y1 * shape.width;
                for &(x0, x1, fx) in &xs {
                    let v00 = plane[row0 + x0];
                    let v01 = plane[row0 + x1];
                    let v10 = plane[row1 + x0];
                    let v11 = plane[row1 + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Fully-connected layer: `out = Wx + b` with `w` given row-major as
/// `outputs × inputs`.
pub fn linear(x: &[f32], w: &[f32], bias: &[f32], outputs: usize, inputs: usize) -> Result<Vec<f32>> {
    if x.len() != inputs {
        return Err(Error::LengthMismatch {
            context: "linear input".into(),
            expected: inputs,
            got: x.len(),
        });
    }
    if w.len() != outputs * inputs {
        return Err(Error::LengthMismatch {
            context: "linear weights".into(),
            expected: outputs * inputs,
            got: w.len(),
        });
    }
    if bias.len() != outputs {
        return Err(Error::LengthMismatch {
            context: "linear bias".into(),
            expected: outputs,
            got: bias.len(),
        });
    }
    Ok((0..outputs)
        .map(|o| {
            let row = &w[o * inputs..(o + 1) * inputs];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| *a as f64 * *b as f64).sum();
            (acc + bias[o] as f64) as f32
        })
        .collect())
}

/// Max absolute difference normalized by the largest magnitude in the
/// reference tensor. Used for all naive-vs-optimized comparisons.
pub fn max_rel_diff(got: &Tensor, reference: &Tensor) -> f32 {
    assert_eq!(got.shape(), reference.shape(), "comparing unlike tensors");
    let scale = reference
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(1e-12);
    got.data()
        .iter()
        .zip(reference.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

#[cfg(test)]
mod tests;
