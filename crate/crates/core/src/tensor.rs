//! Dense 4-D tensors in batch/channel/row/column order.
//!
//! Every activation in the engine is a [`Tensor`]: a flat `Vec<f32>` with a
//! `(batch, channels, height, width)` shape, row-major in that axis order.
//! Tensors are immutable once constructed; operators return new tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape of a 4-D tensor, `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Shape {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense 4-D array of `f32` in `(batch, channel, row, column)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

/// Fill distribution for [`seeded_fill`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillDistribution {
    /// Uniform on `[-limit, limit)`.
    Uniform { limit: f32 },
    Constant { value: f32 },
}

impl Tensor {
    /// Wraps existing data. The data length must match the shape volume and
    /// every shape component must be at least 1.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if shape.batch == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::spec("tensor", format!("zero-sized shape {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                context: format!("tensor data for shape {shape}"),
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Tensor {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `height × width` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = self.index(n, c, 0, 0);
        let plane = self.shape.height * self.shape.width;
        &self.data[start..start + plane]
    }

    /// Extracts a contiguous channel range as a new tensor.
    pub fn channel_slice(&self, from: usize, to: usize) -> Result<Tensor> {
        if from >= to || to > self.shape.channels {
            return Err(Error::spec(
                "channel_slice",
                format!("range {from}..{to} invalid for {} channels", self.shape.channels),
            ));
        }
        let out_shape = Shape::new(self.shape.batch, to - from, self.shape.height, self.shape.width);
        let plane = self.shape.height * self.shape.width;
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..self.shape.batch {
            let start = self.index(n, from, 0, 0);
            data.extend_from_slice(&self.data[start..start + (to - from) * plane]);
        }
        Tensor::from_vec(out_shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenates tensors along the channel axis, in list order.
///
/// All inputs must share batch, height and width; input `i`'s channels occupy
/// the contiguous block right after all earlier inputs.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::spec("concat_channels", "empty input list"))?;
    let (b, h, w) = (first.shape.batch, first.shape.height, first.shape.width);
    let mut channels = 0usize;
    for (index, t) in inputs.iter().enumerate() {
        let s = t.shape;
        if s.batch != b || s.height != h || s.width != w {
            return Err(Error::ConcatMismatch {
                index,
                expected: format!("({b},*,{h},{w})"),
                got: s.to_string(),
            });
        }
        channels += s.channels;
    }
    let out_shape = Shape::new(b, channels, h, w);
    let plane = h * w;
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..b {
        for t in inputs {
            let start = t.index(n, 0, 0, 0);
            data.extend_from_slice(&t.data[start..start + t.shape.channels * plane]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Elementwise sum of two identically shaped tensors.
pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "elementwise_add",
            a.shape.to_string(),
            b.shape.to_string(),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_vec(a.shape, data)
}

/// Multiplies every `(h, w)` plane of channel `c` by `weights[c]`.
pub fn scale_channels(x: &Tensor, weights: &[f32]) -> Result<Tensor> {
    if weights.len() != x.shape.channels {
        return Err(Error::LengthMismatch {
            context: "scale_channels weights".into(),
            expected: x.shape.channels,
            got: weights.len(),
        });
    }
    let plane = x.shape.height * x.shape.width;
    let mut data = Vec::with_capacity(x.data.len());
    for n in 0..x.shape.batch {
        for (c, &w) in weights.iter().enumerate() {
            let start = x.index(n, c, 0, 0);
            data.extend(x.data[start..start + plane].iter().map(|v| v * w));
        }
    }
    Tensor::from_vec(x.shape, data)
}

/// Fills a flat buffer deterministically.
///
/// The generator is ChaCha8 keyed through `seed_from_u64`, drawing `f32`
/// values from `[0, 1)` and mapping them onto `[-limit, limit)`. The same
/// seed, length and distribution produce bit-identical buffers on every
/// platform.
pub fn fill_values(len: usize, seed: u64, dist: FillDistribution) -> Vec<f32> {
    match dist {
        FillDistribution::Constant { value } => vec![value; len],
        FillDistribution::Uniform { limit } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..len)
                .map(|_| {
                    let u: f32 = rng.gen();
                    limit * (2.0 * u - 1.0)
                })
                .collect()
        }
    }
}

/// Deterministic tensor fixture; see [`fill_values`] for the PRNG contract.
pub fn seeded_fill(shape: Shape, seed: u64, dist: FillDistribution) -> Tensor {
    Tensor {
        shape,
        data: fill_values(shape.len(), seed, dist),
    }
}
