//! Definitional convolution. Strictly sequential, accumulates in f64 over
//! (channel, kernel row, kernel column) in that order; this loop is the
//! oracle every optimized path is checked against.

use crate::error::Result;
use crate::tensor::{Shape, Tensor};

use super::ConvSpec;

pub(super) fn conv2d(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Result<Tensor> {
    let in_shape = x.shape();
    let cg = spec.in_channels / spec.groups;
    let og = spec.out_channels / spec.groups;
    let k = spec.kernel;
    let (h, w) = (in_shape.height as isize, in_shape.width as isize);

    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..in_shape.batch {
        for o in 0..spec.out_channels {
            let g = o / og;
            let b = bias.map_or(0.0, |b| b[o]) as f64;
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                    let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let mut acc = 0.0f64;
                    for ci in 0..cg {
                        let c = g * cg + ci;
                        let plane = x.plane(n, c);
                        for m in 0..k {
                            let yy = y0 + (spec.rate * m) as isize;
                            if yy < 0 || yy >= h {
                                continue;
                            }
                            let row = yy as usize * in_shape.width;
                            for v in 0..k {
                                let xx = x0 + (spec.rate * v) as isize;
                                if xx < 0 || xx >= w {
                                    continue;
                                }
                                let wv = weights.at(o, ci, m, v);
                                acc += plane[row + xx as usize] as f64 * wv as f64;
                            }
                        }
                    }
                    data.push((acc + b) as f32);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}
