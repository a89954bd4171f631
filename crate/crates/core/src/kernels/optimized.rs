//! im2col + blocked GEMM convolution with two fast paths: 1x1 convolutions
//! multiply the input matrix directly, and depthwise convolutions use a
//! per-channel direct loop. Output pixels are processed in fixed-size column
//! blocks to bound the im2col buffer; every output element is produced by a
//! fixed operation order, so results are bit-identical across runs and
//! thread counts.

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::{Shape, Tensor};

use super::ConvSpec;

/// Output pixels unfolded per im2col block.
const COL_BLOCK: usize = 4096;
/// Depth-tile for the GEMM p loop.
const K_TILE: usize = 256;
/// Work below this many multiply-adds stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 20;

pub(super) fn conv2d(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Result<Tensor> {
    if spec.groups == spec.in_channels && spec.groups == spec.out_channels {
        return depthwise(x, weights, bias, spec, out_shape);
    }
    im2col_gemm(x, weights, bias, spec, out_shape)
}

fn depthwise(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Result<Tensor> {
    let in_shape = x.shape();
    let k = spec.kernel;
    let (h, w) = (in_shape.height as isize, in_shape.width as isize);
    let out_plane = out_shape.height * out_shape.width;

    let mut data = vec![0.0f32; out_shape.len()];
    let channels = spec.out_channels;
    data.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(chunk, out)| {
            let n = chunk / channels;
            let c = chunk % channels;
            let plane = x.plane(n, c);
            let taps: Vec<f32> = (0..k * k).map(|i| weights.data()[c * k * k + i]).collect();
            let b = bias.map_or(0.0, |b| b[c]);
            let mut idx = 0;
            for oy in 0..out_shape.height {
                let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                for ox in 0..out_shape.width {
                    let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let mut acc = 0.0f32;
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
                            acc += plane[row + xx as usize] * taps[m * k + v];
                        }
                    }
                    out[idx] = acc + b;
                    idx += 1;
                }
            }
        });
    Tensor::from_vec(out_shape, data)
}

fn im2col_gemm(
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
    let kk = cg * k * k;
    let out_plane = out_shape.height * out_shape.width;
    let pointwise = k == 1 && spec.stride == 1 && spec.padding == 0;

    let mut data = vec![0.0f32; out_shape.len()];
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; kk * COL_BLOCK.min(out_plane)] };

    for n in 0..in_shape.batch {
        for g in 0..spec.groups {
            let w_group = &weights.data()[g * og * kk..(g + 1) * og * kk];
            let bias_group = bias.map(|b| &b[g * og..(g + 1) * og]);
            if pointwise {
                // 1x1 stride-1 unpadded: the input channel block already is
                // the column matrix (cg x H·W).
                let src = x.index(n, g * cg, 0, 0);
                let b_mat = &x.data()[src..src + cg * out_plane];
                let dst = ((n * spec.groups + g) * og) * out_plane;
                gemm(
                    w_group,
                    b_mat,
                    &mut data[dst..dst + og * out_plane],
                    og,
                    kk,
                    out_plane,
                    bias_group,
                );
                continue;
            }
            let mut start = 0;
            while start < out_plane {
                let block = COL_BLOCK.min(out_plane - start);
                unfold_block(x, spec, out_shape, n, g * cg, cg, start, block, &mut col);
                let dst_row = ((n * spec.groups + g) * og) * out_plane;
                gemm_strided(
                    w_group,
                    &col,
                    &mut data[dst_row..],
                    og,
                    kk,
                    block,
                    out_plane,
                    start,
                    bias_group,
                );
                start += block;
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Unfolds `block` output pixels starting at flat position `start` into a
/// `(cg·k·k) x block` column matrix. Out-of-bounds taps become zeros.
#[allow(clippy::too_many_arguments)]
fn unfold_block(
    x: &Tensor,
    spec: &ConvSpec,
    out_shape: Shape,
    n: usize,
    c0: usize,
    cg: usize,
    start: usize,
    block: usize,
    col: &mut [f32],
) {
    let in_shape = x.shape();
    let k = spec.kernel;
    let (h, w) = (in_shape.height as isize, in_shape.width as isize);
    for ci in 0..cg {
        let plane = x.plane(n, c0 + ci);
        for m in 0..k {
            for v in 0..k {
                let row = ((ci * k + m) * k + v) * block;
                let dst = &mut col[row..row + block];
                for (i, slot) in dst.iter_mut().enumerate() {
                    let p = start + i;
                    let oy = p / out_shape.width;
                    let ox = p % out_shape.width;
                    let yy = (oy * spec.stride) as isize - spec.padding as isize
                        + (spec.rate * m) as isize;
                    let xx = (ox * spec.stride) as isize - spec.padding as isize
                        + (spec.rate * v) as isize;
                    *slot = if yy < 0 || yy >= h || xx < 0 || xx >= w {
                        0.0
                    } else {
                        plane[yy as usize * in_shape.width + xx as usize]
                    };
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] · b[k x n] (+ bias per row)`, contiguous rows.
fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, bias: Option<&[f32]>) {
    gemm_strided(a, b, c, m, k, n, n, 0, bias)
}

/// GEMM writing into rows of stride `row_stride` at column offset `col0`.
/// The p loop is tiled; each output row accumulates in a fixed order, so the
/// result does not depend on how rows are distributed over threads.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    row_stride: usize,
    col0: usize,
    bias: Option<&[f32]>,
) {
    let run = |rows: std::ops::Range<usize>, c_rows: &mut [f32]| {
        for (ri, i) in rows.enumerate() {
            let out = &mut c_rows[ri * row_stride + col0..ri * row_stride + col0 + n];
            out.fill(bias.map_or(0.0, |b| b[i]));
            let a_row = &a[i * k..(i + 1) * k];
            let mut p0 = 0;
            while p0 < k {
                let p_end = (p0 + K_TILE).min(k);
                for p in p0..p_end {
                    let av = a_row[p];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (o, bv) in out.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
                p0 = p_end;
            }
        }
    };

    if m * n * k < PAR_THRESHOLD || rayon::current_num_threads() == 1 {
        run(0..m, c);
        return;
    }
    let threads = rayon::current_num_threads();
    let rows_per = m.div_ceil(threads * 2).max(1);
    c.par_chunks_mut(rows_per * row_stride)
        .enumerate()
        .for_each(|(chunk, c_rows)| {
            let lo = chunk * rows_per;
            let hi = (lo + rows_per).min(m);
            if lo < hi {
                run(lo..hi, c_rows);
            }
        });
}
