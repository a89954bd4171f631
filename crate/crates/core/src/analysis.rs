//! Architecture analyzers: receptive fields, sampling-footprint probing,
//! atrous gridding coverage, parameter/MAC accounting and a wall-clock
//! profiler for the two kernel paths.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::LayerRecord;
use crate::kernels::{self, ConvSpec, KernelPath, PoolKind};
use crate::network::Network;
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

/// Default cap on probe input pixels (each pixel costs one forward pass).
pub const DEFAULT_PROBE_CAP: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOp {
    Conv,
    AvgPool,
    MaxPool,
}

/// One layer of a plain conv/pool chain, the unit the receptive-field
/// formula and the footprint probe operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackLayer {
    pub op: StackOp,
    pub kernel: usize,
    pub rate: usize,
    pub stride: usize,
    pub padding: usize,
}

impl StackLayer {
    pub fn conv(kernel: usize, rate: usize, stride: usize, padding: usize) -> StackLayer {
        StackLayer {
            op: StackOp::Conv,
            kernel,
            rate,
            stride,
            padding,
        }
    }

    pub fn max_pool(kernel: usize, stride: usize, padding: usize) -> StackLayer {
        StackLayer {
            op: StackOp::MaxPool,
            kernel,
            rate: 1,
            stride,
            padding,
        }
    }

    pub fn avg_pool(kernel: usize, stride: usize, padding: usize) -> StackLayer {
        StackLayer {
            op: StackOp::AvgPool,
            kernel,
            rate: 1,
            stride,
            padding,
        }
    }
}

/// Receptive field after each layer of a chain:
/// `RF_l = RF_{l-1} + (k_l - 1) · d_l · prod_{i<l} s_i`, starting at 1.
pub fn receptive_fields(stack: &[StackLayer]) -> Vec<u64> {
    let mut rf = 1u64;
    let mut jump = 1u64;
    stack
        .iter()
        .map(|l| {
            rf += (l.kernel as u64 - 1) * l.rate as u64 * jump;
            jump *= l.stride as u64;
            rf
        })
        .collect()
}

/// Exact dependency set of one output position, by composing tap offsets
/// backwards through the chain. Coordinates are input-pixel positions and
/// may be negative or out of bounds where padding lets taps hang over the
/// border.
pub fn analytic_footprint(stack: &[StackLayer], out_pos: (i64, i64)) -> BTreeSet<(i64, i64)> {
    let mut positions: BTreeSet<(i64, i64)> = BTreeSet::new();
    positions.insert(out_pos);
    for layer in stack.iter().rev() {
        let mut next = BTreeSet::new();
        for &(qy, qx) in &positions {
            let y0 = qy * layer.stride as i64 - layer.padding as i64;
            let x0 = qx * layer.stride as i64 - layer.padding as i64;
            for m in 0..layer.kernel as i64 {
                for v in 0..layer.kernel as i64 {
                    next.insert((y0 + layer.rate as i64 * m, x0 + layer.rate as i64 * v));
                }
            }
        }
        positions = next;
    }
    positions
}

/// Brute-force dependency set: perturbs each input pixel of a zero input
/// and records whether the output at `out_pos` changes, running the chain
/// with all-ones convolution weights (no normalization). The chain is
/// evaluated with the definitional kernel path.
pub fn footprint_probe(
    stack: &[StackLayer],
    input_hw: (usize, usize),
    out_pos: (usize, usize),
    cap: usize,
) -> Result<BTreeSet<(i64, i64)>> {
    let (h, w) = input_hw;
    if h * w > cap {
        return Err(Error::ProbeTooLarge { pixels: h * w, cap });
    }

    let eval = |x: &Tensor| -> Result<f32> {
        let mut cur = x.clone();
        for layer in stack {
            cur = match layer.op {
                StackOp::Conv => {
                    let spec = ConvSpec::new(layer.kernel, layer.rate, layer.stride, layer.padding, 1, 1, 1);
                    let ones = Tensor::filled(spec.weight_shape(), 1.0);
                    kernels::conv2d(&cur, &ones, None, &spec, KernelPath::Naive)?
                }
                StackOp::AvgPool => {
                    kernels::pool2d(&cur, PoolKind::Avg, layer.kernel, layer.stride, layer.padding)?
                }
                StackOp::MaxPool => {
                    kernels::pool2d(&cur, PoolKind::Max, layer.kernel, layer.stride, layer.padding)?
                }
            };
        }
        let shape = cur.shape();
        if out_pos.0 >= shape.height || out_pos.1 >= shape.width {
            return Err(Error::spec(
                "footprint_probe",
                format!(
                    "output position ({},{}) outside {}x{}",
                    out_pos.0, out_pos.1, shape.height, shape.width
                ),
            ));
        }
        Ok(cur.at(0, 0, out_pos.0, out_pos.1))
    };

    let baseline = eval(&Tensor::zeros(Shape::new(1, 1, h, w)))?;
    let mut touched = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let mut data = vec![0.0f32; h * w];
            data[y * w + x] = 1.0;
            let probe = Tensor::from_vec(Shape::new(1, 1, h, w), data)?;
            if eval(&probe)? != baseline {
                touched.insert((y as i64, x as i64));
            }
        }
    }
    Ok(touched)
}

/// Sampled-offset statistics of a same-padded rate stack: the number of
/// distinct input offsets touched and the total number of offsets inside
/// the stack's receptive field square.
pub fn gridding_counts(stack: &[(usize, usize)]) -> (u64, u64) {
    // Centered tap offsets of each layer, composed by Minkowski sum.
    let mut touched: BTreeSet<(i64, i64)> = BTreeSet::new();
    touched.insert((0, 0));
    let mut extent = 1u64;
    for &(k, d) in stack {
        assert!(k % 2 == 1, "gridding stacks use odd kernels");
        let half = (k as i64 - 1) / 2;
        let mut next = BTreeSet::new();
        for &(y, x) in &touched {
            for m in -half..=half {
                for v in -half..=half {
                    next.insert((y + d as i64 * m, x + d as i64 * v));
                }
            }
        }
        touched = next;
        extent += (k as u64 - 1) * d as u64;
    }
    (touched.len() as u64, extent * extent)
}

/// Fraction of the receptive field actually sampled by a stack of
/// `(kernel, rate)` layers; 1.0 means gap-free coverage.
pub fn gridding_coverage(stack: &[(usize, usize)]) -> f64 {
    let (touched, total) = gridding_counts(stack);
    touched as f64 / total as f64
}

/// Structural report over the whole network at one input size.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerRecord>,
    pub total_params: u64,
    /// Total convolution/linear multiply-accumulates.
    pub total_macs: u64,
    /// `2 x total_macs`: the FLOPs figure under the multiply+add convention.
    pub total_flops_2x: u64,
    /// Elementwise work (pool/activation/resize/norm/add), kept out of the
    /// MAC totals.
    pub total_aux_ops: u64,
}

impl AnalysisReport {
    /// Line-oriented table: name, kind, output shape, receptive field,
    /// params, MACs.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<44} {:<12} {:>16} {:>8} {:>12} {:>14}\n",
            "layer", "kind", "output", "rf", "params", "macs"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<44} {:<12} {:>16} {:>8} {:>12} {:>14}\n",
                l.name,
                l.kind,
                format!("{}x{}x{}", l.out_channels, l.out_height, l.out_width),
                l.rf,
                l.params,
                l.macs
            ));
        }
        out.push_str(&format!(
            "totals: params {} ({:.3}M)  macs {} ({:.3}G)  flops(2xmacs) {:.3}G  aux ops {:.3}G\n",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_macs,
            self.total_macs as f64 / 1e9,
            self.total_flops_2x as f64 / 1e9,
            self.total_aux_ops as f64 / 1e9,
        ));
        out
    }
}

/// Walks the graph at `height x width` and accumulates parameter and MAC
/// totals per layer. Parameters are independent of the input size; MACs
/// scale with it.
pub fn count_params_flops(net: &Network, height: usize, width: usize) -> Result<AnalysisReport> {
    let layers = net.layer_records(height, width)?;
    let total_params: u64 = layers.iter().map(|l| l.params).sum();
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    let total_aux_ops: u64 = layers.iter().map(|l| l.aux_ops).sum();
    Ok(AnalysisReport {
        input_height: height,
        input_width: width,
        layers,
        total_params,
        total_macs,
        total_flops_2x: 2 * total_macs,
        total_aux_ops,
    })
}

/// Wall-clock timings of repeated forward passes.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub path: String,
    pub repeats: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub runs_ms: Vec<f64>,
    /// Max relative difference against the other kernel path, when checked.
    pub agreement_rel: Option<f32>,
}

/// Times `repeats` forward passes after one excluded warm-up run. With
/// `check_agreement`, one pass of the other path is run and compared.
pub fn profile_forward(
    net: &Network,
    store: &WeightStore,
    input: &Tensor,
    repeats: usize,
    path: KernelPath,
    check_agreement: bool,
) -> Result<TimingReport> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!(
            "profiling needs at least 3 repeats, got {repeats}"
        )));
    }
    let mut reference = net.forward(store, input, path)?; // warm-up

    let mut runs_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        reference = net.forward(store, input, path)?;
        runs_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = runs_ms.iter().sum::<f64>() / repeats as f64;
    let var = runs_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
        / (repeats - 1).max(1) as f64;

    let agreement_rel = if check_agreement {
        let other = match path {
            KernelPath::Naive => KernelPath::Optimized,
            KernelPath::Optimized => KernelPath::Naive,
        };
        let alt = net.forward(store, input, other)?;
        Some(kernels::max_rel_diff(&alt, &reference))
    } else {
        None
    };

    Ok(TimingReport {
        path: match path {
            KernelPath::Naive => "naive".into(),
            KernelPath::Optimized => "optimized".into(),
        },
        repeats,
        threads: rayon::current_num_threads(),
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        runs_ms,
        agreement_rel,
    })
}
