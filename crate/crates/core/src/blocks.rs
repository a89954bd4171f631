//! Composite building blocks: inverted-residual bottleneck, channel
//! attention (CAM), ASPP, DASPP, the spatial detail branch (SPN) and the
//! feature fusion head (FFN).
//!
//! Each block is expressed as a graph fragment so the network assembler,
//! the analyzers and the standalone block functions below all share one
//! definition.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Node, NodeOp};
use crate::kernels::{Activation, ConvSpec, KernelPath, PoolKind, LEAKY_SLOPE};
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

/// One inverted-residual bottleneck row: expansion factor `t`, output
/// channels `c`, stride `s` and atrous rate `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub rate: usize,
}

impl BottleneckSpec {
    pub fn new(expansion: usize, out_channels: usize, stride: usize, rate: usize) -> BottleneckSpec {
        BottleneckSpec {
            expansion,
            out_channels,
            stride,
            rate,
        }
    }
}

/// How DASPP branch outputs are merged with the shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Concatenate the five branches, reduce with a 1x1 convolution, then
    /// add the input shortcut.
    ConcatShortcut,
    /// Elementwise sum of the branch outputs plus the input.
    Sum,
}

/// DASPP configuration: three pooled branches, a direct 1x1->3x3 branch and
/// an image-level branch, all at `branch_channels`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DasppConfig {
    pub pool_sizes: [usize; 3],
    pub rates: [usize; 3],
    pub branch_channels: usize,
    pub pool_kind: PoolKind,
    pub merge: MergeMode,
}

impl Default for DasppConfig {
    fn default() -> DasppConfig {
        DasppConfig {
            pool_sizes: [3, 5, 7],
            rates: [12, 24, 36],
            branch_channels: 128,
            pool_kind: PoolKind::Avg,
            merge: MergeMode::ConcatShortcut,
        }
    }
}

/// Accumulates nodes of a graph fragment.
#[derive(Debug, Default)]
pub struct Fragment {
    pub nodes: Vec<Node>,
}

impl Fragment {
    pub fn new() -> Fragment {
        Fragment::default()
    }

    fn push(&mut self, name: String, input: impl Into<String>, op: NodeOp) -> String {
        self.nodes.push(Node::new(name.clone(), input.into(), op));
        name
    }

    pub fn conv(&mut self, name: impl Into<String>, input: &str, spec: ConvSpec, bias: bool) -> String {
        self.push(name.into(), input, NodeOp::Conv { spec, bias })
    }

    pub fn bn(&mut self, name: impl Into<String>, input: &str) -> String {
        self.push(name.into(), input, NodeOp::BatchNorm)
    }

    pub fn act(&mut self, name: impl Into<String>, input: &str, kind: Activation) -> String {
        self.push(name.into(), input, NodeOp::Act(kind))
    }

    pub fn pool(
        &mut self,
        name: impl Into<String>,
        input: &str,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> String {
        self.push(name.into(), input, NodeOp::Pool { kind, kernel, stride, padding })
    }

    pub fn gap(&mut self, name: impl Into<String>, input: &str) -> String {
        self.push(name.into(), input, NodeOp::GlobalAvgPool)
    }

    pub fn resize_like(&mut self, name: impl Into<String>, input: &str, reference: &str) -> String {
        self.push(
            name.into(),
            input,
            NodeOp::ResizeLike { reference: reference.into() },
        )
    }

    pub fn linear(&mut self, name: impl Into<String>, input: &str, inputs: usize, outputs: usize) -> String {
        self.push(name.into(), input, NodeOp::Linear { inputs, outputs })
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: &[&str]) -> String {
        let name = name.into();
        self.nodes.push(Node {
            name: name.clone(),
            input: None,
            op: NodeOp::Concat {
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
            },
        });
        name
    }

    pub fn add(&mut self, name: impl Into<String>, inputs: &[&str]) -> String {
        let name = name.into();
        self.nodes.push(Node {
            name: name.clone(),
            input: None,
            op: NodeOp::Add {
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
            },
        });
        name
    }

    pub fn scale(&mut self, name: impl Into<String>, input: &str, gate: &str) -> String {
        self.push(name.into(), input, NodeOp::ScaleChannels { gate: gate.into() })
    }

    pub fn alias(&mut self, name: impl Into<String>, input: &str) -> String {
        self.push(name.into(), input, NodeOp::Identity)
    }

    /// conv -> BN -> optional activation under `{prefix}.{conv,bn,act}`.
    pub fn conv_bn_act(
        &mut self,
        prefix: &str,
        input: &str,
        spec: ConvSpec,
        act: Option<Activation>,
    ) -> String {
        let c = self.conv(format!("{prefix}.conv"), input, spec, false);
        let b = self.bn(format!("{prefix}.bn"), &c);
        match act {
            Some(kind) => self.act(format!("{prefix}.act"), &b, kind),
            None => b,
        }
    }
}

/// Appends one bottleneck unit. Expansion 1x1 (omitted when t = 1), a
/// depthwise 3x3 at the given stride and rate, and a linear 1x1 projection;
/// the identity shortcut is added when stride is 1 and channels match.
pub fn bottleneck(
    frag: &mut Fragment,
    prefix: &str,
    input: &str,
    in_channels: usize,
    spec: &BottleneckSpec,
) -> Result<(String, usize)> {
    if spec.stride != 1 && spec.stride != 2 {
        return Err(Error::spec(prefix, format!("stride {} not in {{1,2}}", spec.stride)));
    }
    let hidden = in_channels * spec.expansion;
    let mut cur = input.to_string();
    if spec.expansion != 1 {
        cur = frag.conv_bn_act(
            &format!("{prefix}.expand"),
            &cur,
            ConvSpec::new(1, 1, 1, 0, 1, in_channels, hidden),
            Some(Activation::Relu6),
        );
    }
    cur = frag.conv_bn_act(
        &format!("{prefix}.depthwise"),
        &cur,
        ConvSpec::depthwise(3, spec.rate, spec.stride, hidden),
        Some(Activation::Relu6),
    );
    cur = frag.conv_bn_act(
        &format!("{prefix}.project"),
        &cur,
        ConvSpec::new(1, 1, 1, 0, 1, hidden, spec.out_channels),
        None,
    );
    if spec.stride == 1 && in_channels == spec.out_channels {
        cur = frag.add(format!("{prefix}.add"), &[input, &cur]);
    }
    Ok((cur, spec.out_channels))
}

/// Channel attention: global average pooling, a reducing 1x1 convolution
/// with BN and LeakyReLU, a fully-connected layer back to full width, and a
/// sigmoid gate applied to the input channels.
pub fn cam(frag: &mut Fragment, prefix: &str, input: &str, channels: usize) -> String {
    let reduced = (channels / 4).max(8);
    let g = frag.gap(format!("{prefix}.gap"), input);
    let c = frag.conv(
        format!("{prefix}.reduce.conv"),
        &g,
        ConvSpec::new(1, 1, 1, 0, 1, channels, reduced),
        false,
    );
    let b = frag.bn(format!("{prefix}.reduce.bn"), &c);
    let a = frag.act(
        format!("{prefix}.reduce.act"),
        &b,
        Activation::LeakyRelu(LEAKY_SLOPE),
    );
    let fc = frag.linear(format!("{prefix}.fc"), &a, reduced, channels);
    let gate = frag.act(format!("{prefix}.gate"), &fc, Activation::Sigmoid);
    frag.scale(format!("{prefix}.scale"), input, &gate)
}

/// Plain spatial pyramid: a 1x1 branch and three 3x3 atrous branches whose
/// outputs are concatenated in that order. Branches are bare convolutions
/// with bias, so the block is linear in its input.
pub fn aspp(
    frag: &mut Fragment,
    prefix: &str,
    input: &str,
    in_channels: usize,
    branch_channels: usize,
    rates: [usize; 3],
) -> String {
    let point = frag.conv(
        format!("{prefix}.point.conv"),
        input,
        ConvSpec::new(1, 1, 1, 0, 1, in_channels, branch_channels),
        true,
    );
    let mut branches = vec![point];
    for (i, r) in rates.into_iter().enumerate() {
        branches.push(frag.conv(
            format!("{prefix}.atrous{i}.conv"),
            input,
            ConvSpec::same(3, r, in_channels, branch_channels),
            true,
        ));
    }
    let refs: Vec<&str> = branches.iter().map(|s| s.as_str()).collect();
    frag.concat(format!("{prefix}.concat"), &refs)
}

/// DASPP: an image-level branch, three pooled atrous branches and a direct
/// 1x1->3x3 branch, merged per [`MergeMode`] with the input shortcut.
pub fn daspp(frag: &mut Fragment, prefix: &str, input: &str, cfg: &DasppConfig) -> String {
    let ch = cfg.branch_channels;
    let point = ConvSpec::new(1, 1, 1, 0, 1, ch, ch);

    // Image-level branch: global context broadcast back to full resolution.
    let g = frag.gap(format!("{prefix}.image.gap"), input);
    let img = frag.conv_bn_act(&format!("{prefix}.image"), &g, point, Some(Activation::Relu));
    let img = frag.resize_like(format!("{prefix}.image.resize"), &img, input);

    let mut branches = vec![img];
    for (&p, &r) in cfg.pool_sizes.iter().zip(cfg.rates.iter()) {
        let pooled = frag.pool(
            format!("{prefix}.pool{p}.pool"),
            input,
            cfg.pool_kind,
            p,
            1,
            (p - 1) / 2,
        );
        branches.push(frag.conv_bn_act(
            &format!("{prefix}.pool{p}"),
            &pooled,
            ConvSpec::same(3, r, ch, ch),
            Some(Activation::Relu),
        ));
    }

    let d1 = frag.conv(format!("{prefix}.direct.conv1"), input, point, false);
    let d1 = frag.bn(format!("{prefix}.direct.bn1"), &d1);
    let d1 = frag.act(format!("{prefix}.direct.act1"), &d1, Activation::Relu);
    let d2 = frag.conv(format!("{prefix}.direct.conv2"), &d1, ConvSpec::same(3, 1, ch, ch), false);
    let d2 = frag.bn(format!("{prefix}.direct.bn2"), &d2);
    let d2 = frag.act(format!("{prefix}.direct.act2"), &d2, Activation::Relu);
    branches.push(d2);

    match cfg.merge {
        MergeMode::ConcatShortcut => {
            let refs: Vec<&str> = branches.iter().map(|s| s.as_str()).collect();
            let cat = frag.concat(format!("{prefix}.concat"), &refs);
            let merged = frag.conv(
                format!("{prefix}.merge.conv"),
                &cat,
                ConvSpec::new(1, 1, 1, 0, 1, 5 * ch, ch),
                true,
            );
            frag.add(format!("{prefix}.out"), &[&merged, input])
        }
        MergeMode::Sum => {
            let mut refs: Vec<&str> = branches.iter().map(|s| s.as_str()).collect();
            refs.push(input);
            frag.add(format!("{prefix}.out"), &refs)
        }
    }
}

/// Spatial stem: 7x7/2 convolution, 3x3/2 max pooling, then two residual
/// basic blocks at 64 channels. Returns the 1/4-resolution feature map.
pub fn spn_stem(frag: &mut Fragment, prefix: &str, image: &str) -> String {
    let mut cur = frag.conv_bn_act(
        &format!("{prefix}.stem"),
        image,
        ConvSpec::new(7, 1, 2, 3, 1, 3, 64),
        Some(Activation::Relu),
    );
    cur = frag.pool(format!("{prefix}.stem.pool"), &cur, PoolKind::Max, 3, 2, 1);
    for i in 0..2 {
        let block = format!("{prefix}.layer1.block{i}");
        let shortcut = cur.clone();
        let c1 = frag.conv_bn_act(
            &format!("{block}.a"),
            &cur,
            ConvSpec::same(3, 1, 64, 64),
            Some(Activation::Relu),
        );
        let c2 = frag.conv(format!("{block}.b.conv"), &c1, ConvSpec::same(3, 1, 64, 64), false);
        let c2 = frag.bn(format!("{block}.b.bn"), &c2);
        let sum = frag.add(format!("{block}.add"), &[&shortcut, &c2]);
        cur = frag.act(format!("{block}.act"), &sum, Activation::Relu);
    }
    cur
}

/// Fusion head: upsample the semantic features x2, concatenate with the
/// spatial features (216 channels), BN, a 3x3 rate-2 atrous mix, BN, a 1x1
/// projection to class logits, and a final resize to `full_ref`'s size.
pub fn ffn(
    frag: &mut Fragment,
    prefix: &str,
    semantic: &str,
    spatial: &str,
    full_ref: &str,
    semantic_channels: usize,
    spatial_channels: usize,
    num_classes: usize,
) -> String {
    let fused_ch = semantic_channels + spatial_channels;
    let up = frag.resize_like(format!("{prefix}.upsample"), semantic, spatial);
    let cat = frag.concat(format!("{prefix}.concat"), &[&up, spatial]);
    let norm = frag.bn(format!("{prefix}.norm"), &cat);
    let fuse = frag.conv(
        format!("{prefix}.fuse.conv"),
        &norm,
        ConvSpec::same(3, 2, fused_ch, fused_ch),
        false,
    );
    let fuse = frag.bn(format!("{prefix}.fuse.bn"), &fuse);
    let logits = frag.conv(
        format!("{prefix}.classify.conv"),
        &fuse,
        ConvSpec::new(1, 1, 1, 0, 1, fused_ch, num_classes),
        true,
    );
    frag.resize_like(format!("{prefix}.logits"), &logits, full_ref)
}

/// Ablation fusion: both branches are projected to `num_classes` with 1x1
/// convolutions and added (the semantic branch upsampled x2 first).
/// Experimental; channel alignment is not part of the reference design.
pub fn add_fusion(
    frag: &mut Fragment,
    prefix: &str,
    semantic: &str,
    spatial: &str,
    full_ref: &str,
    semantic_channels: usize,
    spatial_channels: usize,
    num_classes: usize,
) -> String {
    let up = frag.resize_like(format!("{prefix}.upsample"), semantic, spatial);
    let sem = frag.conv(
        format!("{prefix}.semantic.conv"),
        &up,
        ConvSpec::new(1, 1, 1, 0, 1, semantic_channels, num_classes),
        true,
    );
    let spa = frag.conv(
        format!("{prefix}.spatial.conv"),
        spatial,
        ConvSpec::new(1, 1, 1, 0, 1, spatial_channels, num_classes),
        true,
    );
    let sum = frag.add(format!("{prefix}.sum"), &[&sem, &spa]);
    frag.resize_like(format!("{prefix}.logits"), &sum, full_ref)
}

/// Runs a fragment on explicit inputs and returns the named output value.
pub fn run_fragment(
    nodes: &[Node],
    inputs: Vec<(&str, Tensor)>,
    store: &WeightStore,
    path: KernelPath,
    output: &str,
) -> Result<Tensor> {
    let mut env: HashMap<String, Arc<Tensor>> = inputs
        .into_iter()
        .map(|(n, t)| (n.to_string(), Arc::new(t)))
        .collect();
    let out_name = output.to_string();
    crate::graph::run_nodes(nodes, &mut env, store, path, &|name| name == out_name)?;
    let out = env
        .remove(output)
        .ok_or_else(|| Error::spec("run_fragment", format!("output `{output}` not produced")))?;
    Ok(Arc::try_unwrap(out).unwrap_or_else(|arc| (*arc).clone()))
}

/// Standalone bottleneck application (see [`bottleneck`] for the layout).
pub fn run_bottleneck(
    x: &Tensor,
    store: &WeightStore,
    prefix: &str,
    spec: &BottleneckSpec,
    path: KernelPath,
) -> Result<Tensor> {
    let mut frag = Fragment::new();
    let (out, _) = bottleneck(&mut frag, prefix, "x", x.shape().channels, spec)?;
    run_fragment(&frag.nodes, vec![("x", x.clone())], store, path, &out)
}

/// Standalone channel attention application.
pub fn run_cam(x: &Tensor, store: &WeightStore, prefix: &str, path: KernelPath) -> Result<Tensor> {
    let mut frag = Fragment::new();
    let out = cam(&mut frag, prefix, "x", x.shape().channels);
    run_fragment(&frag.nodes, vec![("x", x.clone())], store, path, &out)
}

/// Standalone ASPP application with the configurable rate triple.
pub fn run_aspp(
    x: &Tensor,
    store: &WeightStore,
    prefix: &str,
    rates: [usize; 3],
    branch_channels: usize,
    path: KernelPath,
) -> Result<Tensor> {
    let mut frag = Fragment::new();
    let out = aspp(&mut frag, prefix, "x", x.shape().channels, branch_channels, rates);
    run_fragment(&frag.nodes, vec![("x", x.clone())], store, path, &out)
}

/// Standalone DASPP application. The input must already carry
/// `cfg.branch_channels` channels.
pub fn run_daspp(
    x: &Tensor,
    store: &WeightStore,
    prefix: &str,
    cfg: &DasppConfig,
    path: KernelPath,
) -> Result<Tensor> {
    if x.shape().channels != cfg.branch_channels {
        return Err(Error::shape(
            prefix,
            format!("{} channels", cfg.branch_channels),
            format!("{} channels", x.shape().channels),
        ));
    }
    let mut frag = Fragment::new();
    let out = daspp(&mut frag, prefix, "x", cfg);
    run_fragment(&frag.nodes, vec![("x", x.clone())], store, path, &out)
}

/// Standalone SPN: the stem over the image concatenated with the 1/4
/// resolution backbone features (24 channels), yielding 88 channels.
pub fn run_spn(
    image: &Tensor,
    block2_features: &Tensor,
    store: &WeightStore,
    prefix: &str,
    path: KernelPath,
) -> Result<Tensor> {
    let (h, w) = image.shape().spatial();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::spec(prefix, format!("input {h}x{w} not divisible by 4")));
    }
    let (bh, bw) = block2_features.shape().spatial();
    if (bh, bw) != (h / 4, w / 4) {
        return Err(Error::shape(
            prefix,
            format!("{}x{} features", h / 4, w / 4),
            format!("{bh}x{bw}"),
        ));
    }
    let mut frag = Fragment::new();
    let stem = spn_stem(&mut frag, prefix, "image");
    let out = frag.concat(format!("{prefix}.concat"), &[&stem, "block2"]);
    run_fragment(
        &frag.nodes,
        vec![("image", image.clone()), ("block2", block2_features.clone())],
        store,
        path,
        &out,
    )
}

/// Standalone FFN. `semantic` must be 128 channels at exactly half the
/// spatial size of the 88-channel `spatial` input; logits come back at 4x
/// the spatial input size.
pub fn run_ffn(
    semantic: &Tensor,
    spatial: &Tensor,
    store: &WeightStore,
    prefix: &str,
    num_classes: usize,
    path: KernelPath,
) -> Result<Tensor> {
    if semantic.shape().channels != 128 || spatial.shape().channels != 88 {
        return Err(Error::shape(
            prefix,
            "(*,128,h,w) semantic and (*,88,2h,2w) spatial",
            format!("{} and {}", semantic.shape(), spatial.shape()),
        ));
    }
    let (sh, sw) = semantic.shape().spatial();
    let (ph, pw) = spatial.shape().spatial();
    if ph != 2 * sh || pw != 2 * sw {
        return Err(Error::shape(
            prefix,
            format!("spatial branch at {}x{}", 2 * sh, 2 * sw),
            format!("{ph}x{pw}"),
        ));
    }
    let mut frag = Fragment::new();
    let out = ffn(&mut frag, prefix, "semantic", "spatial", "full", 128, 88, num_classes);
    run_fragment(
        &frag.nodes,
        vec![
            ("semantic", semantic.clone()),
            ("spatial", spatial.clone()),
            ("full", Tensor::zeros(Shape::new(semantic.shape().batch, 1, ph * 4, pw * 4))),
        ],
        store,
        path,
        &out,
    )
}
