//! Flat layer-graph representation.
//!
//! The network is a list of named [`Node`]s in topological order. The same
//! node list drives three things: the forward interpreter ([`run_nodes`]),
//! the parameter manifest ([`collect_params`]), and the structural walker
//! ([`walk`]) used by the analyzers for shapes, receptive fields and
//! params/MACs accounting. Keeping one definition for all three is what
//! guarantees the analyzer never drifts from what forward actually runs.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{
    self, Activation, BatchNormParams, ConvSpec, KernelPath, PoolKind,
};
use crate::tensor::{concat_channels, elementwise_add, Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Conv { spec: ConvSpec, bias: bool },
    BatchNorm,
    Act(Activation),
    Pool { kind: PoolKind, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    /// Bilinear resize to the spatial size of another value.
    ResizeLike { reference: String },
    /// Fully-connected layer applied to a `(n, in, 1, 1)` value.
    Linear { inputs: usize, outputs: usize },
    Concat { inputs: Vec<String> },
    Add { inputs: Vec<String> },
    /// Per-channel gating: multiplies the input by a `(n, c, 1, 1)` gate.
    ScaleChannels { gate: String },
    /// Aliases a value under a new (tap) name.
    Identity,
}

/// One layer: `name` is both the canonical layer path and the name of the
/// value it produces. Parameters live in the weight store under
/// `{name}.weight`, `{name}.gamma`, ...
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub input: Option<String>,
    pub op: NodeOp,
}

impl Node {
    pub fn new(name: impl Into<String>, input: impl Into<String>, op: NodeOp) -> Node {
        Node {
            name: name.into(),
            input: Some(input.into()),
            op,
        }
    }

    /// Names of all values this node reads.
    pub fn inputs(&self) -> Vec<&str> {
        match &self.op {
            NodeOp::Concat { inputs } | NodeOp::Add { inputs } => {
                inputs.iter().map(|s| s.as_str()).collect()
            }
            NodeOp::ScaleChannels { gate } => {
                let mut v: Vec<&str> = self.input.iter().map(|s| s.as_str()).collect();
                v.push(gate.as_str());
                v
            }
            NodeOp::ResizeLike { reference } => {
                let mut v: Vec<&str> = self.input.iter().map(|s| s.as_str()).collect();
                v.push(reference.as_str());
                v
            }
            _ => self.input.iter().map(|s| s.as_str()).collect(),
        }
    }

    /// Parameter entries this node expects in the store, given its input
    /// channel count: `(suffix, dims)`.
    pub fn param_specs(&self, in_channels: usize) -> Vec<(String, Vec<usize>)> {
        match &self.op {
            NodeOp::Conv { spec, bias } => {
                let w = spec.weight_shape();
                let mut v = vec![(
                    format!("{}.weight", self.name),
                    vec![w.batch, w.channels, w.height, w.width],
                )];
                if *bias {
                    v.push((format!("{}.bias", self.name), vec![spec.out_channels]));
                }
                v
            }
            NodeOp::BatchNorm => ["gamma", "beta", "mean", "var"]
                .iter()
                .map(|s| (format!("{}.{s}", self.name), vec![in_channels]))
                .collect(),
            NodeOp::Linear { inputs, outputs } => vec![
                (format!("{}.weight", self.name), vec![*outputs, *inputs]),
                (format!("{}.bias", self.name), vec![*outputs]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Value metadata tracked by the structural walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueMeta {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Receptive field in input pixels along one axis.
    pub rf: u64,
    /// Distance in input pixels between adjacent output positions
    /// (the product of strides so far).
    pub jump: u64,
}

impl ValueMeta {
    pub fn source(channels: usize, height: usize, width: usize) -> ValueMeta {
        ValueMeta {
            channels,
            height,
            width,
            rf: 1,
            jump: 1,
        }
    }
}

/// Per-layer analysis record emitted by [`walk`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// Receptive field (one axis) in input pixels.
    pub rf: u64,
    /// Learnable parameters (batch-norm counts gamma and beta only).
    pub params: u64,
    /// Multiply-accumulates of convolution/linear work.
    pub macs: u64,
    /// Auxiliary elementwise work (pool/activation/resize/norm/add),
    /// reported separately from MACs.
    pub aux_ops: u64,
}

/// Walks nodes, propagating shapes and receptive fields and emitting one
/// [`LayerRecord`] per parameterized or compute-bearing node. The callback
/// also receives the node's input channel count (0 for multi-input nodes).
pub fn walk(
    nodes: &[Node],
    seeds: &HashMap<String, ValueMeta>,
    mut on_layer: impl FnMut(&Node, usize, LayerRecord),
) -> Result<HashMap<String, ValueMeta>> {
    let mut meta = seeds.clone();
    let fetch = |meta: &HashMap<String, ValueMeta>, name: &str| -> Result<ValueMeta> {
        meta.get(name).copied().ok_or_else(|| {
            Error::spec("graph walk", format!("value `{name}` not yet produced"))
        })
    };

    for node in nodes {
        let ctx = node.name.as_str();
        let input = match &node.input {
            Some(name) => Some(fetch(&meta, name)?),
            None => None,
        };
        let need = |v: &Option<ValueMeta>| -> Result<ValueMeta> {
            v.ok_or_else(|| Error::spec(ctx, "node is missing its input"))
        };

        let (out, kind, params, macs, aux): (ValueMeta, &str, u64, u64, u64) = match &node.op {
            NodeOp::Conv { spec, bias } => {
                let m = need(&input)?;
                if m.channels != spec.in_channels {
                    return Err(Error::shape(
                        ctx,
                        format!("{} channels", spec.in_channels),
                        format!("{} channels", m.channels),
                    ));
                }
                let oh = spec.out_dim(m.height).map_err(|_| {
                    Error::spec(ctx, format!("non-positive output for input {}x{}", m.height, m.width))
                })?;
                let ow = spec.out_dim(m.width).map_err(|_| {
                    Error::spec(ctx, format!("non-positive output for input {}x{}", m.height, m.width))
                })?;
                let out = ValueMeta {
                    channels: spec.out_channels,
                    height: oh,
                    width: ow,
                    rf: m.rf + ((spec.kernel - 1) * spec.rate) as u64 * m.jump,
                    jump: m.jump * spec.stride as u64,
                };
                let w = spec.weight_shape();
                let params = w.len() as u64 + if *bias { spec.out_channels as u64 } else { 0 };
                let macs = (oh * ow * spec.out_channels) as u64
                    * (spec.kernel * spec.kernel * spec.in_channels / spec.groups) as u64;
                (out, "conv", params, macs, 0)
            }
            NodeOp::BatchNorm => {
                let m = need(&input)?;
                let elems = (m.channels * m.height * m.width) as u64;
                (m, "batchnorm", 2 * m.channels as u64, 0, 2 * elems)
            }
            NodeOp::Act(_) => {
                let m = need(&input)?;
                let elems = (m.channels * m.height * m.width) as u64;
                (m, "activation", 0, 0, elems)
            }
            NodeOp::Pool { kernel, stride, padding, .. } => {
                let m = need(&input)?;
                let spec = ConvSpec::new(*kernel, 1, *stride, *padding, 1, 1, 1);
                let oh = spec
                    .out_dim(m.height)
                    .map_err(|_| Error::spec(ctx, "non-positive pool output"))?;
                let ow = spec
                    .out_dim(m.width)
                    .map_err(|_| Error::spec(ctx, "non-positive pool output"))?;
                let out = ValueMeta {
                    channels: m.channels,
                    height: oh,
                    width: ow,
                    rf: m.rf + (*kernel as u64 - 1) * m.jump,
                    jump: m.jump * *stride as u64,
                };
                (out, "pool", 0, 0, (m.channels * oh * ow) as u64)
            }
            NodeOp::GlobalAvgPool => {
                let m = need(&input)?;
                let out = ValueMeta {
                    channels: m.channels,
                    height: 1,
                    width: 1,
                    rf: m.rf + (m.height.max(m.width) as u64 - 1) * m.jump,
                    jump: m.jump * m.height.max(m.width) as u64,
                };
                (out, "global_avg_pool", 0, 0, m.channels as u64)
            }
            NodeOp::ResizeLike { reference } => {
                let m = need(&input)?;
                let r = fetch(&meta, reference)?;
                let scale = (m.jump as f64 * m.height as f64 / r.height as f64).max(1.0) as u64;
                let out = ValueMeta {
                    channels: m.channels,
                    height: r.height,
                    width: r.width,
                    rf: m.rf,
                    jump: scale.max(1),
                };
                // 4 multiplies + 3 adds per output element.
                (out, "bilinear", 0, 0, 7 * (m.channels * r.height * r.width) as u64)
            }
            NodeOp::Linear { inputs, outputs } => {
                let m = need(&input)?;
                if m.channels != *inputs || m.height != 1 || m.width != 1 {
                    return Err(Error::shape(
                        ctx,
                        format!("({inputs},1,1)"),
                        format!("({},{},{})", m.channels, m.height, m.width),
                    ));
                }
                let out = ValueMeta { channels: *outputs, ..m };
                (
                    out,
                    "linear",
                    (*outputs * *inputs + *outputs) as u64,
                    (*outputs * *inputs) as u64,
                    0,
                )
            }
            NodeOp::Concat { inputs } => {
                let metas: Vec<ValueMeta> = inputs
                    .iter()
                    .map(|n| fetch(&meta, n))
                    .collect::<Result<_>>()?;
                let first = metas[0];
                for (i, m) in metas.iter().enumerate() {
                    if (m.height, m.width) != (first.height, first.width) {
                        return Err(Error::ConcatMismatch {
                            index: i,
                            expected: format!("{}x{}", first.height, first.width),
                            got: format!("{}x{}", m.height, m.width),
                        });
                    }
                }
                let out = ValueMeta {
                    channels: metas.iter().map(|m| m.channels).sum(),
                    height: first.height,
                    width: first.width,
                    rf: metas.iter().map(|m| m.rf).max().unwrap(),
                    jump: first.jump,
                };
                (out, "concat", 0, 0, 0)
            }
            NodeOp::Add { inputs } => {
                let metas: Vec<ValueMeta> = inputs
                    .iter()
                    .map(|n| fetch(&meta, n))
                    .collect::<Result<_>>()?;
                let first = metas[0];
                for m in &metas {
                    if (m.channels, m.height, m.width) != (first.channels, first.height, first.width) {
                        return Err(Error::shape(
                            ctx,
                            format!("({},{},{})", first.channels, first.height, first.width),
                            format!("({},{},{})", m.channels, m.height, m.width),
                        ));
                    }
                }
                let out = ValueMeta {
                    rf: metas.iter().map(|m| m.rf).max().unwrap(),
                    ..first
                };
                let elems = (first.channels * first.height * first.width) as u64;
                (out, "add", 0, 0, elems * (inputs.len() as u64 - 1))
            }
            NodeOp::ScaleChannels { gate } => {
                let m = need(&input)?;
                let g = fetch(&meta, gate)?;
                if g.channels != m.channels {
                    return Err(Error::shape(
                        ctx,
                        format!("gate with {} channels", m.channels),
                        format!("{} channels", g.channels),
                    ));
                }
                let elems = (m.channels * m.height * m.width) as u64;
                (m, "scale_channels", 0, 0, elems)
            }
            NodeOp::Identity => {
                let m = need(&input)?;
                (m, "identity", 0, 0, 0)
            }
        };

        if !matches!(node.op, NodeOp::Identity) {
            on_layer(
                node,
                input.map_or(0, |m| m.channels),
                LayerRecord {
                    name: node.name.clone(),
                    kind: kind.into(),
                    out_channels: out.channels,
                    out_height: out.height,
                    out_width: out.width,
                    rf: out.rf,
                    params,
                    macs,
                    aux_ops: aux,
                },
            );
        }
        meta.insert(node.name.clone(), out);
    }
    Ok(meta)
}

/// Parameter manifest of a node list: canonical name plus dims, in graph
/// order. `seeds` provides the channel counts of the graph inputs.
pub fn collect_params(
    nodes: &[Node],
    seeds: &HashMap<String, ValueMeta>,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut params = Vec::new();
    walk(nodes, seeds, |node, in_channels, _rec| {
        params.extend(node.param_specs(in_channels));
    })?;
    Ok(params)
}

/// Executes nodes in order over `env`. Values are dropped as soon as their
/// last consumer ran, except names listed in `keep`.
pub fn run_nodes(
    nodes: &[Node],
    env: &mut HashMap<String, Arc<Tensor>>,
    store: &WeightStore,
    path: KernelPath,
    keep: &dyn Fn(&str) -> bool,
) -> Result<()> {
    // Remaining-consumer counts for every value name.
    let mut uses: HashMap<&str, usize> = HashMap::new();
    for node in nodes {
        for name in node.inputs() {
            *uses.entry(name).or_insert(0) += 1;
        }
    }

    for node in nodes {
        if matches!(node.op, NodeOp::Identity) {
            // Aliases share the underlying tensor.
            let src = node.input.as_deref().expect("identity has an input");
            let arc = env
                .get(src)
                .cloned()
                .ok_or_else(|| Error::spec(&node.name, format!("input value `{src}` is not available")))?;
            env.insert(node.name.clone(), arc);
        } else {
            let out = eval_node(node, env, store, path)?;
            env.insert(node.name.clone(), Arc::new(out));
        }
        for name in node.inputs() {
            if let Some(n) = uses.get_mut(name) {
                *n -= 1;
                if *n == 0 && !keep(name) {
                    env.remove(name);
                }
            }
        }
    }
    Ok(())
}

fn bn_params(store: &WeightStore, name: &str, channels: usize) -> Result<BatchNormParams> {
    let get = |suffix: &str| -> Result<Vec<f32>> {
        Ok(store
            .get_checked(&format!("{name}.{suffix}"), &[channels])?
            .data
            .clone())
    };
    Ok(BatchNormParams {
        gamma: get("gamma")?,
        beta: get("beta")?,
        mean: get("mean")?,
        variance: get("var")?,
        epsilon: kernels::BN_EPSILON,
    })
}

fn eval_node(
    node: &Node,
    env: &HashMap<String, Arc<Tensor>>,
    store: &WeightStore,
    path: KernelPath,
) -> Result<Tensor> {
    let fetch = |name: &str| -> Result<&Arc<Tensor>> {
        env.get(name).ok_or_else(|| {
            Error::spec(&node.name, format!("input value `{name}` is not available"))
        })
    };
    let input = || -> Result<&Arc<Tensor>> {
        fetch(node.input.as_deref().ok_or_else(|| {
            Error::spec(&node.name, "node is missing its input")
        })?)
    };

    match &node.op {
        NodeOp::Conv { spec, bias } => {
            let x = input()?;
            let w = spec.weight_shape();
            let weights = store
                .get_checked(
                    &format!("{}.weight", node.name),
                    &[w.batch, w.channels, w.height, w.width],
                )?
                .as_tensor(&format!("{}.weight", node.name))?;
            let bias_vec = if *bias {
                Some(
                    store
                        .get_checked(&format!("{}.bias", node.name), &[spec.out_channels])?
                        .data
                        .clone(),
                )
            } else {
                None
            };
            kernels::conv2d(x, &weights, bias_vec.as_deref(), spec, path)
                .map_err(|e| annotate(e, &node.name))
        }
        NodeOp::BatchNorm => {
            let x = input()?;
            let p = bn_params(store, &node.name, x.shape().channels)?;
            kernels::batchnorm_inference(x, &p).map_err(|e| annotate(e, &node.name))
        }
        NodeOp::Act(kind) => Ok(kernels::activation(input()?, *kind)),
        NodeOp::Pool { kind, kernel, stride, padding } => {
            kernels::pool2d(input()?, *kind, *kernel, *stride, *padding)
                .map_err(|e| annotate(e, &node.name))
        }
        NodeOp::GlobalAvgPool => Ok(kernels::global_avg_pool(input()?)),
        NodeOp::ResizeLike { reference } => {
            let (h, w) = fetch(reference)?.shape().spatial();
            kernels::bilinear_resize(input()?, h, w).map_err(|e| annotate(e, &node.name))
        }
        NodeOp::Linear { inputs, outputs } => {
            let x = input()?;
            let shape = x.shape();
            if shape.channels != *inputs || shape.height != 1 || shape.width != 1 {
                return Err(Error::shape(
                    &node.name,
                    format!("(*,{inputs},1,1)"),
                    shape.to_string(),
                ));
            }
            let w = store.get_checked(&format!("{}.weight", node.name), &[*outputs, *inputs])?;
            let b = store.get_checked(&format!("{}.bias", node.name), &[*outputs])?;
            let mut data = Vec::with_capacity(shape.batch * *outputs);
            for n in 0..shape.batch {
                let row = &x.data()[n * *inputs..(n + 1) * *inputs];
                data.extend(kernels::linear(row, &w.data, &b.data, *outputs, *inputs)?);
            }
            Tensor::from_vec(Shape::new(shape.batch, *outputs, 1, 1), data)
        }
        NodeOp::Concat { inputs } => {
            let tensors: Vec<&Arc<Tensor>> = inputs
                .iter()
                .map(|n| fetch(n))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = tensors.iter().map(|t| t.as_ref()).collect();
            concat_channels(&refs).map_err(|e| annotate(e, &node.name))
        }
        NodeOp::Add { inputs } => {
            let mut iter = inputs.iter();
            let first = fetch(iter.next().ok_or_else(|| {
                Error::spec(&node.name, "add node without inputs")
            })?)?;
            let mut acc = (**first).clone();
            for name in iter {
                acc = elementwise_add(&acc, fetch(name)?).map_err(|e| annotate(e, &node.name))?;
            }
            Ok(acc)
        }
        NodeOp::ScaleChannels { gate } => {
            let x = input()?;
            let g = fetch(gate)?;
            let gs = g.shape();
            let xs = x.shape();
            if gs.channels != xs.channels || gs.batch != xs.batch || gs.height != 1 || gs.width != 1
            {
                return Err(Error::shape(
                    &node.name,
                    format!("({},{},1,1) gate", xs.batch, xs.channels),
                    gs.to_string(),
                ));
            }
            if xs.batch == 1 {
                return crate::tensor::scale_channels(x, g.data());
            }
            let mut per_batch = Vec::with_capacity(xs.batch);
            for n in 0..xs.batch {
                let gates = &g.data()[n * gs.channels..(n + 1) * gs.channels];
                let plane = xs.height * xs.width;
                let start = x.index(n, 0, 0, 0);
                let mut data = Vec::with_capacity(xs.channels * plane);
                for (c, &w) in gates.iter().enumerate() {
                    let s = start + c * plane;
                    data.extend(x.data()[s..s + plane].iter().map(|v| v * w));
                }
                per_batch.push(Tensor::from_vec(
                    Shape::new(1, xs.channels, xs.height, xs.width),
                    data,
                )?);
            }
            let refs: Vec<&Tensor> = per_batch.iter().collect();
            // Batches stacked back along the batch axis via raw copy.
            let mut data = Vec::with_capacity(xs.len());
            for t in &refs {
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(xs, data)
        }
        NodeOp::Identity => Ok((**input()?).clone()),
    }
}

fn annotate(e: Error, layer: &str) -> Error {
    match e {
        Error::ShapeMismatch { context, expected, got } => Error::ShapeMismatch {
            context: format!("{layer}: {context}"),
            expected,
            got,
        },
        Error::InvalidSpec { context, message } => Error::InvalidSpec {
            context: format!("{layer}: {context}"),
            message,
        },
        other => other,
    }
}
