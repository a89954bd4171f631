//! Assembles the full pipeline: the lightweight dilated backbone with
//! channel attention, the dense skip concatenation, the 1x1 reduction to
//! 128 channels, DASPP, the spatial detail branch and the fusion head.
//!
//! The semantic path and the spatial stem are independent given the image
//! and run in parallel; they join in the fusion lane, which also needs the
//! backbone's block2 features for the spatial branch output.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::blocks::{
    self, BottleneckSpec, DasppConfig, Fragment, MergeMode,
};
use crate::error::{Error, Result};
use crate::graph::{self, LayerRecord, Node, ValueMeta};
use crate::kernels::{Activation, ConvSpec, KernelPath, PoolKind};
use crate::tensor::{fill_values, FillDistribution, Tensor};
use crate::weights::{Entry, WeightStore};

/// Backbone rows `(t, c, n, s, d)` for blocks 1..7: expansion, output
/// channels, repeats, first-unit stride, atrous rate. Block 0 is the
/// initial 3x3/2 convolution with 32 channels.
pub const BACKBONE_TABLE: [(usize, usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1, 1),
    (6, 24, 2, 2, 1),
    (6, 32, 3, 2, 1),
    (6, 64, 4, 1, 2),
    (6, 96, 3, 1, 4),
    (6, 160, 3, 1, 8),
    (6, 320, 1, 1, 16),
];

/// Dense-skip source blocks and their widths.
pub const SKIP_BLOCKS: [usize; 4] = [4, 5, 6, 7];

/// How the atrous rate of a backbone block applies to its repeated units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Every unit of the block runs at the block's rate (default).
    BlockWide,
    /// Only the first unit is dilated; the rest run at rate 1.
    FirstUnitOnly,
}

/// Which fusion head combines the semantic and spatial branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Ffn,
    /// Ablation: dual 1x1 projections to class logits, then addition.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOptions {
    pub num_classes: usize,
    pub daspp_pool: PoolKind,
    pub daspp_merge: MergeMode,
    pub fusion: FusionMode,
    pub rate_mode: RateMode,
    /// Channel attention on blocks 4..7; disabling it yields identity
    /// attention with the same tap shapes.
    pub cam_enabled: bool,
}

impl Default for NetworkOptions {
    fn default() -> NetworkOptions {
        NetworkOptions {
            num_classes: 19,
            daspp_pool: PoolKind::Avg,
            daspp_merge: MergeMode::ConcatShortcut,
            fusion: FusionMode::Ffn,
            rate_mode: RateMode::BlockWide,
            cam_enabled: true,
        }
    }
}

/// Intermediate activations retained by a traced forward pass, keyed by tap
/// name (`tap.block0` .. `tap.block7`, `tap.dense_skip`, `tap.reduced`,
/// `tap.daspp`, `tap.spn_stem`, `tap.spn`, `tap.logits`).
#[derive(Debug, Default)]
pub struct Taps {
    map: BTreeMap<String, Arc<Tensor>>,
}

impl Taps {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::spec("taps", format!("no tap named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Per-pixel class assignment produced by [`predict_labels`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

/// The assembled inference graph: an ordered node list per lane plus the
/// options it was built with.
#[derive(Debug, Clone)]
pub struct Network {
    pub options: NetworkOptions,
    semantic: Vec<Node>,
    spatial: Vec<Node>,
    fusion: Vec<Node>,
}

pub const INPUT_NAME: &str = "image";

impl Network {
    /// Builds the graph for the given options.
    pub fn build(options: NetworkOptions) -> Network {
        let mut sem = Fragment::new();

        // Backbone. Block 0 halves the resolution; blocks 2 and 3 halve it
        // again; blocks 4..7 keep 1/8 resolution with rates 2, 4, 8, 16.
        let mut cur = sem.conv_bn_act(
            "lbn.block0",
            INPUT_NAME,
            ConvSpec::new(3, 1, 2, 1, 1, 3, 32),
            Some(Activation::Relu6),
        );
        cur = sem.alias("tap.block0", &cur);
        let mut channels = 32;
        for (i, &(t, c, n, s, d)) in BACKBONE_TABLE.iter().enumerate() {
            let block = i + 1;
            for unit in 0..n {
                let stride = if unit == 0 { s } else { 1 };
                let rate = match options.rate_mode {
                    RateMode::BlockWide => d,
                    RateMode::FirstUnitOnly => {
                        if unit == 0 {
                            d
                        } else {
                            1
                        }
                    }
                };
                let spec = BottleneckSpec::new(t, c, stride, rate);
                let (out, out_ch) = blocks::bottleneck(
                    &mut sem,
                    &format!("lbn.block{block}.unit{unit}"),
                    &cur,
                    channels,
                    &spec,
                )
                .expect("table rows are valid");
                cur = out;
                channels = out_ch;
            }
            cur = sem.alias(format!("tap.block{block}"), &cur);
        }

        // Channel attention on the dense-skip sources, then concatenation.
        let mut skip_inputs = Vec::new();
        for &block in &SKIP_BLOCKS {
            let tap = format!("tap.block{block}");
            let width = BACKBONE_TABLE[block - 1].1;
            if options.cam_enabled {
                skip_inputs.push(blocks::cam(&mut sem, &format!("cam.block{block}"), &tap, width));
            } else {
                skip_inputs.push(tap);
            }
        }
        let refs: Vec<&str> = skip_inputs.iter().map(|s| s.as_str()).collect();
        let skip = sem.concat("lbn.skip", &refs);
        let skip = sem.alias("tap.dense_skip", &skip);

        let reduced = sem.conv_bn_act(
            "reduce",
            &skip,
            ConvSpec::new(1, 1, 1, 0, 1, 640, 128),
            Some(Activation::Relu),
        );
        let reduced = sem.alias("tap.reduced", &reduced);

        let cfg = DasppConfig {
            pool_kind: options.daspp_pool,
            merge: options.daspp_merge,
            ..DasppConfig::default()
        };
        let daspp = blocks::daspp(&mut sem, "daspp", &reduced, &cfg);
        sem.alias("tap.daspp", &daspp);

        // Spatial stem, independent of the backbone.
        let mut spa = Fragment::new();
        let stem = blocks::spn_stem(&mut spa, "spn", INPUT_NAME);
        spa.alias("tap.spn_stem", &stem);

        // Fusion lane: complete the spatial branch with the block2 skip,
        // then fuse.
        let mut fus = Fragment::new();
        let spn = fus.concat("spn.concat", &["tap.spn_stem", "tap.block2"]);
        let spn = fus.alias("tap.spn", &spn);
        let logits = match options.fusion {
            FusionMode::Ffn => blocks::ffn(
                &mut fus,
                "ffn",
                "tap.daspp",
                &spn,
                INPUT_NAME,
                128,
                88,
                options.num_classes,
            ),
            FusionMode::Add => blocks::add_fusion(
                &mut fus,
                "fuse_add",
                "tap.daspp",
                &spn,
                INPUT_NAME,
                128,
                88,
                options.num_classes,
            ),
        };
        fus.alias("tap.logits", &logits);

        Network {
            options,
            semantic: sem.nodes,
            spatial: spa.nodes,
            fusion: fus.nodes,
        }
    }

    /// All nodes in one topologically valid order.
    pub fn nodes(&self) -> Vec<Node> {
        let mut all = self.semantic.clone();
        all.extend(self.spatial.iter().cloned());
        all.extend(self.fusion.iter().cloned());
        all
    }

    fn seed_meta(height: usize, width: usize) -> HashMap<String, ValueMeta> {
        let mut seeds = HashMap::new();
        seeds.insert(INPUT_NAME.to_string(), ValueMeta::source(3, height, width));
        seeds
    }

    /// Canonical parameter manifest: `(name, dims)` in graph order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        graph::collect_params(&self.nodes(), &Self::seed_meta(64, 64))
            .expect("the built graph is structurally valid")
    }

    /// Human-readable manifest listing.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        let mut total = 0usize;
        for (name, dims) in self.manifest() {
            let len: usize = dims.iter().product();
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{name}  [{}]  {len}\n", parts.join(",")));
            total += len;
        }
        out.push_str(&format!("total values {total}\n"));
        out
    }

    /// Per-layer structural records for a given input size, in execution
    /// order across the three lanes.
    pub fn layer_records(&self, height: usize, width: usize) -> Result<Vec<LayerRecord>> {
        validate_input_size(height, width)?;
        let mut records = Vec::new();
        graph::walk(&self.nodes(), &Self::seed_meta(height, width), |_, _, rec| {
            records.push(rec);
        })?;
        Ok(records)
    }

    /// Checks that every graph parameter is bound with the right shape.
    /// With `strict`, entries not used by the graph are also rejected.
    pub fn validate_weights(&self, store: &WeightStore, strict: bool) -> Result<()> {
        let manifest = self.manifest();
        for (name, dims) in &manifest {
            store.get_checked(name, dims)?;
        }
        if strict {
            let known: std::collections::HashSet<&str> =
                manifest.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<String> = store
                .names()
                .filter(|n| !known.contains(n))
                .map(|n| n.to_string())
                .collect();
            if !extra.is_empty() {
                return Err(Error::UnexpectedParams { names: extra });
            }
        }
        Ok(())
    }

    /// Seeded random weights: fan-in-scaled uniform fills for weights and
    /// biases, identity batch-norm records. Each parameter's stream is keyed
    /// by `seed ^ fnv1a64(name)`, so the store does not depend on manifest
    /// order.
    pub fn random_init(&self, seed: u64) -> WeightStore {
        init_store_random(&self.manifest(), seed)
    }

    pub fn forward(&self, store: &WeightStore, image: &Tensor, path: KernelPath) -> Result<Tensor> {
        Ok(self
            .forward_traced(store, image, path)?
            .1
            .map
            .remove("tap.logits")
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|arc| (*arc).clone()))
            .expect("logits tap always present"))
    }

    /// Forward pass retaining every tap. The semantic and spatial lanes run
    /// in parallel and join in the fusion lane.
    pub fn forward_traced(
        &self,
        store: &WeightStore,
        image: &Tensor,
        path: KernelPath,
    ) -> Result<(Tensor, Taps)> {
        let shape = image.shape();
        if shape.channels != 3 {
            return Err(Error::shape("forward input", "3 channels", format!("{} channels", shape.channels)));
        }
        validate_input_size(shape.height, shape.width)?;
        self.validate_weights(store, false)?;

        let keep = |name: &str| name.starts_with("tap.") || name == INPUT_NAME;

        let image = Arc::new(image.clone());
        let mut sem_env: HashMap<String, Arc<Tensor>> = HashMap::new();
        sem_env.insert(INPUT_NAME.into(), Arc::clone(&image));
        let mut spa_env: HashMap<String, Arc<Tensor>> = HashMap::new();
        spa_env.insert(INPUT_NAME.into(), Arc::clone(&image));

        let (sem_res, spa_res) = rayon::join(
            || {
                let mut env = sem_env;
                graph::run_nodes(&self.semantic, &mut env, store, path, &keep).map(|_| env)
            },
            || {
                let mut env = spa_env;
                graph::run_nodes(&self.spatial, &mut env, store, path, &keep).map(|_| env)
            },
        );
        let mut env = sem_res?;
        for (k, v) in spa_res? {
            env.entry(k).or_insert(v);
        }
        graph::run_nodes(&self.fusion, &mut env, store, path, &keep)?;

        let mut taps = Taps::default();
        for (name, value) in env {
            if name.starts_with("tap.") {
                taps.map.insert(name, value);
            }
        }
        let logits = taps.get("tap.logits")?.clone();
        Ok((logits, taps))
    }
}

/// Builds the default 19-class network.
pub fn build_network(num_classes: usize) -> Network {
    Network::build(NetworkOptions {
        num_classes,
        ..NetworkOptions::default()
    })
}

fn validate_input_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::spec(
            "input size",
            format!("{height}x{width} must be positive and divisible by 8"),
        ));
    }
    Ok(())
}

/// Per-pixel argmax over the class axis; ties break toward the smallest
/// class index. Uses batch element 0.
pub fn predict_labels(logits: &Tensor) -> Result<LabelMap> {
    let shape = logits.shape();
    if shape.channels == 0 || shape.channels > 256 {
        return Err(Error::spec(
            "predict_labels",
            format!("{} channels not in 1..=256", shape.channels),
        ));
    }
    let plane = shape.height * shape.width;
    let mut ids = vec![0u8; plane];
    for (p, id) in ids.iter_mut().enumerate() {
        let mut best = logits.data()[p];
        let mut best_c = 0usize;
        for c in 1..shape.channels {
            let v = logits.data()[c * plane + p];
            if v > best {
                best = v;
                best_c = c;
            }
        }
        *id = best_c as u8;
    }
    Ok(LabelMap {
        height: shape.height,
        width: shape.width,
        ids,
    })
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded random store for a manifest. Weight entries get uniform fills in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`; a bias shares its sibling weight's
/// bound; batch-norm records are identity.
pub fn init_store_random(manifest: &[(String, Vec<usize>)], seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    let mut last_fan_in = 1usize;
    for (name, dims) in manifest {
        let len: usize = dims.iter().product();
        let entry_seed = seed ^ fnv1a64(name);
        let data = if name.ends_with(".weight") {
            last_fan_in = match dims.len() {
                4 => dims[1] * dims[2] * dims[3],
                2 => dims[1],
                _ => dims.iter().product(),
            };
            let limit = 1.0 / (last_fan_in as f32).sqrt();
            fill_values(len, entry_seed, FillDistribution::Uniform { limit })
        } else if name.ends_with(".bias") {
            let limit = 1.0 / (last_fan_in as f32).sqrt();
            fill_values(len, entry_seed, FillDistribution::Uniform { limit })
        } else if name.ends_with(".gamma") || name.ends_with(".var") {
            vec![1.0; len]
        } else {
            // .beta, .mean
            vec![0.0; len]
        };
        store
            .insert(name.clone(), Entry::new(dims.clone(), data))
            .expect("manifest names are unique");
    }
    store
}

/// All-zero weights with identity batch norm; the fixture behind the
/// shortcut-identity tests.
pub fn init_store_zero(manifest: &[(String, Vec<usize>)]) -> WeightStore {
    let mut store = WeightStore::new();
    for (name, dims) in manifest {
        let len: usize = dims.iter().product();
        let data = if name.ends_with(".gamma") || name.ends_with(".var") {
            vec![1.0; len]
        } else {
            vec![0.0; len]
        };
        store
            .insert(name.clone(), Entry::new(dims.clone(), data))
            .expect("manifest names are unique");
    }
    store
}
