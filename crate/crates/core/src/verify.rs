//! Self-check suite behind the `verify` subcommand: kernel oracle
//! equivalence, degeneracy and identity properties, and end-to-end
//! determinism, each reported as one named check.

use crate::analysis::{
    self, analytic_footprint, footprint_probe, gridding_coverage, receptive_fields, StackLayer,
    DEFAULT_PROBE_CAP,
};
use crate::blocks::{self, DasppConfig, Fragment};
use crate::graph::{self, ValueMeta};
use crate::kernels::{
    self, batchnorm_inference, conv2d, fold_batchnorm, max_rel_diff, BatchNormParams, ConvSpec,
    KernelPath,
};
use crate::network::{self, build_network, init_store_zero};
use crate::tensor::{fill_values, seeded_fill, FillDistribution, Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    seeded_fill(shape, seed, FillDistribution::Uniform { limit: 1.0 })
}

/// Randomized conv case generator shared with the acceptance suite:
/// rates {1,2,4,8,16}, groups {1,C}, strides {1,2}, same-padding.
pub fn conv_case(seed: u64) -> (Tensor, Tensor, ConvSpec) {
    let rates = [1usize, 2, 4, 8, 16];
    let rate = rates[(seed % 5) as usize];
    let stride = 1 + (seed % 2) as usize;
    let depthwise = seed % 3 == 0;
    let channels = 2 + (seed % 4) as usize * 2;
    let kernel = if seed % 7 == 0 { 1 } else { 3 };
    let rate = if kernel == 1 { 1 } else { rate };
    let pad = rate * (kernel - 1) / 2;
    let spec = if depthwise {
        ConvSpec::new(kernel, rate, stride, pad, channels, channels, channels)
    } else {
        let out = 3 + (seed % 5) as usize;
        ConvSpec::new(kernel, rate, stride, pad, 1, channels, out)
    };
    let h = 9 + (seed % 8) as usize;
    let w = 8 + (seed % 11) as usize;
    let x = rand_tensor(Shape::new(1, channels, h, w), seed);
    let weights = rand_tensor(spec.weight_shape(), seed.wrapping_mul(31) + 7);
    (x, weights, spec)
}

pub fn check_conv_oracle(cases: u64, tolerance: f32) -> Check {
    let mut worst = 0.0f32;
    for seed in 0..cases {
        let (x, w, spec) = conv_case(seed);
        let naive = conv2d(&x, &w, None, &spec, KernelPath::Naive).expect("naive");
        let fast = conv2d(&x, &w, None, &spec, KernelPath::Optimized).expect("optimized");
        worst = worst.max(max_rel_diff(&fast, &naive));
    }
    Check::new(
        "kernel-oracle-equivalence",
        worst <= tolerance,
        format!("{cases} cases, max rel diff {worst:.2e} (tol {tolerance:.0e})"),
    )
}

/// Definitional standard convolution with no notion of a rate, written
/// independently of the kernel module. Accumulates in f64 over (channel,
/// kernel row, kernel column), the same order the definitional atrous path
/// uses, so rate-1 comparisons can demand bit equality.
pub fn standard_conv_reference(x: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Tensor {
    let in_shape = x.shape();
    let (out_c, in_c, k) = (
        weights.shape().batch,
        weights.shape().channels,
        weights.shape().height,
    );
    let out_h = (in_shape.height + 2 * padding - k) / stride + 1;
    let out_w = (in_shape.width + 2 * padding - k) / stride + 1;
    let mut data = Vec::with_capacity(in_shape.batch * out_c * out_h * out_w);
    for n in 0..in_shape.batch {
        for o in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0f64;
                    for c in 0..in_c {
                        for m in 0..k {
                            let yy = (oy * stride + m) as isize - padding as isize;
                            if yy < 0 || yy >= in_shape.height as isize {
                                continue;
                            }
                            for v in 0..k {
                                let xx = (ox * stride + v) as isize - padding as isize;
                                if xx < 0 || xx >= in_shape.width as isize {
                                    continue;
                                }
                                acc += x.at(n, c, yy as usize, xx as usize) as f64
                                    * weights.at(o, c, m, v) as f64;
                            }
                        }
                    }
                    data.push(acc as f32);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(in_shape.batch, out_c, out_h, out_w), data).expect("shape")
}

pub fn check_rate_one_degeneracy(cases: u64) -> Check {
    let mut exact = true;
    for seed in 0..cases {
        let (x, w, spec) = conv_case(seed * 3 + 1); // seed % 3 != 0: groups = 1
        let spec = ConvSpec {
            rate: 1,
            padding: (spec.kernel - 1) / 2,
            ..spec
        };
        let atrous = conv2d(&x, &w, None, &spec, KernelPath::Naive).expect("naive");
        let reference = standard_conv_reference(&x, &w, spec.stride, spec.padding);
        exact &= atrous.data() == reference.data();
    }
    Check::new(
        "rate-one-degeneracy",
        exact,
        format!("{cases} cases bit-exact against the standard-convolution reference"),
    )
}

pub fn check_block_identities() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();

    // DASPP with zero branch weights passes the input through.
    let x = rand_tensor(Shape::new(1, 128, 8, 8), 61);
    let mut frag = Fragment::new();
    let out = blocks::daspp(&mut frag, "d", "x", &DasppConfig::default());
    let seeds = [("x".to_string(), ValueMeta::source(128, 8, 8))]
        .into_iter()
        .collect();
    let manifest = graph::collect_params(&frag.nodes, &seeds).expect("manifest");
    let store = init_store_zero(&manifest);
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .expect("daspp");
    let daspp_ok = y.data() == x.data();
    ok &= daspp_ok;
    detail.push(format!("daspp-identity {}", if daspp_ok { "ok" } else { "FAIL" }));

    // Bottleneck with active shortcut and zero weights is the identity.
    let spec = blocks::BottleneckSpec::new(6, 32, 1, 2);
    let x = rand_tensor(Shape::new(1, 32, 8, 8), 62);
    let mut frag = Fragment::new();
    let (out, _) = blocks::bottleneck(&mut frag, "b", "x", 32, &spec).expect("bottleneck");
    let seeds = [("x".to_string(), ValueMeta::source(32, 8, 8))]
        .into_iter()
        .collect();
    let store = init_store_zero(&graph::collect_params(&frag.nodes, &seeds).expect("manifest"));
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .expect("bottleneck");
    let bn_ok = y.data() == x.data();
    ok &= bn_ok;
    detail.push(format!("bottleneck-identity {}", if bn_ok { "ok" } else { "FAIL" }));

    // CAM with a zeroed attention path halves the input.
    let x = rand_tensor(Shape::new(1, 64, 8, 8), 63);
    let mut frag = Fragment::new();
    let out = blocks::cam(&mut frag, "c", "x", 64);
    let seeds = [("x".to_string(), ValueMeta::source(64, 8, 8))]
        .into_iter()
        .collect();
    let store = init_store_zero(&graph::collect_params(&frag.nodes, &seeds).expect("manifest"));
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .expect("cam");
    let cam_ok = y
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| (a - 0.5 * b).abs() <= 1e-6);
    ok &= cam_ok;
    detail.push(format!("cam-halving {}", if cam_ok { "ok" } else { "FAIL" }));

    Check::new("block-identities", ok, detail.join(", "))
}

pub fn check_bn_folding(cases: u64, tolerance: f32) -> Check {
    let mut worst = 0.0f32;
    for seed in 0..cases {
        let spec = ConvSpec::same(3, 1, 3, 4);
        let x = rand_tensor(Shape::new(1, 3, 9, 9), seed);
        let w = rand_tensor(spec.weight_shape(), 300 + seed);
        let p = BatchNormParams {
            gamma: fill_values(4, 310 + seed, FillDistribution::Uniform { limit: 1.0 }),
            beta: fill_values(4, 320 + seed, FillDistribution::Uniform { limit: 1.0 }),
            mean: fill_values(4, 330 + seed, FillDistribution::Uniform { limit: 1.0 }),
            variance: fill_values(4, 340 + seed, FillDistribution::Uniform { limit: 0.5 })
                .into_iter()
                .map(|v| v.abs() + 0.05)
                .collect(),
            epsilon: kernels::BN_EPSILON,
        };
        let unfolded =
            batchnorm_inference(&conv2d(&x, &w, None, &spec, KernelPath::Naive).unwrap(), &p)
                .unwrap();
        let (fw, fb) = fold_batchnorm(&w, None, &p).unwrap();
        let folded = conv2d(&x, &fw, Some(&fb), &spec, KernelPath::Naive).unwrap();
        worst = worst.max(max_rel_diff(&folded, &unfolded));
    }
    Check::new(
        "batchnorm-folding",
        worst <= tolerance,
        format!("{cases} cases, max rel diff {worst:.2e} (tol {tolerance:.0e})"),
    )
}

pub fn check_receptive_field_probes() -> Check {
    let prefixes: Vec<(&str, Vec<StackLayer>, (usize, usize), (usize, usize))> = vec![
        (
            "conv3",
            vec![StackLayer::conv(3, 1, 1, 0)],
            (11, 11),
            (4, 4),
        ),
        (
            "conv3-d2",
            vec![StackLayer::conv(3, 2, 1, 0)],
            (13, 13),
            (4, 4),
        ),
        (
            "stem",
            vec![StackLayer::conv(7, 1, 2, 3), StackLayer::max_pool(3, 2, 1)],
            (32, 32),
            (4, 4),
        ),
        (
            "ladder-2-4",
            vec![StackLayer::conv(3, 2, 1, 2), StackLayer::conv(3, 4, 1, 4)],
            (27, 27),
            (13, 13),
        ),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, stack, input, pos) in prefixes {
        let probe = footprint_probe(&stack, input, pos, DEFAULT_PROBE_CAP).expect("probe");
        let analytic = analytic_footprint(&stack, (pos.0 as i64, pos.1 as i64));
        let sets_equal = probe == analytic;
        let rf = *receptive_fields(&stack).last().unwrap();
        let ys: Vec<i64> = probe.iter().map(|p| p.0).collect();
        let extent = (ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1) as u64;
        let rf_ok = extent == rf;
        ok &= sets_equal && rf_ok;
        detail.push(format!(
            "{name}: sets {} rf {}={}",
            if sets_equal { "ok" } else { "FAIL" },
            rf,
            extent
        ));
    }
    Check::new("receptive-field-probes", ok, detail.join("; "))
}

pub fn check_gridding_ladder() -> Check {
    let single = gridding_coverage(&[(3, 16)]);
    let ladder = gridding_coverage(&[(3, 2), (3, 4), (3, 8), (3, 16)]);
    let ok = ladder > single && (single - 9.0 / 1089.0).abs() < 1e-12;
    Check::new(
        "gridding-ladder",
        ok,
        format!("single d16 {single:.5}, stacked ladder {ladder:.5}"),
    )
}

pub fn check_forward_determinism() -> Check {
    let net = build_network(19);
    let store = net.random_init(71);
    let img = rand_tensor(Shape::new(1, 3, 64, 64), 72);
    let a = net.forward(&store, &img, KernelPath::Optimized).expect("forward");
    let b = net.forward(&store, &img, KernelPath::Optimized).expect("forward");
    let naive = net.forward(&store, &img, KernelPath::Naive).expect("forward");
    let rel = max_rel_diff(&a, &naive);
    let labels = network::predict_labels(&a).expect("labels");
    let ok = a.data() == b.data() && a.is_finite() && rel <= 1e-4 && labels.ids.iter().all(|&v| v < 19);
    Check::new(
        "forward-determinism",
        ok,
        format!("bit-identical reruns, finite logits, paths agree at {rel:.2e}"),
    )
}

pub fn check_analysis_consistency() -> Check {
    let net = build_network(19);
    let report = analysis::count_params_flops(&net, 64, 64).expect("report");
    let manifest_total: u64 = net
        .manifest()
        .iter()
        .filter(|(name, _)| !name.ends_with(".mean") && !name.ends_with(".var"))
        .map(|(_, dims)| dims.iter().product::<usize>() as u64)
        .sum();
    let ok = report.total_params == manifest_total;
    Check::new(
        "analysis-consistency",
        ok,
        format!(
            "walker params {} vs manifest {}",
            report.total_params, manifest_total
        ),
    )
}

/// Runs every check. The CLI exits nonzero if any fails.
pub fn run_all() -> Vec<Check> {
    vec![
        check_conv_oracle(40, 1e-5),
        check_rate_one_degeneracy(10),
        check_block_identities(),
        check_bn_folding(5, 1e-4),
        check_receptive_field_probes(),
        check_gridding_ladder(),
        check_forward_determinism(),
        check_analysis_consistency(),
    ]
}
