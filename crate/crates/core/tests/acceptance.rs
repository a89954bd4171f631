//! Acceptance suite. One test per criterion; each prints a single
//! `acceptance criterion N (<name>): PASS|FAIL` line (run with
//! `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! Every tolerance is pinned here, in code.

use std::sync::OnceLock;
use std::time::Instant;

use streetseg::analysis::{
    analytic_footprint, count_params_flops, footprint_probe, gridding_counts, gridding_coverage,
    receptive_fields, StackLayer, DEFAULT_PROBE_CAP,
};
use streetseg::blocks::{self, DasppConfig, Fragment, MergeMode};
use streetseg::graph::{collect_params, ValueMeta};
use streetseg::kernels::{
    batchnorm_inference, conv2d, fold_batchnorm, max_rel_diff, BatchNormParams, ConvSpec,
    KernelPath, PoolKind, BN_EPSILON,
};
use streetseg::network::{
    build_network, init_store_random, init_store_zero, predict_labels, FusionMode, Network,
    NetworkOptions, RateMode,
};
use streetseg::tensor::{fill_values, seeded_fill, FillDistribution, Shape, Tensor};
use streetseg::verify::{conv_case, standard_conv_reference};

const CONV_ORACLE_TOL: f32 = 1e-5;
const BN_FOLD_TOL: f32 = 1e-4;
const IDENTITY_TOL: f32 = 1e-6;
const PARAMS_RANGE: (u64, u64) = (5_600_000, 6_800_000);
const FLOPS_RANGE: (u64, u64) = (39_600_000_000, 59_400_000_000);
const SINGLE_D16_DENSITY: f64 = 9.0 / 1089.0;
const NAIVE_BUDGET_SECS: f64 = 300.0;
const SPEEDUP_TARGET: f64 = 5.0;

fn report(n: usize, name: &str, passed: bool, detail: &str) {
    println!(
        "acceptance criterion {n} ({name}): {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
}

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    seeded_fill(shape, seed, FillDistribution::Uniform { limit: 1.0 })
}

/// Shared full-resolution traced forward used by criteria 3 and 4.
fn full_res_taps() -> &'static (Network, streetseg::network::Taps) {
    static TAPS: OnceLock<(Network, streetseg::network::Taps)> = OnceLock::new();
    TAPS.get_or_init(|| {
        let net = build_network(19);
        let store = net.random_init(11);
        let image = rand_tensor(Shape::new(1, 3, 448, 896), 12);
        let (_, taps) = net
            .forward_traced(&store, &image, KernelPath::Optimized)
            .expect("full-resolution forward");
        (net, taps)
    })
}

#[test]
fn criterion_01_kernel_oracle_equivalence() {
    let t0 = Instant::now();
    let mut worst = 0.0f32;
    let mut rates_seen = std::collections::BTreeSet::new();
    let mut grouped = 0;
    let mut strided = 0;
    for seed in 0..100u64 {
        let (x, w, spec) = conv_case(seed);
        rates_seen.insert(spec.rate);
        if spec.groups > 1 {
            grouped += 1;
        }
        if spec.stride == 2 {
            strided += 1;
        }
        let naive = conv2d(&x, &w, None, &spec, KernelPath::Naive).unwrap();
        let fast = conv2d(&x, &w, None, &spec, KernelPath::Optimized).unwrap();
        worst = worst.max(max_rel_diff(&fast, &naive));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let passed = worst <= CONV_ORACLE_TOL && elapsed <= 120.0;
    report(
        1,
        "kernel oracle equivalence",
        passed,
        &format!(
            "100 cases (rates {rates_seen:?}, {grouped} depthwise, {strided} strided), \
             max rel diff {worst:.2e} <= {CONV_ORACLE_TOL:.0e}, {elapsed:.1}s"
        ),
    );
    assert!(rates_seen.contains(&1) && rates_seen.contains(&16));
    assert!(grouped > 0 && strided > 0);
    assert!(worst <= CONV_ORACLE_TOL);
    assert!(elapsed <= 120.0);
}

#[test]
fn criterion_02_rate_one_degeneracy() {
    let mut exact = 0;
    for case in 0..20u64 {
        let (x, w, spec) = conv_case(case * 3 + 1); // never depthwise
        let spec = ConvSpec {
            rate: 1,
            padding: (spec.kernel - 1) / 2,
            ..spec
        };
        let atrous = conv2d(&x, &w, None, &spec, KernelPath::Naive).unwrap();
        let standard = standard_conv_reference(&x, &w, spec.stride, spec.padding);
        if atrous.data() == standard.data() {
            exact += 1;
        }
    }
    report(
        2,
        "rate-1 degeneracy",
        exact == 20,
        &format!("{exact}/20 cases bit-exact against the standard convolution oracle"),
    );
    assert_eq!(exact, 20);
}

#[test]
fn criterion_03_shape_ledger() {
    let (net, taps) = full_res_taps();

    // Backbone table rows at 448x896.
    let expected = [
        ("tap.block0", 32, 224, 448),
        ("tap.block1", 16, 224, 448),
        ("tap.block2", 24, 112, 224),
        ("tap.block3", 32, 56, 112),
        ("tap.block4", 64, 56, 112),
        ("tap.block5", 96, 56, 112),
        ("tap.block6", 160, 56, 112),
        ("tap.block7", 320, 56, 112),
        ("tap.spn_stem", 64, 112, 224),
    ];
    let mut ok = true;
    for (name, c, h, w) in expected {
        let got = taps.get(name).unwrap().shape();
        let want = Shape::new(1, c, h, w);
        if got != want {
            ok = false;
            println!("  {name}: got {got}, want {want}");
        }
    }

    // Spatial-stem rows via the structural walker (conv to 224x448, pool
    // to 112x224), cross-checked against the taps above.
    let records = net.layer_records(448, 896).unwrap();
    let find = |name: &str| records.iter().find(|r| r.name == name).unwrap();
    let conv = find("spn.stem.conv");
    ok &= (conv.out_channels, conv.out_height, conv.out_width) == (64, 224, 448);
    let pool = find("spn.stem.pool");
    ok &= (pool.out_channels, pool.out_height, pool.out_width) == (64, 112, 224);
    for i in 0..2 {
        let r = find(&format!("spn.layer1.block{i}.a.conv"));
        ok &= (r.out_channels, r.out_height, r.out_width) == (64, 112, 224);
        let r = find(&format!("spn.layer1.block{i}.b.conv"));
        ok &= (r.out_channels, r.out_height, r.out_width) == (64, 112, 224);
    }

    report(
        3,
        "shape ledger",
        ok,
        "all backbone and spatial-stem rows reproduced exactly at 448x896",
    );
    assert!(ok);
}

#[test]
fn criterion_04_channel_arithmetic() {
    let (net, taps) = full_res_taps();
    let mut ok = true;
    for (name, channels) in [
        ("tap.dense_skip", 640),
        ("tap.reduced", 128),
        ("tap.daspp", 128),
        ("tap.spn", 88),
        ("tap.logits", 19),
    ] {
        let got = taps.get(name).unwrap().shape().channels;
        if got != channels {
            ok = false;
            println!("  {name}: got {got} channels, want {channels}");
        }
    }
    let records = net.layer_records(448, 896).unwrap();
    let concat = records.iter().find(|r| r.name == "ffn.concat").unwrap();
    ok &= concat.out_channels == 216;
    report(
        4,
        "channel arithmetic",
        ok,
        "dense skip 640, daspp 128->128, spn 88, fusion concat 216, logits 19",
    );
    assert!(ok);
}

#[test]
fn criterion_05_table_counting() {
    let t0 = Instant::now();
    let net = build_network(19);
    let r = count_params_flops(&net, 448, 896).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    let params_ok = (PARAMS_RANGE.0..=PARAMS_RANGE.1).contains(&r.total_params);
    // The reference FLOPs figure's convention is unknown, so the acceptance
    // range is tested against the [MACs, 2xMACs] bracket: the check passes
    // when the bracket intersects the target range.
    let bracket = (r.total_macs, r.total_flops_2x);
    let flops_ok = bracket.0.max(FLOPS_RANGE.0) <= bracket.1.min(FLOPS_RANGE.1);

    report(
        5,
        "params/FLOPs counting",
        params_ok && flops_ok && elapsed <= 10.0,
        &format!(
            "params {} ({}) vs [{}, {}]; MACs bracket [{:.1}G, {:.1}G] vs [{:.1}G, {:.1}G] ({}); {elapsed:.2}s",
            r.total_params,
            if params_ok { "in range" } else { "OUT OF RANGE" },
            PARAMS_RANGE.0,
            PARAMS_RANGE.1,
            bracket.0 as f64 / 1e9,
            bracket.1 as f64 / 1e9,
            FLOPS_RANGE.0 as f64 / 1e9,
            FLOPS_RANGE.1 as f64 / 1e9,
            if flops_ok { "intersects" } else { "DISJOINT" },
        ),
    );
    assert!(elapsed <= 10.0, "counting took {elapsed:.2}s");
    assert!(
        flops_ok,
        "MAC bracket [{}, {}] misses [{}, {}]",
        bracket.0, bracket.1, FLOPS_RANGE.0, FLOPS_RANGE.1
    );
    assert!(
        params_ok,
        "total params {} outside [{}, {}]",
        r.total_params, PARAMS_RANGE.0, PARAMS_RANGE.1
    );
}

#[test]
fn criterion_06_gridding_claim() {
    let single = gridding_coverage(&[(3, 16)]);
    let ladder = gridding_coverage(&[(3, 2), (3, 4), (3, 8), (3, 16)]);
    let denser = ladder > single;
    let single_exact = (single - SINGLE_D16_DENSITY).abs() < 1e-12;
    let (touched, total) = gridding_counts(&[(3, 16)]);
    let counts_exact = (touched, total) == (9, 1089);

    // The probe must reproduce the analytic offset sets exactly on every
    // probed prefix.
    let prefixes: Vec<(Vec<StackLayer>, (usize, usize), (usize, usize))> = vec![
        (vec![StackLayer::conv(3, 2, 1, 2)], (13, 13), (6, 6)),
        (vec![StackLayer::conv(3, 4, 1, 4)], (19, 19), (9, 9)),
        (
            vec![StackLayer::conv(3, 2, 1, 2), StackLayer::conv(3, 4, 1, 4)],
            (27, 27),
            (13, 13),
        ),
        (
            vec![StackLayer::conv(3, 2, 1, 2), StackLayer::conv(3, 8, 1, 8)],
            (43, 43),
            (21, 21),
        ),
    ];
    let mut probes_ok = true;
    for (stack, input, pos) in &prefixes {
        let probed = footprint_probe(stack, *input, *pos, DEFAULT_PROBE_CAP).unwrap();
        let analytic = analytic_footprint(stack, (pos.0 as i64, pos.1 as i64));
        probes_ok &= probed == analytic;
    }

    let passed = denser && single_exact && counts_exact && probes_ok;
    report(
        6,
        "gridding coverage",
        passed,
        &format!(
            "single d16 {single:.6} (= 9/1089), stacked ladder {ladder:.6} > single: {denser}; \
             {} probe prefixes exact",
            prefixes.len()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_07_receptive_field_oracle() {
    // Chains small enough to probe, including the spatial stem (RF 11).
    let prefixes: Vec<(&str, Vec<StackLayer>, (usize, usize), (usize, usize))> = vec![
        ("conv3", vec![StackLayer::conv(3, 1, 1, 0)], (9, 9), (3, 3)),
        ("conv5", vec![StackLayer::conv(5, 1, 1, 0)], (13, 13), (4, 4)),
        ("conv1", vec![StackLayer::conv(1, 1, 1, 0)], (5, 5), (2, 2)),
        ("conv3-d2", vec![StackLayer::conv(3, 2, 1, 0)], (13, 13), (4, 4)),
        ("conv3-d4", vec![StackLayer::conv(3, 4, 1, 0)], (21, 21), (6, 6)),
        (
            "conv3-s2-x2",
            vec![StackLayer::conv(3, 1, 2, 0), StackLayer::conv(3, 1, 2, 0)],
            (15, 15),
            (2, 2),
        ),
        (
            "stem (rf 11)",
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
        (
            "avgpool3+conv3",
            vec![StackLayer::avg_pool(3, 1, 1), StackLayer::conv(3, 1, 1, 1)],
            (11, 11),
            (5, 5),
        ),
        (
            "conv3+pool2",
            vec![StackLayer::conv(3, 1, 1, 1), StackLayer::max_pool(2, 2, 0)],
            (12, 12),
            (2, 2),
        ),
        (
            "deep-mixed",
            vec![
                StackLayer::conv(3, 1, 2, 1),
                StackLayer::conv(3, 2, 1, 2),
                StackLayer::conv(3, 1, 1, 1),
            ],
            (27, 27),
            (6, 6),
        ),
    ];
    let mut ok = true;
    let mut checked = 0;
    for (name, stack, input, pos) in &prefixes {
        let formula = *receptive_fields(stack).last().unwrap();
        let probed = footprint_probe(stack, *input, *pos, DEFAULT_PROBE_CAP).unwrap();
        let ys: Vec<i64> = probed.iter().map(|p| p.0).collect();
        let xs: Vec<i64> = probed.iter().map(|p| p.1).collect();
        let extent_y = (ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1) as u64;
        let extent_x = (xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1) as u64;
        if extent_y != formula || extent_x != formula {
            ok = false;
            println!("  {name}: formula {formula}, probe bbox {extent_y}x{extent_x}");
        }
        if *name == "stem (rf 11)" {
            ok &= formula == 11;
        }
        checked += 1;
    }
    report(
        7,
        "receptive-field oracle",
        ok && checked >= 10,
        &format!("{checked} chain prefixes, formula == probe bounding box on all"),
    );
    assert!(ok && checked >= 10);
}

#[test]
fn criterion_08_block_identities() {
    // DASPP with zero branch weights is the identity map.
    let x = rand_tensor(Shape::new(1, 128, 8, 16), 21);
    let mut frag = Fragment::new();
    let out = blocks::daspp(&mut frag, "d", "x", &DasppConfig::default());
    let seeds = [("x".to_string(), ValueMeta::source(128, 8, 16))]
        .into_iter()
        .collect();
    let store = init_store_zero(&collect_params(&frag.nodes, &seeds).unwrap());
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .unwrap();
    let daspp_err = y
        .data()
        .iter()
        .zip(x.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));

    // Bottleneck with zero weights and an active shortcut is the identity.
    let x = rand_tensor(Shape::new(1, 64, 8, 16), 22);
    let mut frag = Fragment::new();
    let (out, _) = blocks::bottleneck(
        &mut frag,
        "b",
        "x",
        64,
        &blocks::BottleneckSpec::new(6, 64, 1, 4),
    )
    .unwrap();
    let seeds = [("x".to_string(), ValueMeta::source(64, 8, 16))]
        .into_iter()
        .collect();
    let store = init_store_zero(&collect_params(&frag.nodes, &seeds).unwrap());
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .unwrap();
    let bottleneck_err = y
        .data()
        .iter()
        .zip(x.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));

    // CAM with a zeroed attention path halves the input (sigmoid(0) = 1/2).
    let x = rand_tensor(Shape::new(1, 96, 8, 16), 23);
    let mut frag = Fragment::new();
    let out = blocks::cam(&mut frag, "c", "x", 96);
    let seeds = [("x".to_string(), ValueMeta::source(96, 8, 16))]
        .into_iter()
        .collect();
    let store = init_store_zero(&collect_params(&frag.nodes, &seeds).unwrap());
    let y = blocks::run_fragment(&frag.nodes, vec![("x", x.clone())], &store, KernelPath::Naive, &out)
        .unwrap();
    let cam_err = y
        .data()
        .iter()
        .zip(x.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - 0.5 * b).abs()));

    let passed =
        daspp_err <= IDENTITY_TOL && bottleneck_err <= IDENTITY_TOL && cam_err <= IDENTITY_TOL;
    report(
        8,
        "block identities",
        passed,
        &format!(
            "daspp |y-x| {daspp_err:.1e}, bottleneck |y-x| {bottleneck_err:.1e}, \
             cam |y-x/2| {cam_err:.1e} (tol {IDENTITY_TOL:.0e})"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_09_end_to_end_determinism_and_speed() {
    let net = build_network(19);
    let store = net.random_init(31);
    let image = rand_tensor(Shape::new(1, 3, 224, 448), 32);

    let t0 = Instant::now();
    let opt_a = net.forward(&store, &image, KernelPath::Optimized).unwrap();
    let optimized_secs = t0.elapsed().as_secs_f64();
    let opt_b = net.forward(&store, &image, KernelPath::Optimized).unwrap();

    let bit_identical = opt_a.data() == opt_b.data();
    let finite = opt_a.is_finite();
    let labels = predict_labels(&opt_a).unwrap();
    let labels_in_range = labels.ids.iter().all(|&id| id < 19);

    let t0 = Instant::now();
    let naive = net.forward(&store, &image, KernelPath::Naive).unwrap();
    let naive_secs = t0.elapsed().as_secs_f64();
    let agreement = max_rel_diff(&opt_a, &naive);

    let speedup = naive_secs / optimized_secs;
    let passed = bit_identical
        && finite
        && labels_in_range
        && naive_secs <= NAIVE_BUDGET_SECS
        && speedup >= SPEEDUP_TARGET
        && agreement <= BN_FOLD_TOL;
    report(
        9,
        "end-to-end determinism and speed",
        passed,
        &format!(
            "bit-identical {bit_identical}, finite {finite}, labels in 0..18 {labels_in_range}, \
             naive {naive_secs:.1}s (budget {NAIVE_BUDGET_SECS:.0}s), optimized {optimized_secs:.1}s, \
             speedup {speedup:.1}x (target {SPEEDUP_TARGET}x), paths agree at {agreement:.1e}"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_batchnorm_folding() {
    let mut worst = 0.0f32;
    for seed in 0..10u64 {
        let channels = 3 + (seed % 4) as usize;
        let out_ch = 2 + (seed % 5) as usize;
        let spec = ConvSpec::same(3, 1, channels, out_ch);
        let x = rand_tensor(Shape::new(1, channels, 10, 9), 900 + seed);
        let w = rand_tensor(spec.weight_shape(), 910 + seed);
        let bias = fill_values(out_ch, 920 + seed, FillDistribution::Uniform { limit: 0.4 });
        let p = BatchNormParams {
            gamma: fill_values(out_ch, 930 + seed, FillDistribution::Uniform { limit: 1.0 }),
            beta: fill_values(out_ch, 940 + seed, FillDistribution::Uniform { limit: 1.0 }),
            mean: fill_values(out_ch, 950 + seed, FillDistribution::Uniform { limit: 1.0 }),
            variance: fill_values(out_ch, 960 + seed, FillDistribution::Uniform { limit: 0.5 })
                .into_iter()
                .map(|v| v.abs() + 0.05)
                .collect(),
            epsilon: BN_EPSILON,
        };
        let unfolded = batchnorm_inference(
            &conv2d(&x, &w, Some(&bias), &spec, KernelPath::Optimized).unwrap(),
            &p,
        )
        .unwrap();
        let (fw, fb) = fold_batchnorm(&w, Some(&bias), &p).unwrap();
        let folded = conv2d(&x, &fw, Some(&fb), &spec, KernelPath::Optimized).unwrap();
        worst = worst.max(max_rel_diff(&folded, &unfolded));
    }
    let passed = worst <= BN_FOLD_TOL;
    report(
        10,
        "batch-norm folding",
        passed,
        &format!("10 cases, max rel diff {worst:.2e} <= {BN_FOLD_TOL:.0e}"),
    );
    assert!(passed);
}

#[test]
fn criterion_11_ablation_configurability() {
    let image = rand_tensor(Shape::new(1, 3, 64, 64), 41);
    let mut outputs: Vec<(String, Tensor)> = Vec::new();
    for pool in [PoolKind::Avg, PoolKind::Max] {
        for merge in [MergeMode::ConcatShortcut, MergeMode::Sum] {
            for fusion in [FusionMode::Ffn, FusionMode::Add] {
                let options = NetworkOptions {
                    num_classes: 19,
                    daspp_pool: pool,
                    daspp_merge: merge,
                    fusion,
                    rate_mode: RateMode::BlockWide,
                    cam_enabled: true,
                };
                let net = Network::build(options);
                let store = init_store_random(&net.manifest(), 42);
                let logits = net.forward(&store, &image, KernelPath::Optimized).unwrap();
                assert_eq!(logits.shape(), Shape::new(1, 19, 64, 64));
                assert!(logits.is_finite());
                outputs.push((format!("{pool:?}/{merge:?}/{fusion:?}"), logits));
            }
        }
    }
    let mut distinct = true;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let same = outputs[i].1.data() == outputs[j].1.data();
            if same {
                distinct = false;
                println!("  {} == {}", outputs[i].0, outputs[j].0);
            }
        }
    }
    report(
        11,
        "ablation configurability",
        distinct,
        &format!(
            "all {} pool x merge x fusion combinations build and run at 64x64; outputs pairwise distinct",
            outputs.len()
        ),
    );
    assert!(distinct && outputs.len() == 8);
}
