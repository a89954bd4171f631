use super::*;
use crate::tensor::{fill_values, seeded_fill, FillDistribution};

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    seeded_fill(shape, seed, FillDistribution::Uniform { limit: 1.0 })
}

/// Independent standard-convolution oracle, written without any rate logic.
/// Accumulates in f64 over (channel, kernel row, kernel column), matching
/// the definitional path's accumulation order so d=1 comparisons are exact.
fn standard_conv_oracle(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let in_shape = x.shape();
    let out_c = weights.shape().batch;
    let in_c = weights.shape().channels;
    let k = weights.shape().height;
    assert_eq!(in_c, in_shape.channels);
    let out_h = (in_shape.height + 2 * padding - k) / stride + 1;
    let out_w = (in_shape.width + 2 * padding - k) / stride + 1;
    let mut data = Vec::new();
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
                    data.push((acc + bias.map_or(0.0, |b| b[o]) as f64) as f32);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(in_shape.batch, out_c, out_h, out_w), data).unwrap()
}

#[test]
fn conv_all_ones_3x3_hand_counted() {
    let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let spec = ConvSpec::same(3, 1, 1, 1);
    for path in [KernelPath::Naive, KernelPath::Optimized] {
        let out = conv2d(&x, &w, None, &spec, path).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
        assert_eq!(out.at(0, 0, 1, 0), 6.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
    }
}

#[test]
fn conv_1x1_unit_kernel_is_identity_at_any_rate() {
    let x = rand_tensor(Shape::new(1, 1, 6, 5), 2);
    let w = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
    for rate in [1, 3, 7] {
        let spec = ConvSpec::new(1, rate, 1, 0, 1, 1, 1);
        for path in [KernelPath::Naive, KernelPath::Optimized] {
            let out = conv2d(&x, &w, None, &spec, path).unwrap();
            assert_eq!(out.data(), x.data());
        }
    }
}

#[test]
fn conv_stride2_halves_resolution() {
    // First layer of the backbone: 3->32 channels, 3x3, stride 2, pad 1.
    let x = rand_tensor(Shape::new(1, 3, 448, 896), 3);
    let w = rand_tensor(Shape::new(32, 3, 3, 3), 4);
    let spec = ConvSpec::new(3, 1, 2, 1, 1, 3, 32);
    let out = conv2d(&x, &w, None, &spec, KernelPath::Optimized).unwrap();
    assert_eq!(out.shape(), Shape::new(1, 32, 224, 448));
}

#[test]
fn conv_optimized_matches_naive_on_dilated_case() {
    let x = rand_tensor(Shape::new(1, 4, 8, 8), 5);
    let w = rand_tensor(Shape::new(2, 4, 3, 3), 6);
    let bias = [0.1f32, -0.2];
    let spec = ConvSpec::new(3, 2, 1, 2, 1, 4, 2);
    let a = conv2d(&x, &w, Some(&bias), &spec, KernelPath::Naive).unwrap();
    let b = conv2d(&x, &w, Some(&bias), &spec, KernelPath::Optimized).unwrap();
    assert!(max_rel_diff(&b, &a) <= 1e-5);
}

#[test]
fn conv_d1_equals_standard_oracle_exactly() {
    for seed in 0..10u64 {
        let x = rand_tensor(Shape::new(1, 3, 9, 7), seed);
        let w = rand_tensor(Shape::new(4, 3, 3, 3), 100 + seed);
        let bias = fill_values(4, 200 + seed, FillDistribution::Uniform { limit: 0.5 });
        let stride = 1 + (seed % 2) as usize;
        let spec = ConvSpec::new(3, 1, stride, 1, 1, 3, 4);
        let got = conv2d(&x, &w, Some(&bias), &spec, KernelPath::Naive).unwrap();
        let want = standard_conv_oracle(&x, &w, Some(&bias), stride, 1);
        assert_eq!(got.data(), want.data(), "seed {seed}");
    }
}

#[test]
fn conv_linearity() {
    let spec = ConvSpec::same(3, 2, 3, 5);
    let w = rand_tensor(spec.weight_shape(), 7);
    let x = rand_tensor(Shape::new(1, 3, 10, 10), 8);
    let y = rand_tensor(Shape::new(1, 3, 10, 10), 9);
    let (alpha, beta) = (0.7f32, -1.3f32);
    let mixed = Tensor::from_vec(
        x.shape(),
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| alpha * a + beta * b)
            .collect(),
    )
    .unwrap();
    for path in [KernelPath::Naive, KernelPath::Optimized] {
        let lhs = conv2d(&mixed, &w, None, &spec, path).unwrap();
        let fx = conv2d(&x, &w, None, &spec, path).unwrap();
        let fy = conv2d(&y, &w, None, &spec, path).unwrap();
        let rhs = Tensor::from_vec(
            lhs.shape(),
            fx.data()
                .iter()
                .zip(fy.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        assert!(max_rel_diff(&lhs, &rhs) <= 1e-5);
    }
}

#[test]
fn conv_translation_covariance_on_interior() {
    // Shifting the input by s pixels shifts the pad-0 output by 1 pixel.
    let spec = ConvSpec::new(3, 1, 2, 0, 1, 2, 3);
    let w = rand_tensor(spec.weight_shape(), 11);
    let base = rand_tensor(Shape::new(1, 2, 12, 12), 12);
    // shifted[y][x] = base[y - s][x - s]
    let mut shifted = Tensor::zeros(base.shape()).into_data();
    let s = spec.stride;
    for c in 0..2 {
        for y in s..12 {
            for x in s..12 {
                shifted[(c * 12 + y) * 12 + x] = base.at(0, c, y - s, x - s);
            }
        }
    }
    let shifted = Tensor::from_vec(base.shape(), shifted).unwrap();
    let out_a = conv2d(&base, &w, None, &spec, KernelPath::Naive).unwrap();
    let out_b = conv2d(&shifted, &w, None, &spec, KernelPath::Naive).unwrap();
    let (oh, ow) = out_a.shape().spatial();
    for o in 0..3 {
        for y in 0..oh - 1 {
            for x in 0..ow - 1 {
                assert_eq!(out_b.at(0, o, y + 1, x + 1), out_a.at(0, o, y, x));
            }
        }
    }
}

#[test]
fn conv_paths_agree_across_randomized_specs() {
    let mut cases = 0;
    for seed in 0..30u64 {
        let rates = [1usize, 2, 4, 8, 16];
        let rate = rates[(seed % 5) as usize];
        let depthwise = seed % 3 == 0;
        let channels = 2 + (seed % 3) as usize * 2;
        let stride = 1 + (seed % 2) as usize;
        let spec = if depthwise {
            ConvSpec::new(3, rate, stride, rate, channels, channels, channels)
        } else {
            ConvSpec::new(3, rate, stride, rate, 1, channels, 4)
        };
        let x = rand_tensor(Shape::new(1, channels, 14, 11), seed);
        let w = rand_tensor(spec.weight_shape(), 1000 + seed);
        let naive = conv2d(&x, &w, None, &spec, KernelPath::Naive).unwrap();
        let fast = conv2d(&x, &w, None, &spec, KernelPath::Optimized).unwrap();
        assert!(
            max_rel_diff(&fast, &naive) <= 1e-5,
            "seed {seed} spec {spec:?}"
        );
        cases += 1;
    }
    assert_eq!(cases, 30);
}

#[test]
fn conv_rejects_inconsistent_shapes() {
    let x = Tensor::zeros(Shape::new(1, 3, 8, 8));
    let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
    let spec = ConvSpec::same(3, 1, 4, 4); // expects 4 input channels
    assert!(conv2d(&x, &w, None, &spec, KernelPath::Naive).is_err());
    // Effective kernel larger than the padded input.
    let spec = ConvSpec::new(3, 8, 1, 0, 1, 3, 4);
    let w = Tensor::zeros(spec.weight_shape());
    assert!(conv2d(&x, &w, None, &spec, KernelPath::Naive).is_err());
}

#[test]
fn batchnorm_identity_params() {
    let x = rand_tensor(Shape::new(1, 3, 4, 4), 13);
    let mut p = BatchNormParams::identity(3);
    p.epsilon = 1e-12;
    let out = batchnorm_inference(&x, &p).unwrap();
    assert!(max_rel_diff(&out, &x) < 1e-6);
}

#[test]
fn batchnorm_constant_channel_maps_to_beta() {
    let mut p = BatchNormParams::identity(2);
    p.mean = vec![3.0, -1.0];
    p.beta = vec![0.5, 2.0];
    p.gamma = vec![2.0, 4.0];
    let mut x = Tensor::zeros(Shape::new(1, 2, 3, 3)).into_data();
    x[..9].fill(3.0);
    x[9..].fill(-1.0);
    let x = Tensor::from_vec(Shape::new(1, 2, 3, 3), x).unwrap();
    let out = batchnorm_inference(&x, &p).unwrap();
    assert!(out.plane(0, 0).iter().all(|&v| v == 0.5));
    assert!(out.plane(0, 1).iter().all(|&v| v == 2.0));
}

#[test]
fn batchnorm_matches_scalar_oracle() {
    let x = rand_tensor(Shape::new(2, 3, 5, 4), 17);
    let p = BatchNormParams {
        gamma: vec![1.3, -0.4, 2.2],
        beta: vec![0.1, 0.2, -0.3],
        mean: vec![0.05, -0.2, 0.6],
        variance: vec![1.5, 0.3, 0.9],
        epsilon: BN_EPSILON,
    };
    let out = batchnorm_inference(&x, &p).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for y in 0..5 {
                for xx in 0..4 {
                    let want = p.gamma[c] * (x.at(n, c, y, xx) - p.mean[c])
                        / (p.variance[c] + p.epsilon).sqrt()
                        + p.beta[c];
                    let got = out.at(n, c, y, xx);
                    let denom = want.abs().max(1.0);
                    assert!((got - want).abs() / denom <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn fold_batchnorm_near_identity_params() {
    let w = rand_tensor(Shape::new(4, 3, 3, 3), 19);
    let bias = fill_values(4, 20, FillDistribution::Uniform { limit: 0.5 });
    let p = BatchNormParams {
        variance: vec![1.0 - BN_EPSILON; 4],
        ..BatchNormParams::identity(4)
    };
    let (fw, fb) = fold_batchnorm(&w, Some(&bias), &p).unwrap();
    assert!(max_rel_diff(&fw, &w) <= 1e-6);
    for (a, b) in fb.iter().zip(&bias) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn fold_batchnorm_matches_unfolded_pipeline() {
    for seed in 0..5u64 {
        let spec = ConvSpec::same(3, 1, 3, 5);
        let x = rand_tensor(Shape::new(1, 3, 9, 9), seed);
        let w = rand_tensor(spec.weight_shape(), 50 + seed);
        let bias = fill_values(5, 60 + seed, FillDistribution::Uniform { limit: 0.3 });
        let p = BatchNormParams {
            gamma: fill_values(5, 70 + seed, FillDistribution::Uniform { limit: 1.0 }),
            beta: fill_values(5, 80 + seed, FillDistribution::Uniform { limit: 1.0 }),
            mean: fill_values(5, 90 + seed, FillDistribution::Uniform { limit: 1.0 }),
            variance: fill_values(5, 95 + seed, FillDistribution::Uniform { limit: 0.5 })
                .into_iter()
                .map(|v| v.abs() + 0.1)
                .collect(),
            epsilon: BN_EPSILON,
        };
        let unfolded =
            batchnorm_inference(&conv2d(&x, &w, Some(&bias), &spec, KernelPath::Naive).unwrap(), &p)
                .unwrap();
        let (fw, fb) = fold_batchnorm(&w, Some(&bias), &p).unwrap();
        let folded = conv2d(&x, &fw, Some(&fb), &spec, KernelPath::Naive).unwrap();
        assert!(max_rel_diff(&folded, &unfolded) <= 1e-4, "seed {seed}");
    }
}

#[test]
fn fold_batchnorm_zero_weights_forces_bias() {
    let w = Tensor::zeros(Shape::new(3, 2, 1, 1));
    let p = BatchNormParams {
        gamma: vec![2.0, 3.0, 4.0],
        beta: vec![0.5, -0.5, 1.0],
        mean: vec![1.0, 2.0, -1.0],
        variance: vec![1.0, 4.0, 0.25],
        epsilon: BN_EPSILON,
    };
    let (fw, fb) = fold_batchnorm(&w, None, &p).unwrap();
    assert!(fw.data().iter().all(|&v| v == 0.0));
    for o in 0..3 {
        let want = p.beta[o] - p.gamma[o] * p.mean[o] / (p.variance[o] + p.epsilon).sqrt();
        assert!((fb[o] - want).abs() <= 1e-6);
    }
}

#[test]
fn activation_reference_points() {
    let x = Tensor::from_vec(
        Shape::new(1, 1, 1, 4),
        vec![7.0, -1.0, 3.0, 0.0],
    )
    .unwrap();
    let r6 = activation(&x, Activation::Relu6);
    assert_eq!(r6.data(), &[6.0, 0.0, 3.0, 0.0]);
    let leaky = activation(
        &Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![-2.0]).unwrap(),
        Activation::LeakyRelu(0.01),
    );
    assert_eq!(leaky.data(), &[-0.02]);
    let sig = activation(
        &Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap(),
        Activation::Sigmoid,
    );
    assert_eq!(sig.data(), &[0.5]);
    let relu = activation(&x, Activation::Relu);
    assert_eq!(relu.data(), &[7.0, 0.0, 3.0, 0.0]);
}

#[test]
fn avg_pool_of_constant_is_constant() {
    for (k, s, pad) in [(3, 1, 1), (5, 2, 2), (7, 1, 3), (2, 2, 0)] {
        let x = Tensor::filled(Shape::new(1, 2, 9, 9), 4.25);
        let out = pool2d(&x, PoolKind::Avg, k, s, pad).unwrap();
        assert!(
            out.data().iter().all(|&v| v == 4.25),
            "k={k} s={s} pad={pad}"
        );
    }
}

#[test]
fn max_pool_finds_single_maximum() {
    let mut data = vec![0.0f32; 25];
    data[12] = 5.0;
    let x = Tensor::from_vec(Shape::new(1, 1, 5, 5), data).unwrap();
    let out = pool2d(&x, PoolKind::Max, 3, 1, 1).unwrap();
    assert_eq!(out.at(0, 0, 2, 2), 5.0);
}

#[test]
fn avg_pool_matches_loop_oracle() {
    let x = rand_tensor(Shape::new(1, 2, 9, 9), 23);
    let out = pool2d(&x, PoolKind::Avg, 3, 1, 1).unwrap();
    for c in 0..2 {
        for oy in 0..9 {
            for ox in 0..9 {
                let mut sum = 0.0f64;
                let mut count = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = oy as isize + ky - 1;
                        let xx = ox as isize + kx - 1;
                        if (0..9).contains(&y) && (0..9).contains(&xx) {
                            sum += x.at(0, c, y as usize, xx as usize) as f64;
                            count += 1;
                        }
                    }
                }
                let want = (sum / count as f64) as f32;
                assert!((out.at(0, c, oy, ox) - want).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn avg_pool_of_ones_is_ones_under_any_padding() {
    let x = Tensor::filled(Shape::new(1, 1, 8, 8), 1.0);
    for pad in 0..3 {
        let out = pool2d(&x, PoolKind::Avg, 5, 1, pad).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0), "pad={pad}");
    }
}

#[test]
fn global_avg_pool_reference_values() {
    let x = Tensor::filled(Shape::new(2, 3, 4, 4), -2.5);
    let out = global_avg_pool(&x);
    assert_eq!(out.shape(), Shape::new(2, 3, 1, 1));
    assert!(out.data().iter().all(|&v| v == -2.5));

    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(global_avg_pool(&x).data(), &[2.5]);
}

#[test]
fn global_avg_pool_matches_f64_oracle() {
    let x = rand_tensor(Shape::new(1, 4, 13, 7), 29);
    let out = global_avg_pool(&x);
    for c in 0..4 {
        let sum: f64 = x.plane(0, c).iter().map(|&v| v as f64).sum();
        let want = (sum / 91.0) as f32;
        let got = out.at(0, c, 0, 0);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn bilinear_identity_and_constant() {
    let x = rand_tensor(Shape::new(1, 3, 7, 9), 31);
    let same = bilinear_resize(&x, 7, 9).unwrap();
    assert_eq!(same.data(), x.data());

    let c = Tensor::filled(Shape::new(1, 2, 3, 5), 1.75);
    let up = bilinear_resize(&c, 11, 4).unwrap();
    assert!(up.data().iter().all(|&v| v == 1.75));
}

#[test]
fn bilinear_2x2_to_4x4_matches_half_pixel_formula() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let out = bilinear_resize(&x, 4, 4).unwrap();
    // Independent evaluation of src = (i + 0.5)/2 - 0.5 clamped to [0, 1],
    // interpolating v(y, x) = 2y + x.
    let coord = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let want = (2.0 * coord(oy) + coord(ox)) as f32;
            assert!(
                (out.at(0, 0, oy, ox) - want).abs() <= 1e-6,
                "({oy},{ox}): {} vs {want}",
                out.at(0, 0, oy, ox)
            );
        }
    }
}

#[test]
fn linear_identity_zero_and_oracle() {
    let x = [1.0f32, -2.0, 3.0];
    let eye = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let zeros = [0.0f32; 3];
    assert_eq!(linear(&x, &eye, &zeros, 3, 3).unwrap(), x.to_vec());

    let b = [0.5f32, -1.0];
    let w = fill_values(6, 37, FillDistribution::Uniform { limit: 1.0 });
    assert_eq!(linear(&[0.0; 3], &w, &b, 2, 3).unwrap(), b.to_vec());

    let xs = fill_values(3, 38, FillDistribution::Uniform { limit: 1.0 });
    let out = linear(&xs, &w, &b, 2, 3).unwrap();
    for o in 0..2 {
        let want: f64 = (0..3).map(|i| w[o * 3 + i] as f64 * xs[i] as f64).sum::<f64>()
            + b[o] as f64;
        assert!((out[o] as f64 - want).abs() <= 1e-6);
    }

    assert!(linear(&xs, &w, &b, 2, 4).is_err());
}
