//! Property tests for the algebraic invariants the fusion machinery relies
//! on. Structures are generated from proptest-chosen seeds through the
//! library's own RNG so failures shrink to a (seed, dimensions) pair.

use proptest::prelude::*;

use repnext::model::weights::{load_tensor, save_tensor, LoadedTensor};
use repnext::ops::{
    batchnorm_infer, conv2d, conv2d_seq, output_shape, BNParams, ConvParams, ConvSpec,
};
use repnext::reparam::{
    compose_sequential_dw, embed_kernel, expand_dilated, fold_bn, merge_parallel,
};
use repnext::tensor::{chunk_channels, concat_channels, max_abs_diff, Shape, SplitMix64, Tensor};

fn dw_same(channels: usize, k: (usize, usize), seed: u64, with_bias: bool) -> ConvParams<f64> {
    let spec = ConvSpec::depthwise_same(channels, k, (1, 1), (1, 1)).unwrap();
    ConvParams::random(spec, with_bias, &mut SplitMix64::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Folding inference-mode batch norm into a depthwise conv is exact to
    /// 1e-12 on bounded random weights.
    #[test]
    fn fold_bn_preserves_forward(
        channels in 1usize..6,
        half_k in 0usize..3,
        hw in 4usize..10,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let mut rng = SplitMix64::new(seed);
        let conv = dw_same(channels, (k, k), rng.next_u64(), true);
        let bn: BNParams<f64> = BNParams::random(channels, 1e-5, &mut rng);
        let folded = fold_bn(&conv, &bn).unwrap();
        let x: Tensor<f64> = Tensor::random(Shape::new(1, channels, hw, hw), &mut rng);
        let want = batchnorm_infer(&bn, &conv2d(&conv, &x).unwrap()).unwrap();
        let got = conv2d(&folded, &x).unwrap();
        prop_assert!(max_abs_diff(&want, &got).unwrap() <= 1e-12);
    }

    /// Sequential composition of depthwise kernels is associative.
    #[test]
    fn compose_is_associative(
        channels in 1usize..5,
        ka in (1usize..4, 1usize..4),
        kb in (1usize..4, 1usize..4),
        kc in (1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        let mut rng = SplitMix64::new(seed);
        let mk = |k: (usize, usize), rng: &mut SplitMix64| {
            let spec = ConvSpec::new(
                channels,
                channels,
                k,
                (1, 1),
                repnext::ops::Padding::new(k.0 / 2, k.0 / 2, k.1 / 2, k.1 / 2),
                (1, 1),
                channels,
            )
            .unwrap();
            ConvParams::<f64>::random(spec, true, rng)
        };
        let a = mk(ka, &mut rng);
        let b = mk(kb, &mut rng);
        let c = mk(kc, &mut rng);
        let left = compose_sequential_dw(&compose_sequential_dw(&a, &b).unwrap(), &c).unwrap();
        let right = compose_sequential_dw(&a, &compose_sequential_dw(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left.spec, right.spec);
        for (x, y) in left.weight.iter().zip(&right.weight) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
        let (lb, rb) = (left.bias.unwrap(), right.bias.unwrap());
        for (x, y) in lb.iter().zip(&rb) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
    }

    /// Parallel merge is order-independent (a kernel-space sum).
    #[test]
    fn merge_is_commutative(
        channels in 1usize..5,
        half_k in 0usize..3,
        rotation in 0usize..4,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let mut rng = SplitMix64::new(seed);
        let branches: Vec<ConvParams<f64>> = (0..4)
            .map(|_| dw_same(channels, (k, k), rng.next_u64(), true))
            .collect();
        let mut rotated = branches.clone();
        rotated.rotate_left(rotation);
        let a = merge_parallel(&branches).unwrap();
        let b = merge_parallel(&rotated).unwrap();
        for (x, y) in a.weight.iter().zip(&b.weight) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
        for (x, y) in a.bias.unwrap().iter().zip(&b.bias.unwrap()) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
    }

    /// Embedding a kernel into a larger canvas moves every tap to its
    /// centered offset and zero-fills the rest, exactly.
    #[test]
    fn embed_preserves_taps(
        channels in 1usize..5,
        half_k in 0usize..2,
        extra in 1usize..3,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let canvas = k + 2 * extra;
        let conv = dw_same(channels, (k, k), seed, true);
        let embedded = embed_kernel(&conv, (canvas, canvas)).unwrap();
        prop_assert_eq!(embedded.spec.kernel, (canvas, canvas));
        let off = (canvas - k) / 2;
        for c in 0..channels {
            for u in 0..canvas {
                for v in 0..canvas {
                    let got = embedded.weight_at(c, 0, u, v);
                    let inside = (off..off + k).contains(&u) && (off..off + k).contains(&v);
                    let want = if inside {
                        conv.weight_at(c, 0, u - off, v - off)
                    } else {
                        0.0
                    };
                    prop_assert_eq!(got, want);
                }
            }
        }
        prop_assert_eq!(embedded.bias, conv.bias);
    }

    /// Expanding a dilated kernel places each tap at its dilated offset and
    /// zero-fills the gaps, exactly.
    #[test]
    fn expand_dilated_preserves_taps(
        channels in 1usize..5,
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        // d=2 keeps the effective extent odd for both k=2 and k=3.
        let d = 2;
        let spec = ConvSpec::depthwise_same(channels, (k, k), (1, 1), (d, d)).unwrap();
        let conv = ConvParams::<f64>::random(spec, true, &mut SplitMix64::new(seed));
        let expanded = expand_dilated(&conv).unwrap();
        let extent = (k - 1) * d + 1;
        prop_assert_eq!(expanded.spec.kernel, (extent, extent));
        prop_assert_eq!(expanded.spec.dilation, (1, 1));
        for c in 0..channels {
            for u in 0..extent {
                for v in 0..extent {
                    let got = expanded.weight_at(c, 0, u, v);
                    let want = if u % d == 0 && v % d == 0 {
                        conv.weight_at(c, 0, u / d, v / d)
                    } else {
                        0.0
                    };
                    prop_assert_eq!(got, want);
                }
            }
        }
    }

    /// The composed serial kernel equals running the two stages in
    /// sequence under pad-up-front, within 1e-12 on the forward.
    #[test]
    fn compose_matches_two_stage_forward(
        channels in 1usize..4,
        half_k in 0usize..3,
        hw in 8usize..14,
        seed in any::<u64>(),
    ) {
        // Strips take symmetric same-padding, so their extent is odd.
        let k = 2 * half_k + 1;
        let mut rng = SplitMix64::new(seed);
        let (row, col) = repnext::reparam::serial_strip_pair::<f64>(
            channels, k, (1, 1), true, &mut rng,
        ).unwrap();
        let merged = compose_sequential_dw(&row, &col).unwrap();
        let x: Tensor<f64> = Tensor::random(Shape::new(1, channels, hw, hw), &mut rng);
        let staged = repnext::reparam::serial_forward_pad_up_front(&row, &col, &x).unwrap();
        let direct = conv2d(&merged, &x).unwrap();
        prop_assert!(max_abs_diff(&staged, &direct).unwrap() <= 1e-12);
    }

    /// chunk then concat reassembles the input bitwise for any divisor.
    #[test]
    fn chunk_concat_roundtrip(
        n in 1usize..3,
        group in 1usize..5,
        parts in 1usize..5,
        hw in 1usize..6,
        seed in any::<u64>(),
    ) {
        let channels = group * parts;
        let mut rng = SplitMix64::new(seed);
        let x: Tensor<f64> = Tensor::random(Shape::new(n, channels, hw, hw), &mut rng);
        let back = concat_channels(&chunk_channels(&x, parts).unwrap()).unwrap();
        prop_assert_eq!(x.data(), back.data());
    }

    /// output_shape's arithmetic agrees with the shape the kernel loop
    /// actually produces.
    #[test]
    fn declared_output_shape_is_real(
        channels in 1usize..4,
        half_k in 0usize..3,
        stride in 1usize..3,
        hw in 7usize..12,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let spec = ConvSpec::depthwise_same(channels, (k, k), (stride, stride), (1, 1)).unwrap();
        let conv = ConvParams::<f64>::random(spec, true, &mut SplitMix64::new(seed));
        let mut rng = SplitMix64::new(seed ^ 1);
        let x: Tensor<f64> = Tensor::random(Shape::new(1, channels, hw, hw), &mut rng);
        let declared = output_shape(&conv.spec, x.shape()).unwrap();
        let real = conv2d(&conv, &x).unwrap().shape();
        prop_assert_eq!(declared, real);
    }

    /// For any input with H and W divisible by 32, the stage traces form
    /// the 1/4, 1/8, 1/16, 1/32 pyramid at the configured widths.
    #[test]
    fn stage_pyramid_holds_for_any_divisible_input(
        h32 in 1usize..8,
        w32 in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut config = repnext::model::ModelConfig::preset("m1").unwrap();
        config.variant = "pyramid".to_string();
        config.stage_widths = [8, 8, 16, 16];
        config.stage_depths = [1, 1, 1, 1];
        config.classes = 4;
        let model: repnext::model::Model<f32> =
            repnext::model::build_model(&config, seed).unwrap();
        let (h, w) = (32 * h32, 32 * w32);
        let traces = model.stage_traces(Shape::new(1, 3, h, w)).unwrap();
        prop_assert_eq!(traces.len(), 4);
        for (i, trace) in traces.iter().enumerate() {
            prop_assert_eq!(trace.channels, config.stage_widths[i]);
            prop_assert_eq!(trace.h, h / (4 << i));
            prop_assert_eq!(trace.w, w / (4 << i));
        }
    }

    /// Tensor file roundtrips are bitwise lossless for both dtypes.
    #[test]
    fn tensor_file_roundtrip_bitwise(
        n in 1usize..3,
        c in 1usize..5,
        hw in 1usize..6,
        double in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rpnx");
        let mut rng = SplitMix64::new(seed);
        let shape = Shape::new(n, c, hw, hw);
        if double {
            let x: Tensor<f64> = Tensor::random(shape, &mut rng);
            save_tensor(&path, "t", &x).unwrap();
            match load_tensor(&path).unwrap() {
                (name, LoadedTensor::Double(y)) => {
                    prop_assert_eq!(name, "t");
                    prop_assert_eq!(x.data(), y.data());
                }
                _ => prop_assert!(false, "dtype changed in roundtrip"),
            }
        } else {
            let x: Tensor<f32> = Tensor::random(shape, &mut rng);
            save_tensor(&path, "t", &x).unwrap();
            match load_tensor(&path).unwrap() {
                (name, LoadedTensor::Single(y)) => {
                    prop_assert_eq!(name, "t");
                    prop_assert_eq!(x.data(), y.data());
                }
                _ => prop_assert!(false, "dtype changed in roundtrip"),
            }
        }
    }
}

#[cfg(feature = "parallel")]
proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The rayon path is bitwise identical to the sequential reference:
    /// each output element is an independent tap sum, so scheduling cannot
    /// change the arithmetic.
    #[test]
    fn parallel_conv_is_bitwise_sequential(
        channels in 1usize..5,
        half_k in 0usize..3,
        stride in 1usize..3,
        hw in 6usize..12,
        seed in any::<u64>(),
    ) {
        let k = 2 * half_k + 1;
        let spec = ConvSpec::depthwise_same(channels, (k, k), (stride, stride), (1, 1)).unwrap();
        let conv = ConvParams::<f64>::random(spec, true, &mut SplitMix64::new(seed));
        let mut rng = SplitMix64::new(seed ^ 2);
        let x: Tensor<f64> = Tensor::random(Shape::new(2, channels, hw, hw), &mut rng);
        let par = repnext::ops::conv2d_par(&conv, &x).unwrap();
        let seq = conv2d_seq(&conv, &x).unwrap();
        prop_assert_eq!(par.data(), seq.data());
    }
}
