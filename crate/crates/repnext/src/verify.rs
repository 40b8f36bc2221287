//! Equivalence audits and algebraic law checks. Every report is a
//! deterministic function of (unit, seed, trials, tolerance): trial inputs
//! come from per-trial generators derived from the master seed, and the
//! aggregation is order-independent, so parallel and serial execution
//! produce identical reports.

use serde::Serialize;

use crate::blocks::{
    BranchToggles, ChunkConvBlock, CopyConvBlock, DownsampleBlock, MetaNeXtBlock, PlainDownsample,
    Stem,
};
use crate::error::{Error, Result};
use crate::model::{build_model, fuse_model, Model, ModelConfig};
use crate::ops::{batchnorm_infer, conv2d, BNParams, ConvParams, ConvSpec, Padding};
use crate::reparam::{
    absorb_bn_into_pointwise, bn_to_scale_shift, compose_sequential_dw, embed_kernel,
    expand_dilated, fold_bn, identity_as_dwconv, large_pair, merge_parallel,
    serial_forward_pad_up_front, serial_strip_pair, small_parallel_set,
};
use crate::tensor::{chunk_channels, concat_channels, max_abs_diff, Shape, SplitMix64, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Tolerance ladder, reflecting accumulation depth: single transforms,
/// whole blocks, the full model.
pub const TOL_TRANSFORM: f64 = 1e-12;
pub const TOL_BLOCK: f64 = 1e-10;
pub const TOL_MODEL: f64 = 1e-8;

/// Outcome of one training-vs-fused comparison across seeded trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub unit: String,
    pub trials: usize,
    pub input: [usize; 4],
    pub max_abs: f64,
    pub mean_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
}

impl EquivalenceReport {
    pub fn render_line(&self) -> String {
        format!(
            "unit={} trials={} input={}x{}x{}x{} max_abs={:e} mean_abs={:e} tol={:e} pass={} seed={}",
            self.unit,
            self.trials,
            self.input[0],
            self.input[1],
            self.input[2],
            self.input[3],
            self.max_abs,
            self.mean_abs,
            self.tolerance,
            self.pass,
            self.seed
        )
    }
}

fn mean_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    sum / a.data().len() as f64
}

/// Run `trials` seeded random inputs through both forms and record the
/// worst divergence, border pixels included. `pass` holds iff
/// `max_abs <= tolerance`.
pub fn check_equivalence<F, G>(
    unit: &str,
    in_shape: Shape,
    train_form: F,
    fused_form: G,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>> + Sync,
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>> + Sync,
{
    let master = SplitMix64::new(seed);
    let evaluate = |trial: u64| -> Result<(f64, f64)> {
        let mut rng = master.derive(trial);
        let x: Tensor<f64> = Tensor::random(in_shape, &mut rng);
        let ya = train_form(&x)?;
        let yb = fused_form(&x)?;
        if ya.shape() != yb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "forms disagree on output shape: {} vs {}",
                ya.shape(),
                yb.shape()
            )));
        }
        Ok((max_abs_diff(&ya, &yb)?, mean_abs_diff(&ya, &yb)))
    };

    #[cfg(feature = "parallel")]
    let per_trial: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(evaluate)
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let per_trial: Vec<(f64, f64)> = (0..trials as u64)
        .map(evaluate)
        .collect::<Result<_>>()?;

    // Trial results arrive indexed, so this fold is independent of
    // execution order.
    let max_abs = per_trial.iter().map(|t| t.0).fold(0.0, f64::max);
    let mean_abs = if trials == 0 {
        0.0
    } else {
        per_trial.iter().map(|t| t.1).sum::<f64>() / trials as f64
    };
    Ok(EquivalenceReport {
        unit: unit.to_string(),
        trials,
        input: [in_shape.n, in_shape.c, in_shape.h, in_shape.w],
        max_abs,
        mean_abs,
        tolerance,
        pass: max_abs <= tolerance,
        seed,
    })
}

/// One algebraic law, its observed worst deviation, and its threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawCheck {
    pub name: String,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawReport {
    pub seed: u64,
    pub checks: Vec<LawCheck>,
    pub pass: bool,
}

impl LawReport {
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "law={} worst={:e} threshold={:e} pass={}\n",
                c.name, c.worst, c.threshold, c.pass
            ));
        }
        out
    }
}

fn law(name: &str, worst: f64, threshold: f64) -> LawCheck {
    LawCheck {
        name: name.to_string(),
        worst,
        threshold,
        pass: worst <= threshold,
    }
}

/// Algebraic sanity for the conv core: linearity, translation equivariance
/// on the interior, chunk/concat roundtrip, compose associativity, merge
/// commutativity. Randomized instances, fixed thresholds.
pub fn check_conv_laws(seed: u64) -> Result<LawReport> {
    let mut rng = SplitMix64::new(seed);
    let mut checks = Vec::new();

    // Linearity: conv(a*x1 + b*x2) == a*conv(x1) + b*conv(x2) for a
    // bias-free depthwise conv.
    {
        let spec = ConvSpec::depthwise_same(4, (3, 3), (1, 1), (1, 1))?;
        let conv: ConvParams = ConvParams::random(spec, false, &mut rng);
        let shape = Shape::new(1, 4, 8, 8);
        let (alpha, beta) = (2.0, -1.0);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x1: Tensor = Tensor::random(shape, &mut rng);
            let x2: Tensor = Tensor::random(shape, &mut rng);
            let mut mix = Tensor::zeros(shape);
            for i in 0..mix.data().len() {
                mix.data_mut()[i] = alpha * x1.data()[i] + beta * x2.data()[i];
            }
            let lhs = conv2d(&conv, &mix)?;
            let y1 = conv2d(&conv, &x1)?;
            let y2 = conv2d(&conv, &x2)?;
            let mut rhs = Tensor::zeros(lhs.shape());
            for i in 0..rhs.data().len() {
                rhs.data_mut()[i] = alpha * y1.data()[i] + beta * y2.data()[i];
            }
            worst = worst.max(max_abs_diff(&lhs, &rhs)?);
        }
        checks.push(law("linearity", worst, 1e-12));
    }

    // Translation equivariance: shifting the input by (1,1) shifts the
    // output identically on the interior. The tap sums are the same
    // floating-point expressions, so the interior match is exact.
    {
        let spec = ConvSpec::depthwise_same(2, (3, 3), (1, 1), (1, 1))?;
        let conv: ConvParams = ConvParams::random(spec, true, &mut rng);
        let shape = Shape::new(1, 2, 16, 16);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let x: Tensor = Tensor::random(shape, &mut rng);
            let mut shifted = Tensor::zeros(shape);
            for c in 0..2 {
                for i in 1..16 {
                    for j in 1..16 {
                        let v = x.at(0, c, i - 1, j - 1);
                        let idx = shifted.index(0, c, i, j);
                        shifted.data_mut()[idx] = v;
                    }
                }
            }
            let y = conv2d(&conv, &x)?;
            let ys = conv2d(&conv, &shifted)?;
            for c in 0..2 {
                for i in 2..15 {
                    for j in 2..15 {
                        let d = (ys.at(0, c, i, j) - y.at(0, c, i - 1, j - 1)).abs();
                        worst = worst.max(d);
                    }
                }
            }
        }
        checks.push(law("translation_equivariance", worst, 1e-12));
    }

    // Chunk/concat roundtrip is exact reassembly.
    {
        let shape = Shape::new(2, 8, 5, 5);
        let x: Tensor = Tensor::random(shape, &mut rng);
        let parts = chunk_channels(&x, 4)?;
        let back = concat_channels(&parts)?;
        checks.push(law("chunk_concat_roundtrip", max_abs_diff(&x, &back)?, 1e-12));
    }

    // Compose associativity on kernels and biases.
    {
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let mk = |k: (usize, usize), rng: &mut SplitMix64| -> Result<ConvParams> {
                let spec = ConvSpec::new(
                    3,
                    3,
                    k,
                    (1, 1),
                    Padding::new(k.0 / 2, k.0 / 2, k.1 / 2, k.1 / 2),
                    (1, 1),
                    3,
                )?;
                Ok(ConvParams::random(spec, true, rng))
            };
            let a = mk((1, 3), &mut rng)?;
            let b = mk((3, 3), &mut rng)?;
            let c = mk((3, 1), &mut rng)?;
            let left = compose_sequential_dw(&compose_sequential_dw(&a, &b)?, &c)?;
            let right = compose_sequential_dw(&a, &compose_sequential_dw(&b, &c)?)?;
            for (x, y) in left.weight.iter().zip(&right.weight) {
                worst = worst.max((x - y).abs());
            }
            let (Some(lb), Some(rb)) = (&left.bias, &right.bias) else {
                return Err(Error::SpecMismatch("compose dropped biases".to_string()));
            };
            for (x, y) in lb.iter().zip(rb) {
                worst = worst.max((x - y).abs());
            }
        }
        checks.push(law("compose_associativity", worst, 1e-15));
    }

    // Merge commutativity: parallel merge is a kernel sum, so branch order
    // must not matter beyond rounding.
    {
        let spec = ConvSpec::depthwise_same(4, (3, 3), (1, 1), (1, 1))?;
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let a: ConvParams = ConvParams::random(spec, true, &mut rng);
            let b: ConvParams = ConvParams::random(spec, false, &mut rng);
            let c: ConvParams = ConvParams::random(spec, true, &mut rng);
            let abc = merge_parallel(&[a.clone(), b.clone(), c.clone()])?;
            let cab = merge_parallel(&[c, a, b])?;
            for (x, y) in abc.weight.iter().zip(&cab.weight) {
                worst = worst.max((x - y).abs());
            }
            let (Some(lb), Some(rb)) = (&abc.bias, &cab.bias) else {
                return Err(Error::SpecMismatch("merge dropped biases".to_string()));
            };
            for (x, y) in lb.iter().zip(rb) {
                worst = worst.max((x - y).abs());
            }
        }
        checks.push(law("merge_commutativity", worst, 1e-12));
    }

    let pass = checks.iter().all(|c| c.pass);
    Ok(LawReport { seed, checks, pass })
}

/// Diagnostic for the large-strip pair: the serial 1xk_l/k_lx1 stack is
/// never merged at inference (22 weights/channel beat 121), but it MUST be
/// mergeable, and this proves it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LargeBranchReport {
    pub seed: u64,
    pub trials: usize,
    pub outer_product_max: f64,
    pub forward_max: f64,
    pub serial_weights_per_channel: u64,
    pub dense_weights_per_channel: u64,
    pub pass: bool,
}

impl LargeBranchReport {
    pub fn render_line(&self) -> String {
        format!(
            "large_branch outer_product_max={:e} forward_max={:e} serial_w={} dense_w={} trials={} pass={} seed={}",
            self.outer_product_max,
            self.forward_max,
            self.serial_weights_per_channel,
            self.dense_weights_per_channel,
            self.trials,
            self.pass,
            self.seed
        )
    }
}

pub fn check_large_branch_fusion(seed: u64) -> Result<LargeBranchReport> {
    const K: usize = 11;
    let channels = 4;
    let mut rng = SplitMix64::new(seed);
    let (row, col) = large_pair::<f64>(channels, K, true, &mut rng)?;
    let dense = compose_sequential_dw(&row, &col)?;

    // Outer-product identity: merging orthogonal strips multiplies exactly
    // one tap pair per output tap.
    let mut outer_max: f64 = 0.0;
    for c in 0..channels {
        for i in 0..K {
            for j in 0..K {
                let want = col.weight_at(c, 0, i, 0) * row.weight_at(c, 0, 0, j);
                let got = dense.weight_at(c, 0, i, j);
                outer_max = outer_max.max((got - want).abs());
            }
        }
    }

    // Forward equivalence under pad-up-front, 50 trials.
    let trials = 50;
    let master = SplitMix64::new(seed ^ 0x51AB);
    let mut forward_max: f64 = 0.0;
    for trial in 0..trials {
        let mut trng = master.derive(trial);
        let x: Tensor = Tensor::random(Shape::new(1, channels, 16, 16), &mut trng);
        let serial = serial_forward_pad_up_front(&row, &col, &x)?;
        let merged = conv2d(&dense, &x)?;
        forward_max = forward_max.max(max_abs_diff(&serial, &merged)?);
    }

    let serial_w = (row.weight.len() + col.weight.len()) as u64 / channels as u64;
    let dense_w = dense.weight.len() as u64 / channels as u64;
    let pass = outer_max <= 1e-15
        && forward_max <= 1e-12
        && serial_w == 2 * K as u64
        && dense_w == (K * K) as u64;
    Ok(LargeBranchReport {
        seed,
        trials: trials as usize,
        outer_product_max: outer_max,
        forward_max,
        serial_weights_per_channel: serial_w,
        dense_weights_per_channel: dense_w,
        pass,
    })
}

/// The full audit: every reparam transform at 1e-12, every block type at
/// 1e-10 (stem at 1e-12: two plain BN folds), the full model at 1e-8 over
/// 20 trials on 64x64 inputs, plus the law suite and the large-branch
/// diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub variant: String,
    pub seed: u64,
    pub trials: usize,
    pub units: Vec<EquivalenceReport>,
    pub laws: LawReport,
    pub large_branch: LargeBranchReport,
    pub pass: bool,
}

impl AuditReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for unit in &self.units {
            out.push_str(&unit.render_line());
            out.push('\n');
        }
        out.push_str(&self.laws.render_lines());
        out.push_str(&self.large_branch.render_line());
        out.push('\n');
        out.push_str(&format!("audit pass={}\n", self.pass));
        out
    }

    pub fn render_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

pub fn run_full_audit(
    config: &ModelConfig,
    seed: u64,
    trials: usize,
    tol_override: Option<f64>,
) -> Result<AuditReport> {
    config.validate()?;
    let tol = |default: f64| tol_override.unwrap_or(default);
    let mut units: Vec<EquivalenceReport> = Vec::new();
    let mut build = SplitMix64::new(seed ^ 0xA0D17);

    // Tier 1: single transforms at 1e-12.
    {
        let spec = ConvSpec::depthwise_same(8, (3, 3), (1, 1), (1, 1))?;
        let conv: ConvParams = ConvParams::random(spec, true, &mut build);
        let bn: BNParams = BNParams::random(8, 1e-5, &mut build);
        let folded = fold_bn(&conv, &bn)?;
        units.push(check_equivalence(
            "fold_bn",
            Shape::new(1, 8, 12, 12),
            |x| batchnorm_infer(&bn, &conv2d(&conv, x)?),
            |x| conv2d(&folded, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 1,
        )?);
    }
    {
        let bn: BNParams = BNParams::random(8, 1e-5, &mut build);
        let pw: ConvParams = ConvParams::random(ConvSpec::pointwise(8, 16)?, true, &mut build);
        let absorbed = absorb_bn_into_pointwise(&bn, &pw)?;
        units.push(check_equivalence(
            "absorb_bn_pointwise",
            Shape::new(1, 8, 6, 6),
            |x| conv2d(&pw, &batchnorm_infer(&bn, x)?),
            |x| conv2d(&absorbed, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 2,
        )?);
    }
    {
        let bn: BNParams = BNParams::random(8, 1e-5, &mut build);
        let ss = bn_to_scale_shift(&bn)?;
        units.push(check_equivalence(
            "bn_to_scale_shift",
            Shape::new(2, 8, 5, 5),
            |x| batchnorm_infer(&bn, x),
            |x| conv2d(&ss, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 3,
        )?);
    }
    {
        let spec = ConvSpec::depthwise_same(4, (3, 3), (1, 1), (1, 1))?;
        let conv: ConvParams = ConvParams::random(spec, true, &mut build);
        let embedded = embed_kernel(&conv, (7, 7))?;
        units.push(check_equivalence(
            "embed_kernel",
            Shape::new(1, 4, 9, 9),
            |x| conv2d(&conv, x),
            |x| conv2d(&embedded, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 4,
        )?);
    }
    {
        let spec = ConvSpec::new(4, 4, (2, 2), (1, 1), Padding::uniform(1), (2, 2), 4)?;
        let conv: ConvParams = ConvParams::random(spec, true, &mut build);
        let dilated = expand_dilated(&conv)?;
        units.push(check_equivalence(
            "expand_dilated",
            Shape::new(1, 4, 10, 10),
            |x| conv2d(&conv, x),
            |x| conv2d(&dilated, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 5,
        )?);
    }
    {
        let ident: ConvParams = identity_as_dwconv(6, (3, 3))?;
        units.push(check_equivalence(
            "identity_as_dwconv",
            Shape::new(1, 6, 7, 7),
            |x| Ok(x.clone()),
            |x| conv2d(&ident, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 6,
        )?);
    }
    {
        let (first, second) = serial_strip_pair::<f64>(4, 5, (1, 1), true, &mut build)?;
        let composed = compose_sequential_dw(&first, &second)?;
        units.push(check_equivalence(
            "compose_sequential",
            Shape::new(1, 4, 11, 11),
            |x| serial_forward_pad_up_front(&first, &second, x),
            |x| conv2d(&composed, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 7,
        )?);
    }
    {
        let (first, second) = serial_strip_pair::<f64>(4, 3, (2, 2), true, &mut build)?;
        let composed = compose_sequential_dw(&first, &second)?;
        units.push(check_equivalence(
            "compose_sequential_stride2",
            Shape::new(1, 4, 12, 12),
            |x| serial_forward_pad_up_front(&first, &second, x),
            |x| conv2d(&composed, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 8,
        )?);
    }
    {
        let spec = ConvSpec::depthwise_same(4, (3, 3), (1, 1), (1, 1))?;
        let branches: Vec<ConvParams> = (0..3)
            .map(|_| ConvParams::random(spec, true, &mut build))
            .collect();
        let merged = merge_parallel(&branches)?;
        units.push(check_equivalence(
            "merge_parallel",
            Shape::new(1, 4, 9, 9),
            |x| {
                let mut acc = conv2d(&branches[0], x)?;
                for b in &branches[1..] {
                    acc = acc.add(&conv2d(b, x)?)?;
                }
                Ok(acc)
            },
            |x| conv2d(&merged, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 9,
        )?);
    }
    {
        let set = small_parallel_set::<f64>(4, 3, true, &mut build)?;
        let fused = set.fuse()?;
        units.push(check_equivalence(
            "rep_small_set",
            Shape::new(1, 4, 10, 10),
            |x| set.forward(x),
            |x| conv2d(&fused, x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 10,
        )?);
    }

    // Tier 2: block types at 1e-10 (stem at 1e-12).
    {
        let block =
            ChunkConvBlock::<f64>::random(16, 3, 7, 11, BranchToggles::default(), true, &mut build)?;
        let fused = block.fuse()?;
        units.push(check_equivalence(
            "chunk_conv_block",
            Shape::new(1, 16, 12, 12),
            |x| block.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_BLOCK),
            seed + 11,
        )?);
    }
    {
        let block = CopyConvBlock::<f64>::random(8, 3, 7, None, true, &mut build)?;
        let fused = block.fuse()?;
        units.push(check_equivalence(
            "copy_conv_block",
            Shape::new(1, 8, 14, 14),
            |x| block.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_BLOCK),
            seed + 12,
        )?);
    }
    {
        let block = MetaNeXtBlock::<f64>::random(
            16,
            3,
            7,
            11,
            BranchToggles::default(),
            32,
            true,
            1e-5,
            &mut build,
        )?;
        let fused = block.fuse()?;
        units.push(check_equivalence(
            "metanext_block",
            Shape::new(1, 16, 12, 12),
            |x| block.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_BLOCK),
            seed + 13,
        )?);
    }
    {
        let block = DownsampleBlock::<f64>::random(8, 16, 3, 7, 32, true, 1e-5, &mut build)?;
        let fused = block.fuse()?;
        units.push(check_equivalence(
            "downsample_block",
            Shape::new(1, 8, 14, 14),
            |x| block.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_BLOCK),
            seed + 14,
        )?);
    }
    {
        let block = PlainDownsample::<f64>::random(16, 32, true, 1e-5, &mut build)?;
        let fused = block.fuse()?;
        units.push(check_equivalence(
            "plain_downsample",
            Shape::new(1, 16, 14, 14),
            |x| block.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_BLOCK),
            seed + 15,
        )?);
    }
    {
        let stem = Stem::<f64>::random(16, true, 1e-5, &mut build)?;
        let fused = stem.fuse()?;
        units.push(check_equivalence(
            "stem",
            Shape::new(1, 3, 16, 16),
            |x| stem.forward(x),
            |x| fused.forward(x),
            trials,
            tol(TOL_TRANSFORM),
            seed + 16,
        )?);
    }

    // Tier 3: the configured model at 1e-8, fixed at 20 trials on 64x64
    // inputs regardless of the tier-1/2 trial count (each trial is two
    // full forward passes).
    {
        let model: Model<f64> = build_model(config, seed ^ 0x4D0DE1)?;
        let fused = fuse_model(&model)?;
        units.push(check_equivalence(
            &format!("model_{}", config.variant),
            Shape::new(1, 3, 64, 64),
            |x| model.forward(x),
            |x| fused.forward(x),
            20,
            tol(TOL_MODEL),
            seed + 17,
        )?);
    }

    let laws = check_conv_laws(seed)?;
    let large_branch = check_large_branch_fusion(seed)?;
    let pass = units.iter().all(|u| u.pass) && laws.pass && large_branch.pass;
    Ok(AuditReport {
        variant: config.variant.clone(),
        seed,
        trials,
        units,
        laws,
        large_branch,
        pass,
    })
}
