//! Composite blocks: chunk convolution, copy convolution, channel mixer,
//! MetaNeXt block, downsampling block, and the stem. Each has a training
//! form and a fused inference form; `fuse()` returns a new block rather than
//! mutating, so blocks stay immutable after construction.
//!
//! Every block exposes four parallel views that the tests hold against each
//! other: `forward` (fast path), `forward_counting` (same arithmetic, counts
//! each multiply), `macs` (closed-form count at a shape), and
//! `param_counts` (closed-form sizes; serialization enumerates the stored
//! vectors independently).

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_infer, batchnorm_macs, conv2d, conv2d_counting, gelu, output_shape, BNParams,
    ConvParams, ConvSpec, Padding,
};
use crate::reparam::{
    absorb_bn_into_pointwise, bn_to_scale_shift, fold_bn, fuse_rep_medium, fuse_rep_small,
    large_pair, medium_set, small_parallel_set, small_serial_set, RepBranch, RepBranchSet,
};
use crate::tensor::{chunk_channels, concat_channels, Element, Shape, SplitMix64, Tensor};

/// Learnable-parameter tally, split the way the reports print it. `norm`
/// counts gamma and beta only; running statistics are buffers, not
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct ParamCount {
    pub weights: u64,
    pub biases: u64,
    pub norm: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.weights + self.biases + self.norm
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, rhs: ParamCount) -> ParamCount {
        ParamCount {
            weights: self.weights + rhs.weights,
            biases: self.biases + rhs.biases,
            norm: self.norm + rhs.norm,
        }
    }
}

impl std::ops::AddAssign for ParamCount {
    fn add_assign(&mut self, rhs: ParamCount) {
        *self = *self + rhs;
    }
}

fn conv_param_count<T: Element>(conv: &ConvParams<T>) -> ParamCount {
    let (weights, biases) = conv.param_counts();
    ParamCount { weights, biases, norm: 0 }
}

/// Descriptor passed alongside each array during a parameter walk.
/// `buffer` marks non-learnable state (batch-norm running statistics):
/// serialized with everything else, excluded from parameter counts.
#[derive(Debug, Clone, Copy)]
pub struct ParamMeta<'d> {
    pub dims: &'d [usize],
    pub buffer: bool,
}

/// Mutable walk over every stored parameter array, in a fixed traversal
/// order with stable dotted names. Serialization, loading, and tests that
/// need to rewrite weights all go through this.
pub type ParamFn<'a, T> = &'a mut dyn FnMut(String, &mut Vec<T>, ParamMeta<'_>) -> Result<()>;

fn visit_conv<T: Element>(conv: &mut ConvParams<T>, prefix: &str, f: ParamFn<T>) -> Result<()> {
    let spec = conv.spec;
    let dims = [
        spec.out_channels,
        spec.in_per_group(),
        spec.kernel.0,
        spec.kernel.1,
    ];
    let meta = ParamMeta { dims: &dims, buffer: false };
    f(format!("{prefix}.weight"), &mut conv.weight, meta)?;
    if let Some(bias) = &mut conv.bias {
        let meta = ParamMeta { dims: &[spec.out_channels], buffer: false };
        f(format!("{prefix}.bias"), bias, meta)?;
    }
    Ok(())
}

fn visit_bn<T: Element>(bn: &mut BNParams<T>, prefix: &str, f: ParamFn<T>) -> Result<()> {
    let c = [bn.channels()];
    let learned = ParamMeta { dims: &c, buffer: false };
    let stat = ParamMeta { dims: &c, buffer: true };
    f(format!("{prefix}.gamma"), &mut bn.gamma, learned)?;
    f(format!("{prefix}.beta"), &mut bn.beta, learned)?;
    f(format!("{prefix}.running_mean"), &mut bn.running_mean, stat)?;
    f(format!("{prefix}.running_var"), &mut bn.running_var, stat)
}

fn visit_branch<T: Element>(branch: &mut RepBranch<T>, prefix: &str, f: ParamFn<T>) -> Result<()> {
    match branch {
        RepBranch::Identity { .. } => Ok(()),
        RepBranch::Single(c) => visit_conv(c, prefix, f),
        RepBranch::Serial(a, b) => {
            visit_conv(a, &format!("{prefix}.s0"), f)?;
            visit_conv(b, &format!("{prefix}.s1"), f)
        }
    }
}

/// Normalization state of a block: live batch norm in training form, and
/// after fusion either gone entirely (folded into a neighboring conv) or
/// materialized as a depthwise 1x1 scale-shift where a residual taps the
/// normalized value directly.
#[derive(Debug, Clone, PartialEq)]
pub enum Norm<T: Element = f64> {
    Bn(BNParams<T>),
    ScaleShift(ConvParams<T>),
    Folded,
}

impl<T: Element> Norm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Norm::Bn(bn) => batchnorm_infer(bn, x),
            Norm::ScaleShift(conv) => conv2d(conv, x),
            Norm::Folded => Ok(x.clone()),
        }
    }

    fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        match self {
            Norm::Bn(bn) => {
                let y = batchnorm_infer(bn, x)?;
                let macs = batchnorm_macs(x.shape());
                Ok((y, macs))
            }
            Norm::ScaleShift(conv) => conv2d_counting(conv, x),
            Norm::Folded => Ok((x.clone(), 0)),
        }
    }

    fn macs(&self, shape: Shape) -> u64 {
        match self {
            Norm::Bn(_) | Norm::ScaleShift(_) => batchnorm_macs(shape),
            Norm::Folded => 0,
        }
    }

    fn param_counts(&self) -> ParamCount {
        match self {
            Norm::Bn(bn) => ParamCount { weights: 0, biases: 0, norm: 2 * bn.channels() as u64 },
            Norm::ScaleShift(conv) => conv_param_count(conv),
            Norm::Folded => ParamCount::default(),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        match self {
            Norm::Bn(bn) => visit_bn(bn, prefix, f),
            Norm::ScaleShift(conv) => visit_conv(conv, &format!("{prefix}.scale_shift"), f),
            Norm::Folded => Ok(()),
        }
    }

    fn cast<U: Element>(&self) -> Norm<U> {
        match self {
            Norm::Bn(bn) => Norm::Bn(bn.cast()),
            Norm::ScaleShift(c) => Norm::ScaleShift(c.cast()),
            Norm::Folded => Norm::Folded,
        }
    }
}

/// One channel group of a chunk or copy convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkGroup<T: Element = f64> {
    /// Pass-through (the chunk conv's first group, or a toggled-off group).
    Identity,
    /// Training form: parallel branch set.
    Branches(RepBranchSet<T>),
    /// Inference form: the branches collapsed to one depthwise conv.
    Fused(ConvParams<T>),
    /// The large-strip pair; serial in both forms, evaluated per stage with
    /// each stage's own padding (its inference accounting is 2*k_l per
    /// channel, which is the point of keeping it serial).
    SerialPair(ConvParams<T>, ConvParams<T>),
}

impl<T: Element> ChunkGroup<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ChunkGroup::Identity => Ok(x.clone()),
            ChunkGroup::Branches(set) => set.forward(x),
            ChunkGroup::Fused(conv) => conv2d(conv, x),
            ChunkGroup::SerialPair(a, b) => conv2d(b, &conv2d(a, x)?),
        }
    }

    fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        match self {
            ChunkGroup::Identity => Ok((x.clone(), 0)),
            ChunkGroup::Branches(set) => set.forward_counting(x),
            ChunkGroup::Fused(conv) => conv2d_counting(conv, x),
            ChunkGroup::SerialPair(a, b) => {
                let (mid, m1) = conv2d_counting(a, x)?;
                let (out, m2) = conv2d_counting(b, &mid)?;
                Ok((out, m1 + m2))
            }
        }
    }

    fn macs(&self, in_shape: Shape) -> Result<u64> {
        match self {
            ChunkGroup::Identity => Ok(0),
            ChunkGroup::Branches(set) => set.macs(in_shape),
            ChunkGroup::Fused(conv) => conv.spec.macs(in_shape),
            ChunkGroup::SerialPair(a, b) => {
                let mid = output_shape(&a.spec, in_shape)?;
                Ok(a.spec.macs(in_shape)? + b.spec.macs(mid)?)
            }
        }
    }

    fn param_counts(&self) -> ParamCount {
        match self {
            ChunkGroup::Identity => ParamCount::default(),
            ChunkGroup::Branches(set) => {
                let (weights, biases) = set.param_counts();
                ParamCount { weights, biases, norm: 0 }
            }
            ChunkGroup::Fused(conv) => conv_param_count(conv),
            ChunkGroup::SerialPair(a, b) => conv_param_count(a) + conv_param_count(b),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        match self {
            ChunkGroup::Identity => Ok(()),
            ChunkGroup::Branches(set) => {
                for (i, branch) in set.branches.iter_mut().enumerate() {
                    visit_branch(branch, &format!("{prefix}.b{i}"), f)?;
                }
                Ok(())
            }
            ChunkGroup::Fused(conv) => visit_conv(conv, &format!("{prefix}.fused"), f),
            ChunkGroup::SerialPair(a, b) => {
                visit_conv(a, &format!("{prefix}.s0"), f)?;
                visit_conv(b, &format!("{prefix}.s1"), f)
            }
        }
    }

    fn fuse(&self) -> Result<ChunkGroup<T>> {
        Ok(match self {
            ChunkGroup::Identity => ChunkGroup::Identity,
            ChunkGroup::Branches(set) => ChunkGroup::Fused(set.fuse()?),
            ChunkGroup::Fused(_) => return Err(Error::AlreadyFused),
            ChunkGroup::SerialPair(a, b) => ChunkGroup::SerialPair(a.clone(), b.clone()),
        })
    }

    fn cast<U: Element>(&self) -> ChunkGroup<U> {
        match self {
            ChunkGroup::Identity => ChunkGroup::Identity,
            ChunkGroup::Branches(set) => ChunkGroup::Branches(set.cast()),
            ChunkGroup::Fused(c) => ChunkGroup::Fused(c.cast()),
            ChunkGroup::SerialPair(a, b) => ChunkGroup::SerialPair(a.cast(), b.cast()),
        }
    }
}

/// Which multi-branch groups a block instantiates; a disabled group becomes
/// a pass-through on its channel slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchToggles {
    #[serde(default = "toggle_default")]
    pub small: bool,
    #[serde(default = "toggle_default")]
    pub medium: bool,
    #[serde(default = "toggle_default")]
    pub large: bool,
}

fn toggle_default() -> bool {
    true
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles { small: true, medium: true, large: true }
    }
}

/// Feature-scale-preserving token mixer: channels split four ways into
/// identity / small / medium / large-strip groups, processed in parallel,
/// concatenated back in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkConvBlock<T: Element = f64> {
    pub channels: usize,
    pub small: ChunkGroup<T>,
    pub medium: ChunkGroup<T>,
    pub large: ChunkGroup<T>,
    fused: bool,
}

impl<T: Element> ChunkConvBlock<T> {
    pub fn new(
        channels: usize,
        small: ChunkGroup<T>,
        medium: ChunkGroup<T>,
        large: ChunkGroup<T>,
    ) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::NonDivisibleChannels { channels, parts: 4 });
        }
        Ok(ChunkConvBlock { channels, small, medium, large, fused: false })
    }

    pub fn random(
        channels: usize,
        k_s: usize,
        k_m: usize,
        k_l: usize,
        toggles: BranchToggles,
        with_bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::NonDivisibleChannels { channels, parts: 4 });
        }
        let group = channels / 4;
        let small = if toggles.small {
            ChunkGroup::Branches(small_parallel_set(group, k_s, with_bias, rng)?)
        } else {
            ChunkGroup::Identity
        };
        let medium = if toggles.medium {
            ChunkGroup::Branches(medium_set(group, k_m, (1, 1), with_bias, rng)?)
        } else {
            ChunkGroup::Identity
        };
        let large = if toggles.large {
            let (row, col) = large_pair(group, k_l, with_bias, rng)?;
            ChunkGroup::SerialPair(row, col)
        } else {
            ChunkGroup::Identity
        };
        Ok(ChunkConvBlock { channels, small, medium, large, fused: false })
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        if in_shape.c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "chunk conv expects {} channels, got {}",
                self.channels, in_shape.c
            )));
        }
        Ok(in_shape)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.out_shape(x.shape())?;
        let parts = chunk_channels(x, 4)?;
        let ys = vec![
            parts[0].clone(),
            self.small.forward(&parts[1])?,
            self.medium.forward(&parts[2])?,
            self.large.forward(&parts[3])?,
        ];
        concat_channels(&ys)
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.out_shape(x.shape())?;
        let parts = chunk_channels(x, 4)?;
        let (ys1, m1) = self.small.forward_counting(&parts[1])?;
        let (ys2, m2) = self.medium.forward_counting(&parts[2])?;
        let (ys3, m3) = self.large.forward_counting(&parts[3])?;
        let out = concat_channels(&[parts[0].clone(), ys1, ys2, ys3])?;
        Ok((out, m1 + m2 + m3))
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let group_shape = Shape::new(in_shape.n, self.channels / 4, in_shape.h, in_shape.w);
        Ok(self.small.macs(group_shape)?
            + self.medium.macs(group_shape)?
            + self.large.macs(group_shape)?)
    }

    pub fn param_counts(&self) -> ParamCount {
        self.small.param_counts() + self.medium.param_counts() + self.large.param_counts()
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        self.small.visit_params(&format!("{prefix}.small"), f)?;
        self.medium.visit_params(&format!("{prefix}.medium"), f)?;
        self.large.visit_params(&format!("{prefix}.large"), f)
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        Ok(ChunkConvBlock {
            channels: self.channels,
            small: self.small.fuse()?,
            medium: self.medium.fuse()?,
            large: self.large.fuse()?,
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> ChunkConvBlock<U> {
        ChunkConvBlock {
            channels: self.channels,
            small: self.small.cast(),
            medium: self.medium.cast(),
            large: self.large.cast(),
            fused: self.fused,
        }
    }
}

/// Downsampling token mixer: small and medium groups each consume the whole
/// input at stride 2 and their outputs concatenate, doubling the channels.
/// An optional 1x1 then adjusts to a custom width.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyConvBlock<T: Element = f64> {
    pub in_channels: usize,
    pub small: ChunkGroup<T>,
    pub medium: ChunkGroup<T>,
    pub adjust: Option<ConvParams<T>>,
    fused: bool,
}

impl<T: Element> CopyConvBlock<T> {
    pub fn random(
        in_channels: usize,
        k_s: usize,
        k_m: usize,
        adjust_to: Option<usize>,
        with_bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let small = ChunkGroup::Branches(small_serial_set(in_channels, k_s, with_bias, rng)?);
        let medium = ChunkGroup::Branches(medium_set(in_channels, k_m, (2, 2), with_bias, rng)?);
        let adjust = match adjust_to {
            Some(out) => Some(ConvParams::random(
                ConvSpec::pointwise(2 * in_channels, out)?,
                with_bias,
                rng,
            )),
            None => None,
        };
        Ok(CopyConvBlock { in_channels, small, medium, adjust, fused: false })
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_channels(&self) -> usize {
        self.adjust
            .as_ref()
            .map_or(2 * self.in_channels, |a| a.spec.out_channels)
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        if in_shape.c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "copy conv expects {} channels, got {}",
                self.in_channels, in_shape.c
            )));
        }
        if in_shape.h % 2 != 0 || in_shape.w % 2 != 0 {
            return Err(Error::OddSpatial { h: in_shape.h, w: in_shape.w });
        }
        Ok(Shape::new(
            in_shape.n,
            self.out_channels(),
            in_shape.h / 2,
            in_shape.w / 2,
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.out_shape(x.shape())?;
        let ys = vec![self.small.forward(x)?, self.medium.forward(x)?];
        let cat = concat_channels(&ys)?;
        match &self.adjust {
            Some(a) => conv2d(a, &cat),
            None => Ok(cat),
        }
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.out_shape(x.shape())?;
        let (ys, ms) = self.small.forward_counting(x)?;
        let (ym, mm) = self.medium.forward_counting(x)?;
        let cat = concat_channels(&[ys, ym])?;
        match &self.adjust {
            Some(a) => {
                let (out, ma) = conv2d_counting(a, &cat)?;
                Ok((out, ms + mm + ma))
            }
            None => Ok((cat, ms + mm)),
        }
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let mut macs = self.small.macs(in_shape)? + self.medium.macs(in_shape)?;
        if let Some(a) = &self.adjust {
            let cat = Shape::new(in_shape.n, 2 * self.in_channels, in_shape.h / 2, in_shape.w / 2);
            macs += a.spec.macs(cat)?;
        }
        Ok(macs)
    }

    pub fn param_counts(&self) -> ParamCount {
        let mut count = self.small.param_counts() + self.medium.param_counts();
        if let Some(a) = &self.adjust {
            count += conv_param_count(a);
        }
        count
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        self.small.visit_params(&format!("{prefix}.small"), f)?;
        self.medium.visit_params(&format!("{prefix}.medium"), f)?;
        if let Some(a) = &mut self.adjust {
            visit_conv(a, &format!("{prefix}.adjust"), f)?;
        }
        Ok(())
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        let small = match &self.small {
            ChunkGroup::Branches(set) => ChunkGroup::Fused(fuse_rep_small(set)?),
            other => other.fuse()?,
        };
        let medium = match &self.medium {
            ChunkGroup::Branches(set) => ChunkGroup::Fused(fuse_rep_medium(set)?),
            other => other.fuse()?,
        };
        Ok(CopyConvBlock {
            in_channels: self.in_channels,
            small,
            medium,
            adjust: self.adjust.clone(),
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> CopyConvBlock<U> {
        CopyConvBlock {
            in_channels: self.in_channels,
            small: self.small.cast(),
            medium: self.medium.cast(),
            adjust: self.adjust.as_ref().map(|a| a.cast()),
            fused: self.fused,
        }
    }
}

/// Per-pixel cross-channel mixing: expand 1x1, GELU, squeeze 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixer<T: Element = f64> {
    pub expand: ConvParams<T>,
    pub squeeze: ConvParams<T>,
}

impl<T: Element> ChannelMixer<T> {
    pub fn new(expand: ConvParams<T>, squeeze: ConvParams<T>) -> Result<Self> {
        if expand.spec.out_channels != squeeze.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expand produces {} channels, squeeze consumes {}",
                expand.spec.out_channels, squeeze.spec.in_channels
            )));
        }
        Ok(ChannelMixer { expand, squeeze })
    }

    pub fn random(
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        with_bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let expand = ConvParams::random(ConvSpec::pointwise(in_channels, hidden)?, with_bias, rng);
        let squeeze =
            ConvParams::random(ConvSpec::pointwise(hidden, out_channels)?, with_bias, rng);
        ChannelMixer::new(expand, squeeze)
    }

    pub fn in_channels(&self) -> usize {
        self.expand.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.squeeze.spec.out_channels
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(&self.squeeze, &gelu(&conv2d(&self.expand, x)?))
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let (up, m1) = conv2d_counting(&self.expand, x)?;
        let (out, m2) = conv2d_counting(&self.squeeze, &gelu(&up))?;
        Ok((out, m1 + m2))
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let mid = output_shape(&self.expand.spec, in_shape)?;
        Ok(self.expand.spec.macs(in_shape)? + self.squeeze.spec.macs(mid)?)
    }

    pub fn param_counts(&self) -> ParamCount {
        conv_param_count(&self.expand) + conv_param_count(&self.squeeze)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        visit_conv(&mut self.expand, &format!("{prefix}.expand"), f)?;
        visit_conv(&mut self.squeeze, &format!("{prefix}.squeeze"), f)
    }

    pub fn cast<U: Element>(&self) -> ChannelMixer<U> {
        ChannelMixer { expand: self.expand.cast(), squeeze: self.squeeze.cast() }
    }
}

/// Feature-scale-preserving block: Y = X + Mixer(Norm(ChunkConv(X))).
/// Fusion folds the norm into the mixer's expand conv, which is uniform
/// across all four chunk groups (the identity group has no conv of its own
/// to fold into).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNeXtBlock<T: Element = f64> {
    pub token_mixer: ChunkConvBlock<T>,
    pub norm: Norm<T>,
    pub mixer: ChannelMixer<T>,
    fused: bool,
}

impl<T: Element> MetaNeXtBlock<T> {
    pub fn new(
        token_mixer: ChunkConvBlock<T>,
        norm: Norm<T>,
        mixer: ChannelMixer<T>,
    ) -> Result<Self> {
        let c = token_mixer.channels;
        if mixer.in_channels() != c || mixer.out_channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "channel mixer {}->{} does not preserve block width {}",
                mixer.in_channels(),
                mixer.out_channels(),
                c
            )));
        }
        Ok(MetaNeXtBlock { token_mixer, norm, mixer, fused: false })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random(
        channels: usize,
        k_s: usize,
        k_m: usize,
        k_l: usize,
        toggles: BranchToggles,
        hidden: usize,
        with_bias: bool,
        bn_eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let token_mixer =
            ChunkConvBlock::random(channels, k_s, k_m, k_l, toggles, with_bias, rng)?;
        let norm = Norm::Bn(BNParams::random(channels, T::from_double(bn_eps), rng));
        let mixer = ChannelMixer::random(channels, hidden, channels, with_bias, rng)?;
        MetaNeXtBlock::new(token_mixer, norm, mixer)
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        self.token_mixer.out_shape(in_shape)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mixed = self.token_mixer.forward(x)?;
        let normed = self.norm.forward(&mixed)?;
        x.add(&self.mixer.forward(&normed)?)
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let (mixed, m1) = self.token_mixer.forward_counting(x)?;
        let (normed, m2) = self.norm.forward_counting(&mixed)?;
        let (out, m3) = self.mixer.forward_counting(&normed)?;
        Ok((x.add(&out)?, m1 + m2 + m3))
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        Ok(self.token_mixer.macs(in_shape)?
            + self.norm.macs(in_shape)
            + self.mixer.macs(in_shape)?)
    }

    pub fn param_counts(&self) -> ParamCount {
        self.token_mixer.param_counts() + self.norm.param_counts() + self.mixer.param_counts()
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        self.token_mixer.visit_params(&format!("{prefix}.token_mixer"), f)?;
        self.norm.visit_params(&format!("{prefix}.norm"), f)?;
        self.mixer.visit_params(&format!("{prefix}.mixer"), f)
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        let Norm::Bn(bn) = &self.norm else {
            return Err(Error::AlreadyFused);
        };
        let expand = absorb_bn_into_pointwise(bn, &self.mixer.expand)?;
        Ok(MetaNeXtBlock {
            token_mixer: self.token_mixer.fuse()?,
            norm: Norm::Folded,
            mixer: ChannelMixer::new(expand, self.mixer.squeeze.clone())?,
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> MetaNeXtBlock<U> {
        MetaNeXtBlock {
            token_mixer: self.token_mixer.cast(),
            norm: self.norm.cast(),
            mixer: self.mixer.cast(),
            fused: self.fused,
        }
    }
}

/// Downsampling block: X^ = Norm(CopyConv(X)); Y = X^ + Mixer(X^).
/// The residual consumes the normalized value directly, so fusion cannot
/// fold the norm away; it becomes an explicit scale-shift instead.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleBlock<T: Element = f64> {
    pub token_mixer: CopyConvBlock<T>,
    pub norm: Norm<T>,
    pub mixer: ChannelMixer<T>,
    pub trailing: Option<ConvParams<T>>,
    fused: bool,
}

impl<T: Element> DownsampleBlock<T> {
    pub fn new(
        token_mixer: CopyConvBlock<T>,
        norm: Norm<T>,
        mixer: ChannelMixer<T>,
        trailing: Option<ConvParams<T>>,
    ) -> Result<Self> {
        let c = token_mixer.out_channels();
        if mixer.in_channels() != c || mixer.out_channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "channel mixer {}->{} does not preserve downsample width {}",
                mixer.in_channels(),
                mixer.out_channels(),
                c
            )));
        }
        Ok(DownsampleBlock { token_mixer, norm, mixer, trailing, fused: false })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        k_s: usize,
        k_m: usize,
        hidden: usize,
        with_bias: bool,
        bn_eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let adjust_to = (out_channels != 2 * in_channels).then_some(out_channels);
        let token_mixer = CopyConvBlock::random(in_channels, k_s, k_m, adjust_to, with_bias, rng)?;
        let norm = Norm::Bn(BNParams::random(out_channels, T::from_double(bn_eps), rng));
        let mixer = ChannelMixer::random(out_channels, hidden, out_channels, with_bias, rng)?;
        DownsampleBlock::new(token_mixer, norm, mixer, None)
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_channels(&self) -> usize {
        self.trailing
            .as_ref()
            .map_or(self.token_mixer.out_channels(), |t| t.spec.out_channels)
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        let mid = self.token_mixer.out_shape(in_shape)?;
        Ok(Shape::new(mid.n, self.out_channels(), mid.h, mid.w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mixed = self.token_mixer.forward(x)?;
        let xhat = self.norm.forward(&mixed)?;
        let y = xhat.add(&self.mixer.forward(&xhat)?)?;
        match &self.trailing {
            Some(t) => conv2d(t, &y),
            None => Ok(y),
        }
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let (mixed, m1) = self.token_mixer.forward_counting(x)?;
        let (xhat, m2) = self.norm.forward_counting(&mixed)?;
        let (mix, m3) = self.mixer.forward_counting(&xhat)?;
        let y = xhat.add(&mix)?;
        match &self.trailing {
            Some(t) => {
                let (out, m4) = conv2d_counting(t, &y)?;
                Ok((out, m1 + m2 + m3 + m4))
            }
            None => Ok((y, m1 + m2 + m3)),
        }
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let mid = self.token_mixer.out_shape(in_shape)?;
        let mut macs =
            self.token_mixer.macs(in_shape)? + self.norm.macs(mid) + self.mixer.macs(mid)?;
        if let Some(t) = &self.trailing {
            macs += t.spec.macs(mid)?;
        }
        Ok(macs)
    }

    pub fn param_counts(&self) -> ParamCount {
        let mut count =
            self.token_mixer.param_counts() + self.norm.param_counts() + self.mixer.param_counts();
        if let Some(t) = &self.trailing {
            count += conv_param_count(t);
        }
        count
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        self.token_mixer.visit_params(&format!("{prefix}.token_mixer"), f)?;
        self.norm.visit_params(&format!("{prefix}.norm"), f)?;
        self.mixer.visit_params(&format!("{prefix}.mixer"), f)?;
        if let Some(t) = &mut self.trailing {
            visit_conv(t, &format!("{prefix}.trailing"), f)?;
        }
        Ok(())
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        let Norm::Bn(bn) = &self.norm else {
            return Err(Error::AlreadyFused);
        };
        Ok(DownsampleBlock {
            token_mixer: self.token_mixer.fuse()?,
            norm: Norm::ScaleShift(bn_to_scale_shift(bn)?),
            mixer: self.mixer.clone(),
            trailing: self.trailing.clone(),
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> DownsampleBlock<U> {
        DownsampleBlock {
            token_mixer: self.token_mixer.cast(),
            norm: self.norm.cast(),
            mixer: self.mixer.cast(),
            trailing: self.trailing.as_ref().map(|t| t.cast()),
            fused: self.fused,
        }
    }
}

/// The ablation downsample: one dense 3x3 stride-2 conv plus a norm,
/// replacing the whole copy-conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainDownsample<T: Element = f64> {
    pub conv: ConvParams<T>,
    pub norm: Norm<T>,
    fused: bool,
}

impl<T: Element> PlainDownsample<T> {
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        with_bias: bool,
        bn_eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let spec = ConvSpec::new(
            in_channels,
            out_channels,
            (3, 3),
            (2, 2),
            Padding::uniform(1),
            (1, 1),
            1,
        )?;
        Ok(PlainDownsample {
            conv: ConvParams::random(spec, with_bias, rng),
            norm: Norm::Bn(BNParams::random(out_channels, T::from_double(bn_eps), rng)),
            fused: false,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        if in_shape.h % 2 != 0 || in_shape.w % 2 != 0 {
            return Err(Error::OddSpatial { h: in_shape.h, w: in_shape.w });
        }
        output_shape(&self.conv.spec, in_shape)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.out_shape(x.shape())?;
        self.norm.forward(&conv2d(&self.conv, x)?)
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.out_shape(x.shape())?;
        let (mid, m1) = conv2d_counting(&self.conv, x)?;
        let (out, m2) = self.norm.forward_counting(&mid)?;
        Ok((out, m1 + m2))
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let out = self.out_shape(in_shape)?;
        Ok(self.conv.spec.macs(in_shape)? + self.norm.macs(out))
    }

    pub fn param_counts(&self) -> ParamCount {
        conv_param_count(&self.conv) + self.norm.param_counts()
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        visit_conv(&mut self.conv, &format!("{prefix}.conv"), f)?;
        self.norm.visit_params(&format!("{prefix}.norm"), f)
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        let Norm::Bn(bn) = &self.norm else {
            return Err(Error::AlreadyFused);
        };
        Ok(PlainDownsample {
            conv: fold_bn(&self.conv, bn)?,
            norm: Norm::Folded,
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> PlainDownsample<U> {
        PlainDownsample { conv: self.conv.cast(), norm: self.norm.cast(), fused: self.fused }
    }
}

/// Input stem: two dense 3x3 stride-2 convs with norm after each and GELU
/// between, taking RGB to the first stage width at quarter resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem<T: Element = f64> {
    pub conv1: ConvParams<T>,
    pub norm1: Norm<T>,
    pub conv2: ConvParams<T>,
    pub norm2: Norm<T>,
    fused: bool,
}

impl<T: Element> Stem<T> {
    pub fn random(width: usize, with_bias: bool, bn_eps: f64, rng: &mut SplitMix64) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid_config("stage_widths", "stem width must be >= 1"));
        }
        let mid = width.div_ceil(2);
        let s2 = |cin: usize, cout: usize| {
            ConvSpec::new(cin, cout, (3, 3), (2, 2), Padding::uniform(1), (1, 1), 1)
        };
        Ok(Stem {
            conv1: ConvParams::random(s2(3, mid)?, with_bias, rng),
            norm1: Norm::Bn(BNParams::random(mid, T::from_double(bn_eps), rng)),
            conv2: ConvParams::random(s2(mid, width)?, with_bias, rng),
            norm2: Norm::Bn(BNParams::random(width, T::from_double(bn_eps), rng)),
            fused: false,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.spec.out_channels
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        if in_shape.h < 4 || in_shape.w < 4 {
            return Err(Error::DegenerateOutput(format!(
                "stem needs at least 4x4 input, got {}x{}",
                in_shape.h, in_shape.w
            )));
        }
        let mid = output_shape(&self.conv1.spec, in_shape)?;
        output_shape(&self.conv2.spec, mid)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.out_shape(x.shape())?;
        let a = self.norm1.forward(&conv2d(&self.conv1, x)?)?;
        self.norm2.forward(&conv2d(&self.conv2, &gelu(&a))?)
    }

    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.out_shape(x.shape())?;
        let (c1, m1) = conv2d_counting(&self.conv1, x)?;
        let (a, m2) = self.norm1.forward_counting(&c1)?;
        let (c2, m3) = conv2d_counting(&self.conv2, &gelu(&a))?;
        let (out, m4) = self.norm2.forward_counting(&c2)?;
        Ok((out, m1 + m2 + m3 + m4))
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let mid = output_shape(&self.conv1.spec, in_shape)?;
        let out = output_shape(&self.conv2.spec, mid)?;
        Ok(self.conv1.spec.macs(in_shape)?
            + self.norm1.macs(mid)
            + self.conv2.spec.macs(mid)?
            + self.norm2.macs(out))
    }

    pub fn param_counts(&self) -> ParamCount {
        conv_param_count(&self.conv1)
            + self.norm1.param_counts()
            + conv_param_count(&self.conv2)
            + self.norm2.param_counts()
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        visit_conv(&mut self.conv1, &format!("{prefix}.conv1"), f)?;
        self.norm1.visit_params(&format!("{prefix}.norm1"), f)?;
        visit_conv(&mut self.conv2, &format!("{prefix}.conv2"), f)?;
        self.norm2.visit_params(&format!("{prefix}.norm2"), f)
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::AlreadyFused);
        }
        let (Norm::Bn(bn1), Norm::Bn(bn2)) = (&self.norm1, &self.norm2) else {
            return Err(Error::AlreadyFused);
        };
        Ok(Stem {
            conv1: fold_bn(&self.conv1, bn1)?,
            norm1: Norm::Folded,
            conv2: fold_bn(&self.conv2, bn2)?,
            norm2: Norm::Folded,
            fused: true,
        })
    }

    pub fn cast<U: Element>(&self) -> Stem<U> {
        Stem {
            conv1: self.conv1.cast(),
            norm1: self.norm1.cast(),
            conv2: self.conv2.cast(),
            norm2: self.norm2.cast(),
            fused: self.fused,
        }
    }
}
