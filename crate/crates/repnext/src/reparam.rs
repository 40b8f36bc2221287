//! The structural-reparameterization algebra: transforms that collapse
//! multi-branch, norm-free training forms into single convolutions with
//! provable equivalence.
//!
//! All merges here are depthwise-only. Serial branches follow the
//! pad-up-front convention: the training form pads the input by the summed
//! padding of both stages and then applies each stage with no further
//! padding. Under that convention merged-vs-sequential equivalence is exact
//! everywhere including borders; the common per-stage "same" alternative
//! differs in a border ring (the verify module measures it).
//!
//! Every transform computes in double precision and casts to the target
//! element type at the end, so kernel sums don't accumulate rounding in
//! single-precision runs.

use crate::error::{Error, Result};
use crate::ops::{
    conv2d, conv2d_counting, output_shape, pad_explicit, BNParams, ConvParams, ConvSpec, Padding,
};
use crate::tensor::{Element, Shape, SplitMix64, Tensor};

/// Folds a batch norm that FOLLOWS a conv into the conv. Works for any conv,
/// dense or depthwise, because the scale acts on output channels.
pub fn fold_bn<T: Element>(conv: &ConvParams<T>, bn: &BNParams<T>) -> Result<ConvParams<T>> {
    if bn.channels() != conv.spec.out_channels {
        return Err(Error::ShapeMismatch(format!(
            "batch norm has {} channels, conv produces {}",
            bn.channels(),
            conv.spec.out_channels
        )));
    }
    let c = conv.cast::<f64>();
    let b = bn.cast::<f64>();
    let spec = c.spec;
    let per_out = spec.in_per_group() * spec.kernel.0 * spec.kernel.1;
    let mut weight = c.weight.clone();
    let mut bias = vec![0.0f64; spec.out_channels];
    for o in 0..spec.out_channels {
        let s = b.gamma[o] / (b.running_var[o] + b.eps).sqrt();
        for w in &mut weight[o * per_out..(o + 1) * per_out] {
            *w *= s;
        }
        bias[o] = s * (c.bias_at(o) - b.running_mean[o]) + b.beta[o];
    }
    Ok(ConvParams::new(spec, weight, Some(bias))?.cast::<T>())
}

/// Absorbs a batch norm that PRECEDES a dense 1x1 conv into the conv:
/// w'[o,c] = w[o,c]*s[c], b'[o] = b[o] + sum_c w[o,c]*(beta[c] - s[c]*mean[c]).
/// This is how a block's norm disappears into the channel mixer's expand.
pub fn absorb_bn_into_pointwise<T: Element>(
    bn: &BNParams<T>,
    conv: &ConvParams<T>,
) -> Result<ConvParams<T>> {
    let spec = conv.spec;
    if spec.kernel != (1, 1) || spec.groups != 1 {
        return Err(Error::ShapeMismatch(
            "norm absorption needs a dense 1x1 conv".to_string(),
        ));
    }
    if bn.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "batch norm has {} channels, conv consumes {}",
            bn.channels(),
            spec.in_channels
        )));
    }
    let c = conv.cast::<f64>();
    let b = bn.cast::<f64>();
    let mut weight = c.weight.clone();
    let mut bias = vec![0.0f64; spec.out_channels];
    for o in 0..spec.out_channels {
        let mut shift = c.bias_at(o);
        for ch in 0..spec.in_channels {
            let s = b.gamma[ch] / (b.running_var[ch] + b.eps).sqrt();
            shift += c.weight[o * spec.in_channels + ch] * (b.beta[ch] - s * b.running_mean[ch]);
            weight[o * spec.in_channels + ch] *= s;
        }
        bias[o] = shift;
    }
    Ok(ConvParams::new(spec, weight, Some(bias))?.cast::<T>())
}

/// Materializes a batch norm as a depthwise 1x1 scale-shift conv. Used where
/// the norm's output feeds a residual directly and so cannot be folded away.
pub fn bn_to_scale_shift<T: Element>(bn: &BNParams<T>) -> Result<ConvParams<T>> {
    let b = bn.cast::<f64>();
    let channels = b.channels();
    let mut weight = vec![0.0f64; channels];
    let mut bias = vec![0.0f64; channels];
    for ch in 0..channels {
        let s = b.gamma[ch] / (b.running_var[ch] + b.eps).sqrt();
        weight[ch] = s;
        bias[ch] = b.beta[ch] - s * b.running_mean[ch];
    }
    let spec = ConvSpec::new(
        channels,
        channels,
        (1, 1),
        (1, 1),
        Padding::default(),
        (1, 1),
        channels,
    )?;
    Ok(ConvParams::new(spec, weight, Some(bias))?.cast::<T>())
}

/// Copies a kernel into the center of a larger canvas, zeros elsewhere, and
/// rewrites the padding to the canvas's "same" padding. Output values are
/// unchanged for any input and stride, because the center shift and the
/// padding change cancel. Dilated kernels must be densified first.
pub fn embed_kernel<T: Element>(conv: &ConvParams<T>, canvas: (usize, usize)) -> Result<ConvParams<T>> {
    let spec = conv.spec;
    let (kh, kw) = spec.kernel;
    let (canvas_h, canvas_w) = canvas;
    if canvas_h % 2 == 0 || canvas_w % 2 == 0 {
        return Err(Error::EvenCanvas(canvas_h, canvas_w));
    }
    if spec.dilation != (1, 1)
        || kh > canvas_h
        || kw > canvas_w
        || (canvas_h - kh) % 2 != 0
        || (canvas_w - kw) % 2 != 0
    {
        return Err(Error::ParityMismatch { kh, kw, canvas_h, canvas_w });
    }
    if spec.kernel == canvas {
        return Ok(conv.clone());
    }
    let off_h = (canvas_h - kh) / 2;
    let off_w = (canvas_w - kw) / 2;
    let per_in = spec.in_per_group();
    let mut weight =
        vec![0.0f64; spec.out_channels * per_in * canvas_h * canvas_w];
    let src = conv.cast::<f64>();
    for o in 0..spec.out_channels {
        for c in 0..per_in {
            for u in 0..kh {
                for v in 0..kw {
                    let dst = ((o * per_in + c) * canvas_h + u + off_h) * canvas_w + v + off_w;
                    weight[dst] = src.weight_at(o, c, u, v);
                }
            }
        }
    }
    let new_spec = ConvSpec::new(
        spec.in_channels,
        spec.out_channels,
        canvas,
        spec.stride,
        Padding::new(
            (canvas_h - 1) / 2,
            (canvas_h - 1) / 2,
            (canvas_w - 1) / 2,
            (canvas_w - 1) / 2,
        ),
        (1, 1),
        spec.groups,
    )?;
    Ok(ConvParams::new(new_spec, weight, src.bias)?.cast::<T>())
}

/// Rewrites a dilated kernel as a dense kernel of the effective extent with
/// the original taps at (u*dh, v*dw). Values are preserved exactly.
pub fn expand_dilated<T: Element>(conv: &ConvParams<T>) -> Result<ConvParams<T>> {
    let spec = conv.spec;
    if spec.dilation == (1, 1) {
        return Ok(conv.clone());
    }
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let eff_h = (kh - 1) * dh + 1;
    let eff_w = (kw - 1) * dw + 1;
    let per_in = spec.in_per_group();
    let src = conv.cast::<f64>();
    let mut weight = vec![0.0f64; spec.out_channels * per_in * eff_h * eff_w];
    for o in 0..spec.out_channels {
        for c in 0..per_in {
            for u in 0..kh {
                for v in 0..kw {
                    let dst = ((o * per_in + c) * eff_h + u * dh) * eff_w + v * dw;
                    weight[dst] = src.weight_at(o, c, u, v);
                }
            }
        }
    }
    let new_spec = ConvSpec::new(
        spec.in_channels,
        spec.out_channels,
        (eff_h, eff_w),
        spec.stride,
        spec.padding,
        (1, 1),
        spec.groups,
    )?;
    Ok(ConvParams::new(new_spec, weight, src.bias)?.cast::<T>())
}

/// The identity map written as a depthwise conv: a centered delta kernel per
/// channel on an odd canvas, no bias.
pub fn identity_as_dwconv<T: Element>(channels: usize, canvas: (usize, usize)) -> Result<ConvParams<T>> {
    let (canvas_h, canvas_w) = canvas;
    if canvas_h % 2 == 0 || canvas_w % 2 == 0 {
        return Err(Error::EvenCanvas(canvas_h, canvas_w));
    }
    let mut weight = vec![T::zero(); channels * canvas_h * canvas_w];
    let center = (canvas_h / 2) * canvas_w + canvas_w / 2;
    for ch in 0..channels {
        weight[ch * canvas_h * canvas_w + center] = T::one();
    }
    let spec = ConvSpec::depthwise_same(channels, canvas, (1, 1), (1, 1))?;
    ConvParams::new(spec, weight, None)
}

/// Merges two sequential depthwise convs into one. The merged kernel per
/// channel is the full 2-D linear convolution (no flip) of the two kernels:
/// m[t] = sum over u+v=t of w1[u]*w2[v], because cross-correlation offsets
/// compose additively. Merged bias is b2 + b1*sum(w2); stride comes from the
/// second stage (the first must be stride 1, the mergeability condition);
/// padding is the sum of both stages' padding, which is exactly what the
/// pad-up-front evaluation applies.
pub fn compose_sequential_dw<T: Element>(
    first: &ConvParams<T>,
    second: &ConvParams<T>,
) -> Result<ConvParams<T>> {
    if !first.spec.is_depthwise() || !second.spec.is_depthwise() {
        return Err(Error::GroupMismatch(
            "sequential merge is depthwise-only".to_string(),
        ));
    }
    if first.spec.in_channels != second.spec.in_channels {
        return Err(Error::GroupMismatch(format!(
            "stage channel counts differ: {} vs {}",
            first.spec.in_channels, second.spec.in_channels
        )));
    }
    if first.spec.stride != (1, 1) {
        return Err(Error::StrideOnFirst(first.spec.stride.0, first.spec.stride.1));
    }
    // The composition formula needs unit dilation; densify silently since
    // expand_dilated is exact.
    let a = expand_dilated(&first.cast::<f64>())?;
    let b = expand_dilated(&second.cast::<f64>())?;

    let channels = a.spec.in_channels;
    let (kh1, kw1) = a.spec.kernel;
    let (kh2, kw2) = b.spec.kernel;
    let (mh, mw) = (kh1 + kh2 - 1, kw1 + kw2 - 1);
    let mut weight = vec![0.0f64; channels * mh * mw];
    let mut bias = vec![0.0f64; channels];
    let any_bias = a.bias.is_some() || b.bias.is_some();
    for ch in 0..channels {
        for u1 in 0..kh1 {
            for v1 in 0..kw1 {
                let w1 = a.weight_at(ch, 0, u1, v1);
                for u2 in 0..kh2 {
                    for v2 in 0..kw2 {
                        weight[(ch * mh + u1 + u2) * mw + v1 + v2] +=
                            w1 * b.weight_at(ch, 0, u2, v2);
                    }
                }
            }
        }
        let sum_w2: f64 = (0..kh2)
            .flat_map(|u| (0..kw2).map(move |v| (u, v)))
            .map(|(u, v)| b.weight_at(ch, 0, u, v))
            .sum();
        bias[ch] = b.bias_at(ch) + a.bias_at(ch) * sum_w2;
    }
    let spec = ConvSpec::new(
        channels,
        channels,
        (mh, mw),
        b.spec.stride,
        a.spec.padding.add(b.spec.padding),
        (1, 1),
        channels,
    )?;
    Ok(ConvParams::new(spec, weight, any_bias.then_some(bias))?.cast::<T>())
}

/// Sums parallel branches that already share one spec exactly. The merged
/// conv equals the elementwise sum of the branch outputs.
pub fn merge_parallel<T: Element>(branches: &[ConvParams<T>]) -> Result<ConvParams<T>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::SpecMismatch("merge of zero branches".to_string()))?;
    let spec = first.spec;
    if !spec.is_depthwise() {
        return Err(Error::SpecMismatch(
            "parallel merge is depthwise-only".to_string(),
        ));
    }
    for b in branches {
        if b.spec != spec {
            return Err(Error::SpecMismatch(format!(
                "branch specs differ: {:?} vs {:?}",
                b.spec, spec
            )));
        }
    }
    let mut weight = vec![0.0f64; first.weight.len()];
    let mut bias = vec![0.0f64; spec.out_channels];
    let any_bias = branches.iter().any(|b| b.bias.is_some());
    for b in branches {
        let b64 = b.cast::<f64>();
        for (acc, w) in weight.iter_mut().zip(&b64.weight) {
            *acc += *w;
        }
        if let Some(bb) = &b64.bias {
            for (acc, v) in bias.iter_mut().zip(bb) {
                *acc += *v;
            }
        }
    }
    Ok(ConvParams::new(spec, weight, any_bias.then_some(bias))?.cast::<T>())
}

/// Evaluates a serial depthwise pair in the pad-up-front training form: the
/// input is padded by the summed padding, then both stages run with no
/// further padding. This is the form compose_sequential_dw reproduces
/// exactly, border pixels included.
pub fn serial_forward_pad_up_front<T: Element>(
    first: &ConvParams<T>,
    second: &ConvParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (total, a, b) = pad_up_front_stages(first, second);
    let padded = pad_explicit(x, total);
    conv2d(&b, &conv2d(&a, &padded)?)
}

/// Evaluates the same pair the way per-stage "same" padding would: each
/// stage pads its own input, so the intermediate carries implicit zeros at
/// its border. Differs from the merged form in a border ring; this is the
/// conventional evaluation and is what the never-merged large strip pair
/// uses in both forms.
pub fn serial_forward_per_stage<T: Element>(
    first: &ConvParams<T>,
    second: &ConvParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv2d(second, &conv2d(first, x)?)
}

/// The two stages of a pad-up-front evaluation with their padding stripped,
/// so the counting and analytic paths walk exactly the shapes forward sees.
fn pad_up_front_stages<T: Element>(
    first: &ConvParams<T>,
    second: &ConvParams<T>,
) -> (Padding, ConvParams<T>, ConvParams<T>) {
    let total = first.spec.padding.add(second.spec.padding);
    let mut a = first.clone();
    a.spec.padding = Padding::default();
    let mut b = second.clone();
    b.spec.padding = Padding::default();
    (total, a, b)
}

fn padded_shape(shape: Shape, pad: Padding) -> Shape {
    Shape::new(
        shape.n,
        shape.c,
        shape.h + pad.top + pad.bottom,
        shape.w + pad.left + pad.right,
    )
}

/// Instrumented pad-up-front evaluation; the count includes the multiplies
/// the first stage spends on the padded border rows.
pub fn serial_counting_pad_up_front<T: Element>(
    first: &ConvParams<T>,
    second: &ConvParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    let (total, a, b) = pad_up_front_stages(first, second);
    let padded = pad_explicit(x, total);
    let (mid, macs_a) = conv2d_counting(&a, &padded)?;
    let (out, macs_b) = conv2d_counting(&b, &mid)?;
    Ok((out, macs_a + macs_b))
}

/// Closed-form MAC count of the pad-up-front evaluation at a given shape.
pub fn serial_macs_pad_up_front(
    first: &ConvSpec,
    second: &ConvSpec,
    in_shape: Shape,
) -> Result<u64> {
    let total = first.padding.add(second.padding);
    let mut a = *first;
    a.padding = Padding::default();
    let mut b = *second;
    b.padding = Padding::default();
    let padded = padded_shape(in_shape, total);
    let mid = output_shape(&a, padded)?;
    Ok(a.macs(padded)? + b.macs(mid)?)
}

impl<T: Element> RepBranch<T> {
    /// Instrumented training-form forward.
    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        match self {
            RepBranch::Identity { .. } => Ok((x.clone(), 0)),
            RepBranch::Single(c) => conv2d_counting(c, x),
            RepBranch::Serial(a, b) => serial_counting_pad_up_front(a, b, x),
        }
    }

    /// Closed-form MAC count of the training-form forward.
    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        match self {
            RepBranch::Identity { .. } => Ok(0),
            RepBranch::Single(c) => c.spec.macs(in_shape),
            RepBranch::Serial(a, b) => serial_macs_pad_up_front(&a.spec, &b.spec, in_shape),
        }
    }
}

impl<T: Element> RepBranchSet<T> {
    /// Instrumented training-form forward (sum of branch outputs).
    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let mut macs = 0u64;
        let mut acc: Option<Tensor<T>> = None;
        for b in &self.branches {
            let (y, m) = b.forward_counting(x)?;
            macs += m;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        Ok((acc.expect("set is non-empty by construction"), macs))
    }

    /// Closed-form MAC count of the training-form forward.
    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        self.branches.iter().try_fold(0u64, |acc, b| Ok(acc + b.macs(in_shape)?))
    }
}

/// One training-form branch of a reparameterizable conv group.
#[derive(Debug, Clone, PartialEq)]
pub enum RepBranch<T: Element = f64> {
    /// Pass-through; contributes a centered delta kernel at fuse time.
    Identity { channels: usize },
    /// A single depthwise conv (possibly strip-shaped or dilated).
    Single(ConvParams<T>),
    /// Two depthwise stages evaluated pad-up-front; the first is stride 1.
    Serial(ConvParams<T>, ConvParams<T>),
}

impl<T: Element> RepBranch<T> {
    pub fn identity(channels: usize) -> Self {
        RepBranch::Identity { channels }
    }

    pub fn single(conv: ConvParams<T>) -> Result<Self> {
        if !conv.spec.is_depthwise() {
            return Err(Error::GroupMismatch(
                "branch convs must be depthwise".to_string(),
            ));
        }
        Ok(RepBranch::Single(conv))
    }

    pub fn serial(first: ConvParams<T>, second: ConvParams<T>) -> Result<Self> {
        if !first.spec.is_depthwise() || !second.spec.is_depthwise() {
            return Err(Error::GroupMismatch(
                "branch convs must be depthwise".to_string(),
            ));
        }
        if first.spec.in_channels != second.spec.in_channels {
            return Err(Error::GroupMismatch(
                "serial stages must share a channel count".to_string(),
            ));
        }
        if first.spec.stride != (1, 1) {
            return Err(Error::StrideOnFirst(first.spec.stride.0, first.spec.stride.1));
        }
        Ok(RepBranch::Serial(first, second))
    }

    pub fn channels(&self) -> usize {
        match self {
            RepBranch::Identity { channels } => *channels,
            RepBranch::Single(c) => c.spec.in_channels,
            RepBranch::Serial(a, _) => a.spec.in_channels,
        }
    }

    pub fn stride(&self) -> (usize, usize) {
        match self {
            RepBranch::Identity { .. } => (1, 1),
            RepBranch::Single(c) => c.spec.stride,
            RepBranch::Serial(_, b) => b.spec.stride,
        }
    }

    /// Effective receptive extent per axis: (k-1)*d+1, composed for serial.
    pub fn effective_extent(&self) -> (usize, usize) {
        let ext = |s: &ConvSpec| {
            (
                (s.kernel.0 - 1) * s.dilation.0 + 1,
                (s.kernel.1 - 1) * s.dilation.1 + 1,
            )
        };
        match self {
            RepBranch::Identity { .. } => (1, 1),
            RepBranch::Single(c) => ext(&c.spec),
            RepBranch::Serial(a, b) => {
                let (ah, aw) = ext(&a.spec);
                let (bh, bw) = ext(&b.spec);
                (ah + bh - 1, aw + bw - 1)
            }
        }
    }

    /// Training-form forward for this branch alone.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            RepBranch::Identity { .. } => Ok(x.clone()),
            RepBranch::Single(c) => conv2d(c, x),
            RepBranch::Serial(a, b) => serial_forward_pad_up_front(a, b, x),
        }
    }

    /// Collapses the branch to a single conv on the given odd canvas.
    pub fn fuse_to_canvas(&self, canvas: (usize, usize)) -> Result<ConvParams<T>> {
        match self {
            RepBranch::Identity { channels } => identity_as_dwconv(*channels, canvas),
            RepBranch::Single(c) => embed_kernel(&expand_dilated(c)?, canvas),
            RepBranch::Serial(a, b) => embed_kernel(&compose_sequential_dw(a, b)?, canvas),
        }
    }

    pub fn param_counts(&self) -> (u64, u64) {
        match self {
            RepBranch::Identity { .. } => (0, 0),
            RepBranch::Single(c) => c.param_counts(),
            RepBranch::Serial(a, b) => {
                let (wa, ba) = a.param_counts();
                let (wb, bb) = b.param_counts();
                (wa + wb, ba + bb)
            }
        }
    }

    pub fn cast<U: Element>(&self) -> RepBranch<U> {
        match self {
            RepBranch::Identity { channels } => RepBranch::Identity { channels: *channels },
            RepBranch::Single(c) => RepBranch::Single(c.cast()),
            RepBranch::Serial(a, b) => RepBranch::Serial(a.cast(), b.cast()),
        }
    }
}

/// A set of parallel branches fusing onto one canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBranchSet<T: Element = f64> {
    pub branches: Vec<RepBranch<T>>,
    pub canvas: (usize, usize),
    pub stride: (usize, usize),
    pub channels: usize,
}

impl<T: Element> RepBranchSet<T> {
    pub fn new(
        branches: Vec<RepBranch<T>>,
        canvas: (usize, usize),
        stride: (usize, usize),
        channels: usize,
    ) -> Result<Self> {
        if canvas.0 % 2 == 0 || canvas.1 % 2 == 0 {
            return Err(Error::EvenCanvas(canvas.0, canvas.1));
        }
        if branches.is_empty() {
            return Err(Error::SpecMismatch("branch set cannot be empty".to_string()));
        }
        for b in &branches {
            if b.channels() != channels {
                return Err(Error::SpecMismatch(format!(
                    "branch has {} channels, set expects {}",
                    b.channels(),
                    channels
                )));
            }
            if b.stride() != stride {
                return Err(Error::SpecMismatch(format!(
                    "branch stride {:?} differs from set stride {:?}",
                    b.stride(),
                    stride
                )));
            }
            let (eh, ew) = b.effective_extent();
            if eh > canvas.0 || ew > canvas.1 {
                return Err(Error::SpecMismatch(format!(
                    "branch extent {}x{} exceeds canvas {}x{}",
                    eh, ew, canvas.0, canvas.1
                )));
            }
        }
        Ok(RepBranchSet { branches, canvas, stride, channels })
    }

    /// Training-form forward: the sum of all branch outputs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for b in &self.branches {
            let y = b.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        Ok(acc.expect("set is non-empty by construction"))
    }

    /// Collapses every branch onto the canvas and merges. The result is a
    /// single depthwise conv equivalent to the branch sum.
    pub fn fuse(&self) -> Result<ConvParams<T>> {
        let fused: Result<Vec<_>> = self.branches.iter().map(|b| b.fuse_to_canvas(self.canvas)).collect();
        merge_parallel(&fused?)
    }

    pub fn param_counts(&self) -> (u64, u64) {
        self.branches.iter().fold((0, 0), |(w, b), br| {
            let (bw, bb) = br.param_counts();
            (w + bw, b + bb)
        })
    }

    pub fn cast<U: Element>(&self) -> RepBranchSet<U> {
        RepBranchSet {
            branches: self.branches.iter().map(|b| b.cast()).collect(),
            canvas: self.canvas,
            stride: self.stride,
            channels: self.channels,
        }
    }
}

/// Fuses the small-kernel pattern set (canvas k_s x k_s, default 3x3).
pub fn fuse_rep_small<T: Element>(set: &RepBranchSet<T>) -> Result<ConvParams<T>> {
    set.fuse()
}

/// Fuses the medium-kernel pattern set (canvas k_m x k_m, default 7x7).
pub fn fuse_rep_medium<T: Element>(set: &RepBranchSet<T>) -> Result<ConvParams<T>> {
    set.fuse()
}

fn dw_conv<T: Element>(
    channels: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    dilation: (usize, usize),
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<ConvParams<T>> {
    let spec = ConvSpec::depthwise_same(channels, kernel, stride, dilation)?;
    Ok(ConvParams::random(spec, with_bias, rng))
}

/// Serial pair (1 x k then k x 1) with the column stage carrying the stride.
/// Padding lives on the stage that has extent in that axis, so the summed
/// padding equals the k x k "same" padding.
pub fn serial_strip_pair<T: Element>(
    channels: usize,
    k: usize,
    stride: (usize, usize),
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<(ConvParams<T>, ConvParams<T>)> {
    let row = dw_conv(channels, (1, k), (1, 1), (1, 1), with_bias, rng)?;
    let col = dw_conv(channels, (k, 1), stride, (1, 1), with_bias, rng)?;
    Ok((row, col))
}

/// Small pattern set, parallel form (feature-scale-preserving blocks):
/// k_s x k_s + 1 x k_s + k_s x 1 + 2x2 dilated d=2.
pub fn small_parallel_set<T: Element>(
    channels: usize,
    k_s: usize,
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<RepBranchSet<T>> {
    let stride = (1, 1);
    let branches = vec![
        RepBranch::single(dw_conv(channels, (k_s, k_s), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::single(dw_conv(channels, (1, k_s), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::single(dw_conv(channels, (k_s, 1), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::single(dw_conv(channels, (2, 2), stride, (2, 2), with_bias, rng)?)?,
    ];
    RepBranchSet::new(branches, (k_s, k_s), stride, channels)
}

/// Small pattern set, downsampling form: the two parallel strips become one
/// serial stack, and everything runs at stride 2.
pub fn small_serial_set<T: Element>(
    channels: usize,
    k_s: usize,
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<RepBranchSet<T>> {
    let stride = (2, 2);
    let (row, col) = serial_strip_pair(channels, k_s, stride, with_bias, rng)?;
    let branches = vec![
        RepBranch::single(dw_conv(channels, (k_s, k_s), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::serial(row, col)?,
        RepBranch::single(dw_conv(channels, (2, 2), stride, (2, 2), with_bias, rng)?)?,
    ];
    RepBranchSet::new(branches, (k_s, k_s), stride, channels)
}

/// Medium pattern set: k_m x k_m + two asymmetric kernels + two serial strip
/// stacks. For k_m = 7 this is 7x7, 3x5, 5x3, 1x7->7x1, 1x5->5x1.
pub fn medium_set<T: Element>(
    channels: usize,
    k_m: usize,
    stride: (usize, usize),
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<RepBranchSet<T>> {
    if k_m < 5 || k_m % 2 == 0 {
        return Err(Error::invalid_config(
            "k_m",
            "medium kernel must be odd and at least 5",
        ));
    }
    let (row_l, col_l) = serial_strip_pair(channels, k_m, stride, with_bias, rng)?;
    let (row_s, col_s) = serial_strip_pair(channels, k_m - 2, stride, with_bias, rng)?;
    let branches = vec![
        RepBranch::single(dw_conv(channels, (k_m, k_m), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::single(dw_conv(channels, (k_m - 4, k_m - 2), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::single(dw_conv(channels, (k_m - 2, k_m - 4), stride, (1, 1), with_bias, rng)?)?,
        RepBranch::serial(row_l, col_l)?,
        RepBranch::serial(row_s, col_s)?,
    ];
    RepBranchSet::new(branches, (k_m, k_m), stride, channels)
}

/// The large-strip serial pair (1 x k_l then k_l x 1). Kept serial at
/// inference; constructed here because it shares the strip conventions.
pub fn large_pair<T: Element>(
    channels: usize,
    k_l: usize,
    with_bias: bool,
    rng: &mut SplitMix64,
) -> Result<(ConvParams<T>, ConvParams<T>)> {
    serial_strip_pair(channels, k_l, (1, 1), with_bias, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::batchnorm_infer;
    use crate::tensor::{max_abs_diff, Shape};

    fn rng() -> SplitMix64 {
        SplitMix64::new(0x5EED)
    }

    fn random_dw(channels: usize, kernel: (usize, usize), rng: &mut SplitMix64) -> ConvParams {
        ConvParams::random(
            ConvSpec::depthwise_same(channels, kernel, (1, 1), (1, 1)).unwrap(),
            true,
            rng,
        )
    }

    #[test]
    fn fold_bn_identity_norm_is_noop() {
        let mut r = rng();
        let conv = random_dw(4, (3, 3), &mut r);
        let bn = BNParams::new(vec![1.0; 4], vec![0.0; 4], vec![0.0; 4], vec![1.0; 4], 0.0).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        assert_eq!(folded.weight, conv.weight);
        assert_eq!(folded.bias.as_ref().unwrap(), conv.bias.as_ref().unwrap());
    }

    #[test]
    fn fold_bn_worked_example() {
        // 1x1 weight=2 bias=1, gamma=2 beta=3 mean=1 var=4 eps=0:
        // s=1, weight'=2, bias'=1*(1-1)+3=3.
        let conv = ConvParams::new(
            ConvSpec::pointwise(1, 1).unwrap(),
            vec![2.0],
            Some(vec![1.0]),
        )
        .unwrap();
        let bn = BNParams::new(vec![2.0], vec![3.0], vec![1.0], vec![4.0], 0.0).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        assert_eq!(folded.weight, vec![2.0]);
        assert_eq!(folded.bias, Some(vec![3.0]));
        let mut r = rng();
        let x: Tensor = Tensor::random(Shape::new(1, 1, 4, 4), &mut r);
        let seq = batchnorm_infer(&bn, &conv2d(&conv, &x).unwrap()).unwrap();
        let one = conv2d(&folded, &x).unwrap();
        assert!(max_abs_diff(&seq, &one).unwrap() <= 1e-12);
    }

    #[test]
    fn fold_bn_matches_sequential_on_random_inputs() {
        let mut r = rng();
        let spec = ConvSpec::new(3, 5, (3, 3), (1, 1), Padding::uniform(1), (1, 1), 1).unwrap();
        let conv: ConvParams = ConvParams::random(spec, true, &mut r);
        let bn: BNParams = BNParams::random(5, 1e-5, &mut r);
        let folded = fold_bn(&conv, &bn).unwrap();
        for trial in 0..50 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(1, 3, 7, 9), &mut tr);
            let seq = batchnorm_infer(&bn, &conv2d(&conv, &x).unwrap()).unwrap();
            let one = conv2d(&folded, &x).unwrap();
            assert!(max_abs_diff(&seq, &one).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn absorb_bn_into_pointwise_matches_sequential() {
        let mut r = rng();
        let conv: ConvParams =
            ConvParams::random(ConvSpec::pointwise(6, 10).unwrap(), true, &mut r);
        let bn: BNParams = BNParams::random(6, 1e-5, &mut r);
        let absorbed = absorb_bn_into_pointwise(&bn, &conv).unwrap();
        for trial in 0..50 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(2, 6, 5, 5), &mut tr);
            let seq = conv2d(&conv, &batchnorm_infer(&bn, &x).unwrap()).unwrap();
            let one = conv2d(&absorbed, &x).unwrap();
            assert!(max_abs_diff(&seq, &one).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn bn_scale_shift_matches_batchnorm() {
        let mut r = rng();
        let bn: BNParams = BNParams::random(5, 1e-5, &mut r);
        let ss = bn_to_scale_shift(&bn).unwrap();
        let x: Tensor = Tensor::random(Shape::new(2, 5, 6, 6), &mut r);
        let a = batchnorm_infer(&bn, &x).unwrap();
        let b = conv2d(&ss, &x).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() <= 1e-12);
    }

    #[test]
    fn embed_3x3_into_7x7_centers() {
        let mut r = rng();
        let conv = random_dw(2, (3, 3), &mut r);
        let big = embed_kernel(&conv, (7, 7)).unwrap();
        assert_eq!(big.spec.kernel, (7, 7));
        assert_eq!(big.spec.padding, Padding::uniform(3));
        for ch in 0..2 {
            for u in 0..7 {
                for v in 0..7 {
                    let val = big.weight_at(ch, 0, u, v);
                    if (2..=4).contains(&u) && (2..=4).contains(&v) {
                        assert_eq!(val, conv.weight_at(ch, 0, u - 2, v - 2));
                    } else {
                        assert_eq!(val, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn embed_strip_into_3x3_middle_row() {
        let mut r = rng();
        let conv = random_dw(1, (1, 3), &mut r);
        let big = embed_kernel(&conv, (3, 3)).unwrap();
        for v in 0..3 {
            assert_eq!(big.weight_at(0, 0, 1, v), conv.weight_at(0, 0, 0, v));
            assert_eq!(big.weight_at(0, 0, 0, v), 0.0);
            assert_eq!(big.weight_at(0, 0, 2, v), 0.0);
        }
    }

    #[test]
    fn embed_rejects_even_extent() {
        let spec = ConvSpec::new(1, 1, (2, 2), (1, 1), Padding::default(), (1, 1), 1).unwrap();
        let conv = ConvParams::new(spec, vec![1.0; 4], None).unwrap();
        assert!(matches!(
            embed_kernel(&conv, (3, 3)),
            Err(Error::ParityMismatch { .. })
        ));
    }

    #[test]
    fn embed_preserves_forward_any_stride() {
        let mut r = rng();
        for stride in [(1, 1), (2, 2)] {
            let spec = ConvSpec::depthwise_same(3, (3, 3), stride, (1, 1)).unwrap();
            let conv: ConvParams = ConvParams::random(spec, true, &mut r);
            let big = embed_kernel(&conv, (7, 7)).unwrap();
            let x: Tensor = Tensor::random(Shape::new(1, 3, 8, 8), &mut r);
            let a = conv2d(&conv, &x).unwrap();
            let b = conv2d(&big, &x).unwrap();
            assert!(max_abs_diff(&a, &b).unwrap() <= 1e-12, "stride {stride:?}");
        }
    }

    #[test]
    fn expand_dilated_tap_placement() {
        let spec = ConvSpec::new(1, 1, (2, 2), (1, 1), Padding::uniform(1), (2, 2), 1).unwrap();
        let conv = ConvParams::new(spec, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        let dense = expand_dilated(&conv).unwrap();
        assert_eq!(dense.spec.kernel, (3, 3));
        assert_eq!(dense.spec.dilation, (1, 1));
        assert_eq!(
            dense.weight,
            vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );

        // d=1 kernels come back unchanged.
        let mut r = rng();
        let plain = random_dw(1, (3, 3), &mut r);
        assert_eq!(expand_dilated(&plain).unwrap(), plain);

        // d=3 pushes taps to a 4x4 extent.
        let spec = ConvSpec::new(1, 1, (2, 2), (1, 1), Padding::default(), (3, 3), 1).unwrap();
        let conv = ConvParams::new(spec, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        let dense = expand_dilated(&conv).unwrap();
        assert_eq!(dense.spec.kernel, (4, 4));
        let mut want = vec![0.0; 16];
        want[0] = 1.0;
        want[3] = 2.0;
        want[12] = 3.0;
        want[15] = 4.0;
        assert_eq!(dense.weight, want);
    }

    #[test]
    fn expand_dilated_preserves_forward() {
        let mut r = rng();
        let spec = ConvSpec::depthwise_same(2, (2, 2), (1, 1), (2, 2)).unwrap();
        let conv: ConvParams = ConvParams::random(spec, true, &mut r);
        let dense = expand_dilated(&conv).unwrap();
        let x: Tensor = Tensor::random(Shape::new(1, 2, 9, 9), &mut r);
        let a = conv2d(&conv, &x).unwrap();
        let b = conv2d(&dense, &x).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() <= 1e-12);
    }

    #[test]
    fn identity_kernel_values() {
        let one: ConvParams = identity_as_dwconv(1, (1, 1)).unwrap();
        assert_eq!(one.weight, vec![1.0]);
        let three: ConvParams = identity_as_dwconv(1, (3, 3)).unwrap();
        assert_eq!(three.weight, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            identity_as_dwconv::<f64>(1, (2, 3)),
            Err(Error::EvenCanvas(2, 3))
        ));
    }

    #[test]
    fn identity_conv_is_identity_map() {
        let mut r = rng();
        let id: ConvParams = identity_as_dwconv(5, (3, 3)).unwrap();
        let x: Tensor = Tensor::random(Shape::new(2, 5, 6, 4), &mut r);
        let y = conv2d(&id, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn compose_outer_product() {
        let row_spec = ConvSpec::new(
            1,
            1,
            (1, 3),
            (1, 1),
            Padding::new(0, 0, 1, 1),
            (1, 1),
            1,
        )
        .unwrap();
        let col_spec = ConvSpec::new(
            1,
            1,
            (3, 1),
            (1, 1),
            Padding::new(1, 1, 0, 0),
            (1, 1),
            1,
        )
        .unwrap();
        let (a, b, c) = (2.0, 3.0, 5.0);
        let (d, e, f) = (7.0, 11.0, 13.0);
        let row = ConvParams::new(row_spec, vec![a, b, c], None).unwrap();
        let col = ConvParams::new(col_spec, vec![d, e, f], None).unwrap();
        let merged = compose_sequential_dw(&row, &col).unwrap();
        assert_eq!(merged.spec.kernel, (3, 3));
        assert_eq!(merged.spec.padding, Padding::uniform(1));
        assert_eq!(
            merged.weight,
            vec![d * a, d * b, d * c, e * a, e * b, e * c, f * a, f * b, f * c]
        );
        assert_eq!(merged.bias, None);
    }

    #[test]
    fn compose_centered_deltas() {
        let mut first: ConvParams = identity_as_dwconv(1, (3, 3)).unwrap();
        first.bias = Some(vec![0.25]);
        let mut second: ConvParams = identity_as_dwconv(1, (3, 3)).unwrap();
        second.bias = Some(vec![0.5]);
        let merged = compose_sequential_dw(&first, &second).unwrap();
        assert_eq!(merged.spec.kernel, (5, 5));
        for u in 0..5 {
            for v in 0..5 {
                let want = if (u, v) == (2, 2) { 1.0 } else { 0.0 };
                assert_eq!(merged.weight_at(0, 0, u, v), want);
            }
        }
        // bias = b2 + b1 * sum(w2) = 0.5 + 0.25 * 1
        assert_eq!(merged.bias, Some(vec![0.75]));
    }

    #[test]
    fn compose_matches_pad_up_front_sequential() {
        let mut r = rng();
        for stride in [(1, 1), (2, 2)] {
            let (row, col): (ConvParams, ConvParams) =
                serial_strip_pair(3, 7, stride, true, &mut r).unwrap();
            let merged = compose_sequential_dw(&row, &col).unwrap();
            for trial in 0..50 {
                let mut tr = r.derive(trial + 100 * stride.0 as u64);
                let x: Tensor = Tensor::random(Shape::new(1, 3, 10, 10), &mut tr);
                let seq = serial_forward_pad_up_front(&row, &col, &x).unwrap();
                let one = conv2d(&merged, &x).unwrap();
                assert!(
                    max_abs_diff(&seq, &one).unwrap() <= 1e-12,
                    "stride {stride:?} trial {trial}"
                );
            }
        }
    }

    #[test]
    fn compose_rejects_strided_first_stage() {
        let mut r = rng();
        let first: ConvParams = ConvParams::random(
            ConvSpec::depthwise_same(2, (1, 3), (2, 2), (1, 1)).unwrap(),
            false,
            &mut r,
        );
        let second: ConvParams = ConvParams::random(
            ConvSpec::depthwise_same(2, (3, 1), (1, 1), (1, 1)).unwrap(),
            false,
            &mut r,
        );
        assert!(matches!(
            compose_sequential_dw(&first, &second),
            Err(Error::StrideOnFirst(2, 2))
        ));
    }

    #[test]
    fn merge_overlap_counting_example() {
        let ones = |kernel: (usize, usize), dilation: (usize, usize)| -> ConvParams {
            let spec = ConvSpec::depthwise_same(1, kernel, (1, 1), dilation).unwrap();
            let len = spec.weight_count() as usize;
            ConvParams::new(spec, vec![1.0; len], None).unwrap()
        };
        let branches = vec![
            ones((3, 3), (1, 1)),
            embed_kernel(&ones((1, 3), (1, 1)), (3, 3)).unwrap(),
            embed_kernel(&ones((3, 1), (1, 1)), (3, 3)).unwrap(),
            expand_dilated(&ones((2, 2), (2, 2))).unwrap(),
        ];
        let merged = merge_parallel(&branches).unwrap();
        assert_eq!(
            merged.weight,
            vec![2.0, 2.0, 2.0, 2.0, 3.0, 2.0, 2.0, 2.0, 2.0]
        );
    }

    #[test]
    fn merge_zero_branch_and_biases() {
        let mut r = rng();
        let a = random_dw(2, (3, 3), &mut r);
        let mut zero = a.clone();
        zero.weight.iter_mut().for_each(|w| *w = 0.0);
        zero.bias = Some(vec![0.0, 0.0]);
        let merged = merge_parallel(&[a.clone(), zero]).unwrap();
        assert_eq!(merged.weight, a.weight);

        let with_bias = |b: f64| -> ConvParams {
            let spec = ConvSpec::depthwise_same(1, (1, 1), (1, 1), (1, 1)).unwrap();
            ConvParams::new(spec, vec![0.0], Some(vec![b])).unwrap()
        };
        let mut no_bias = with_bias(0.0);
        no_bias.bias = None;
        let merged = merge_parallel(&[with_bias(1.5), with_bias(-0.5), no_bias]).unwrap();
        assert_eq!(merged.bias, Some(vec![1.0]));
    }

    #[test]
    fn merge_rejects_spec_mismatch() {
        let mut r = rng();
        let a = random_dw(2, (3, 3), &mut r);
        let b = random_dw(2, (5, 5), &mut r);
        assert!(matches!(
            merge_parallel(&[a, b]),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn small_set_delta_fusion() {
        // Three centered deltas; the dilated branch has no center tap so it
        // is zeroed. Fused center weight is 3.
        let channels = 2;
        let delta = |kernel: (usize, usize)| -> ConvParams {
            let spec = ConvSpec::depthwise_same(channels, kernel, (1, 1), (1, 1)).unwrap();
            let mut weight = vec![0.0; spec.weight_count() as usize];
            let len = kernel.0 * kernel.1;
            let center = (kernel.0 / 2) * kernel.1 + kernel.1 / 2;
            for ch in 0..channels {
                weight[ch * len + center] = 1.0;
            }
            ConvParams::new(spec, weight, None).unwrap()
        };
        let dilated_zero = ConvParams::new(
            ConvSpec::depthwise_same(channels, (2, 2), (1, 1), (2, 2)).unwrap(),
            vec![0.0; channels * 4],
            None,
        )
        .unwrap();
        let set = RepBranchSet::new(
            vec![
                RepBranch::single(delta((3, 3))).unwrap(),
                RepBranch::single(delta((1, 3))).unwrap(),
                RepBranch::single(delta((3, 1))).unwrap(),
                RepBranch::single(dilated_zero).unwrap(),
            ],
            (3, 3),
            (1, 1),
            channels,
        )
        .unwrap();
        let fused = fuse_rep_small(&set).unwrap();
        for ch in 0..channels {
            assert_eq!(fused.weight_at(ch, 0, 1, 1), 3.0);
        }
    }

    #[test]
    fn small_parallel_fusion_equivalence() {
        let mut r = rng();
        let set: RepBranchSet = small_parallel_set(4, 3, true, &mut r).unwrap();
        let fused = fuse_rep_small(&set).unwrap();
        assert_eq!(fused.spec.weight_count(), 9 * 4);
        for trial in 0..100 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(1, 4, 9, 9), &mut tr);
            let many = set.forward(&x).unwrap();
            let one = conv2d(&fused, &x).unwrap();
            assert!(max_abs_diff(&many, &one).unwrap() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn small_serial_fusion_equivalence_stride2() {
        let mut r = rng();
        let set: RepBranchSet = small_serial_set(4, 3, true, &mut r).unwrap();
        let fused = fuse_rep_small(&set).unwrap();
        assert_eq!(fused.spec.stride, (2, 2));
        for trial in 0..100 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(1, 4, 10, 10), &mut tr);
            let many = set.forward(&x).unwrap();
            let one = conv2d(&fused, &x).unwrap();
            assert!(max_abs_diff(&many, &one).unwrap() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn medium_delta_fusion() {
        // All five branches as centered deltas: the two single-stage strips
        // among the asymmetric kernels center fine (odd extents), and the
        // serial pairs compose to deltas, so the fused kernel is 5 at center.
        let channels = 1;
        let delta = |kernel: (usize, usize)| -> ConvParams {
            let spec = ConvSpec::depthwise_same(channels, kernel, (1, 1), (1, 1)).unwrap();
            let mut weight = vec![0.0; kernel.0 * kernel.1];
            weight[(kernel.0 / 2) * kernel.1 + kernel.1 / 2] = 1.0;
            ConvParams::new(spec, weight, None).unwrap()
        };
        let strip_pair = |k: usize| -> RepBranch {
            RepBranch::serial(delta((1, k)), delta((k, 1))).unwrap()
        };
        let set = RepBranchSet::new(
            vec![
                RepBranch::single(delta((7, 7))).unwrap(),
                RepBranch::single(delta((3, 5))).unwrap(),
                RepBranch::single(delta((5, 3))).unwrap(),
                strip_pair(7),
                strip_pair(5),
            ],
            (7, 7),
            (1, 1),
            channels,
        )
        .unwrap();
        let fused = fuse_rep_medium(&set).unwrap();
        for u in 0..7 {
            for v in 0..7 {
                let want = if (u, v) == (3, 3) { 5.0 } else { 0.0 };
                assert_eq!(fused.weight_at(0, 0, u, v), want);
            }
        }
    }

    #[test]
    fn medium_fusion_equivalence() {
        let mut r = rng();
        let set: RepBranchSet = medium_set(4, 7, (1, 1), true, &mut r).unwrap();
        let fused = fuse_rep_medium(&set).unwrap();
        assert_eq!(fused.spec.weight_count(), 49 * 4);
        // Training-form cost per channel: 49+15+15+(7+7)+(5+5) = 103.
        assert_eq!(set.param_counts().0, 103 * 4);
        for trial in 0..100 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(1, 4, 11, 11), &mut tr);
            let many = set.forward(&x).unwrap();
            let one = conv2d(&fused, &x).unwrap();
            assert!(max_abs_diff(&many, &one).unwrap() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn medium_fusion_equivalence_stride2() {
        let mut r = rng();
        let set: RepBranchSet = medium_set(4, 7, (2, 2), true, &mut r).unwrap();
        let fused = fuse_rep_medium(&set).unwrap();
        for trial in 0..100 {
            let mut tr = r.derive(trial);
            let x: Tensor = Tensor::random(Shape::new(1, 4, 12, 12), &mut tr);
            let many = set.forward(&x).unwrap();
            let one = conv2d(&fused, &x).unwrap();
            assert!(max_abs_diff(&many, &one).unwrap() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn identity_branch_fuses_into_set() {
        let mut r = rng();
        let set = RepBranchSet::new(
            vec![
                RepBranch::identity(3),
                RepBranch::single(random_dw(3, (3, 3), &mut r)).unwrap(),
            ],
            (3, 3),
            (1, 1),
            3,
        )
        .unwrap();
        let fused = set.fuse().unwrap();
        let x: Tensor = Tensor::random(Shape::new(1, 3, 8, 8), &mut r);
        let many = set.forward(&x).unwrap();
        let one = conv2d(&fused, &x).unwrap();
        assert!(max_abs_diff(&many, &one).unwrap() <= 1e-12);
    }

    #[test]
    fn per_stage_padding_differs_only_on_border() {
        // The diagnostic alternative: per-stage "same" padding disagrees
        // with the merged kernel in a border ring but matches inside. With
        // orthogonal strips the ring only shows once stage biases are
        // nonzero (a zero padding row stays zero under a horizontal strip,
        // but pad-up-front fills it with the first stage's bias).
        let mut r = rng();
        let (row, col): (ConvParams, ConvParams) =
            serial_strip_pair(1, 3, (1, 1), true, &mut r).unwrap();
        let merged = compose_sequential_dw(&row, &col).unwrap();
        let x: Tensor = Tensor::random(Shape::new(1, 1, 8, 8), &mut r);
        let alt = serial_forward_per_stage(&row, &col, &x).unwrap();
        let one = conv2d(&merged, &x).unwrap();
        let mut interior_diff = 0.0f64;
        let mut border_diff = 0.0f64;
        for i in 0..8 {
            for j in 0..8 {
                let d = (alt.at(0, 0, i, j) - one.at(0, 0, i, j)).abs();
                if i == 0 || j == 0 || i == 7 || j == 7 {
                    border_diff = border_diff.max(d);
                } else {
                    interior_diff = interior_diff.max(d);
                }
            }
        }
        assert!(interior_diff <= 1e-12, "interior {interior_diff}");
        assert!(border_diff > 1e-6, "border should differ, got {border_diff}");
    }
}
