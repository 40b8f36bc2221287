//! Reference forward implementations of convolution, inference-mode batch
//! normalization, and GELU. Every fused form in the crate is checked against
//! these.
//!
//! The convolution is a direct cross-correlation over a zero-padded copy of
//! the input. The per-output-element summation order is fixed (channel, then
//! kernel row, then kernel column) so results are bitwise deterministic; the
//! rayon path splits work across (batch, output-channel) planes, which keeps
//! each element's summation order intact and therefore produces bitwise
//! identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, SplitMix64, Tensor};

/// Minimum output elements before a conv is worth farming out to rayon.
#[cfg(feature = "parallel")]
const PAR_MIN_OUT_ELEMS: usize = 4096;

/// Minimum elements before an elementwise op is worth farming out.
#[cfg(feature = "parallel")]
const PAR_MIN_MAP_ELEMS: usize = 16384;

/// Implicit zero padding, per side, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding { top, bottom, left, right }
    }

    pub fn uniform(p: usize) -> Self {
        Padding::new(p, p, p, p)
    }

    pub fn add(self, other: Padding) -> Padding {
        Padding::new(
            self.top + other.top,
            self.bottom + other.bottom,
            self.left + other.left,
            self.right + other.right,
        )
    }

    pub fn is_zero(self) -> bool {
        self == Padding::default()
    }
}

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        dilation: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::GroupMismatch(
                "channel and group counts must be >= 1".to_string(),
            ));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::GroupMismatch(format!(
                "in={} out={} not divisible by groups={}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride.0 == 0
            || self.stride.1 == 0
            || self.dilation.0 == 0
            || self.dilation.1 == 0
        {
            return Err(Error::ShapeMismatch(
                "kernel, stride and dilation components must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Depthwise spec with "same" padding derived from the effective kernel
    /// extent. The effective extent must be odd so the padding is symmetric.
    pub fn depthwise_same(
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        let eff_h = (kernel.0 - 1) * dilation.0 + 1;
        let eff_w = (kernel.1 - 1) * dilation.1 + 1;
        if eff_h % 2 == 0 || eff_w % 2 == 0 {
            return Err(Error::ParityMismatch {
                kh: eff_h,
                kw: eff_w,
                canvas_h: eff_h,
                canvas_w: eff_w,
            });
        }
        let pad = Padding::new(
            (eff_h - 1) / 2,
            (eff_h - 1) / 2,
            (eff_w - 1) / 2,
            (eff_w - 1) / 2,
        );
        ConvSpec::new(channels, channels, kernel, stride, pad, dilation, channels)
    }

    /// Dense 1x1 pointwise spec.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        ConvSpec::new(
            in_channels,
            out_channels,
            (1, 1),
            (1, 1),
            Padding::default(),
            (1, 1),
            1,
        )
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Number of weight elements implied by the geometry.
    pub fn weight_count(&self) -> u64 {
        self.out_channels as u64 * self.in_per_group() as u64 * self.kernel.0 as u64
            * self.kernel.1 as u64
    }

    /// Multiply-accumulates for one forward pass at the given input shape,
    /// counting padded-zero taps like the closed forms do.
    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        let out = output_shape(self, in_shape)?;
        let per_elem = self.in_per_group() as u64 * self.kernel.0 as u64 * self.kernel.1 as u64;
        Ok(out.len() as u64 * per_elem)
    }
}

/// Learnable state of one convolution. The weight is stored flat in
/// (out_channel, in_channel_within_group, kernel_row, kernel_col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Element = f64> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(spec: ConvSpec, weight: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weight.len() as u64 != spec.weight_count() {
            return Err(Error::ShapeMismatch(format!(
                "weight length {} does not match spec ({} expected)",
                weight.len(),
                spec.weight_count()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != spec.out_channels {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} does not match out_channels {}",
                    b.len(),
                    spec.out_channels
                )));
            }
        }
        Ok(ConvParams { spec, weight, bias })
    }

    /// Seeded init: uniform [-1,1] scaled by 1/sqrt(fan-in), which keeps
    /// activations O(1) so absolute tolerances stay meaningful.
    pub fn random(spec: ConvSpec, with_bias: bool, rng: &mut SplitMix64) -> Self {
        let fan_in = (spec.in_per_group() * spec.kernel.0 * spec.kernel.1) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let weight = (0..spec.weight_count() as usize)
            .map(|_| T::from_double(rng.next_uniform() * scale))
            .collect();
        let bias = with_bias.then(|| {
            (0..spec.out_channels)
                .map(|_| T::from_double(rng.next_uniform() * scale))
                .collect()
        });
        ConvParams { spec, weight, bias }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, u: usize, v: usize) -> usize {
        ((o * self.spec.in_per_group() + c) * self.spec.kernel.0 + u) * self.spec.kernel.1 + v
    }

    #[inline]
    pub fn weight_at(&self, o: usize, c: usize, u: usize, v: usize) -> T {
        self.weight[self.weight_index(o, c, u, v)]
    }

    pub fn bias_at(&self, o: usize) -> T {
        self.bias.as_ref().map_or(T::zero(), |b| b[o])
    }

    pub fn cast<U: Element>(&self) -> ConvParams<U> {
        ConvParams {
            spec: self.spec,
            weight: self.weight.iter().map(|v| U::from_double(v.to_double())).collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::from_double(v.to_double())).collect()),
        }
    }

    pub fn param_counts(&self) -> (u64, u64) {
        (
            self.weight.len() as u64,
            self.bias.as_ref().map_or(0, |b| b.len() as u64),
        )
    }
}

/// Inference-mode batch normalization state for C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BNParams<T: Element = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Element> BNParams<T> {
    pub fn new(
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        eps: T,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(
                "batch-norm arrays must share one channel count".to_string(),
            ));
        }
        if eps < T::zero() {
            return Err(Error::ShapeMismatch("batch-norm eps must be >= 0".to_string()));
        }
        if running_var.iter().any(|&v| !(v + eps > T::zero())) {
            return Err(Error::ShapeMismatch(
                "running_var + eps must be > 0 per channel".to_string(),
            ));
        }
        Ok(BNParams { gamma, beta, running_mean, running_var, eps })
    }

    pub fn identity(channels: usize, eps: T) -> Self {
        BNParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one() - eps; channels],
            eps,
        }
    }

    /// Seeded init with gamma and variance near 1 so folded scales stay O(1).
    pub fn random(channels: usize, eps: T, rng: &mut SplitMix64) -> Self {
        let mut draw = |center: f64, spread: f64| -> Vec<T> {
            (0..channels)
                .map(|_| T::from_double(center + spread * rng.next_uniform()))
                .collect()
        };
        let gamma = draw(1.0, 0.5);
        let beta = draw(0.0, 0.5);
        let running_mean = draw(0.0, 0.5);
        let running_var = draw(1.0, 0.5);
        BNParams { gamma, beta, running_mean, running_var, eps }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Element>(&self) -> BNParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_double(x.to_double())).collect();
        BNParams {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            eps: U::from_double(self.eps.to_double()),
        }
    }
}

/// Output shape of a convolution under the standard floor arithmetic.
pub fn output_shape(spec: &ConvSpec, in_shape: Shape) -> Result<Shape> {
    if in_shape.c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, spec expects {}",
            in_shape.c, spec.in_channels
        )));
    }
    let eff_h = (spec.kernel.0 - 1) * spec.dilation.0 + 1;
    let eff_w = (spec.kernel.1 - 1) * spec.dilation.1 + 1;
    let padded_h = in_shape.h + spec.padding.top + spec.padding.bottom;
    let padded_w = in_shape.w + spec.padding.left + spec.padding.right;
    if padded_h < eff_h || padded_w < eff_w {
        return Err(Error::DegenerateOutput(format!(
            "padded input {}x{} smaller than effective kernel {}x{}",
            padded_h, padded_w, eff_h, eff_w
        )));
    }
    let out_h = (padded_h - eff_h) / spec.stride.0 + 1;
    let out_w = (padded_w - eff_w) / spec.stride.1 + 1;
    Ok(Shape::new(in_shape.n, spec.out_channels, out_h, out_w))
}

/// Zero-pads the input so the main loop can run without bounds checks and so
/// instrumented MAC counts include padded taps, matching the closed forms.
/// Public because the pad-up-front serial evaluation pads explicitly.
pub fn pad_explicit<T: Element>(x: &Tensor<T>, pad: Padding) -> Tensor<T> {
    if pad.is_zero() {
        return x.clone();
    }
    let Shape { n, c, h, w } = x.shape();
    let ph = h + pad.top + pad.bottom;
    let pw = w + pad.left + pad.right;
    let mut out = Tensor::zeros(Shape::new(n, c, ph, pw));
    for batch in 0..n {
        for ch in 0..c {
            for row in 0..h {
                let src = x.index(batch, ch, row, 0);
                let dst = out.index(batch, ch, row + pad.top, pad.left);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

/// Computes one (batch, out-channel) output plane. `padded` has the padding
/// already applied; summation runs bias-first, then (c, u, v).
#[inline]
fn conv_plane<T: Element>(
    params: &ConvParams<T>,
    padded: &Tensor<T>,
    n: usize,
    o: usize,
    out_h: usize,
    out_w: usize,
    plane: &mut [T],
) {
    let spec = &params.spec;
    let in_pg = spec.in_per_group();
    let group = o / (spec.out_channels / spec.groups);
    let in_base = group * in_pg;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let bias = params.bias_at(o);
    let pw = padded.shape().w;

    for i in 0..out_h {
        for j in 0..out_w {
            let mut acc = bias;
            for c in 0..in_pg {
                let chan_base = padded.index(n, in_base + c, 0, 0);
                for u in 0..kh {
                    let row_base = chan_base + (i * sh + u * dh) * pw + j * sw;
                    for v in 0..kw {
                        acc = acc + params.weight_at(o, c, u, v) * padded.data()[row_base + v * dw];
                    }
                }
            }
            plane[i * out_w + j] = acc;
        }
    }
}

fn conv2d_into<T: Element>(params: &ConvParams<T>, x: &Tensor<T>, parallel: bool) -> Result<Tensor<T>> {
    let out_shape = output_shape(&params.spec, x.shape())?;
    let padded = pad_explicit(x, params.spec.padding);
    let mut out = Tensor::zeros(out_shape);
    let plane_len = out_shape.h * out_shape.w;
    let out_c = out_shape.c;

    #[cfg(feature = "parallel")]
    if parallel && out_shape.len() >= PAR_MIN_OUT_ELEMS {
        out.data_mut()
            .par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(idx, plane)| {
                let n = idx / out_c;
                let o = idx % out_c;
                conv_plane(params, &padded, n, o, out_shape.h, out_shape.w, plane);
            });
        return Ok(out);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallel;

    for idx in 0..out_shape.n * out_c {
        let n = idx / out_c;
        let o = idx % out_c;
        let plane = &mut out.data_mut()[idx * plane_len..(idx + 1) * plane_len];
        conv_plane(params, &padded, n, o, out_shape.h, out_shape.w, plane);
    }
    Ok(out)
}

/// Direct cross-correlation forward. Uses the rayon path for large outputs
/// when the `parallel` feature is enabled; results are bitwise identical to
/// the sequential path either way.
pub fn conv2d<T: Element>(params: &ConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_into(params, x, true)
}

/// Sequential reference path, always available.
pub fn conv2d_seq<T: Element>(params: &ConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_into(params, x, false)
}

/// Rayon path over (batch, out-channel) planes.
#[cfg(feature = "parallel")]
pub fn conv2d_par<T: Element>(params: &ConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = output_shape(&params.spec, x.shape())?;
    let padded = pad_explicit(x, params.spec.padding);
    let mut out = Tensor::zeros(out_shape);
    let plane_len = out_shape.h * out_shape.w;
    let out_c = out_shape.c;
    out.data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / out_c;
            let o = idx % out_c;
            conv_plane(params, &padded, n, o, out_shape.h, out_shape.w, plane);
        });
    Ok(out)
}

/// Instrumented forward: identical arithmetic, plus one count per executed
/// multiply (padded taps included). Used to cross-check the analytic MAC
/// formulas, so it stays sequential and literal.
pub fn conv2d_counting<T: Element>(params: &ConvParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
    let out_shape = output_shape(&params.spec, x.shape())?;
    let padded = pad_explicit(x, params.spec.padding);
    let mut out = Tensor::zeros(out_shape);
    let spec = &params.spec;
    let in_pg = spec.in_per_group();
    let out_pg = spec.out_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let mut macs = 0u64;

    for n in 0..out_shape.n {
        for o in 0..out_shape.c {
            let in_base = (o / out_pg) * in_pg;
            let bias = params.bias_at(o);
            for i in 0..out_shape.h {
                for j in 0..out_shape.w {
                    let mut acc = bias;
                    for c in 0..in_pg {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc = acc
                                    + params.weight_at(o, c, u, v)
                                        * padded.at(n, in_base + c, i * sh + u * dh, j * sw + v * dw);
                                macs += 1;
                            }
                        }
                    }
                    let idx = out.index(n, o, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok((out, macs))
}

/// Inference-mode batch normalization.
pub fn batchnorm_infer<T: Element>(bn: &BNParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let Shape { n, c, h, w } = x.shape();
    if c != bn.channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, batch norm has {}",
            c,
            bn.channels()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for batch in 0..n {
        for ch in 0..c {
            let denom = (bn.running_var[ch] + bn.eps).sqrt();
            let gamma = bn.gamma[ch];
            let beta = bn.beta[ch];
            let mean = bn.running_mean[ch];
            let base = x.index(batch, ch, 0, 0);
            for k in 0..plane {
                out.data_mut()[base + k] = gamma * (x.data()[base + k] - mean) / denom + beta;
            }
        }
    }
    Ok(out)
}

/// Batch-norm multiply count for the instrumented MAC tally: one multiply
/// per element (the per-channel scale).
pub fn batchnorm_macs(shape: Shape) -> u64 {
    shape.len() as u64
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF evaluated through
/// erfc, good to well under 1e-12 relative error. The tanh approximation is
/// deliberately not used.
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Elementwise GELU.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());

    #[cfg(feature = "parallel")]
    if x.data().len() >= PAR_MIN_MAP_ELEMS {
        out.data_mut()
            .par_iter_mut()
            .zip(x.data().par_iter())
            .for_each(|(o, &v)| *o = T::from_double(gelu_scalar(v.to_double())));
        return out;
    }

    for (o, &v) in out.data_mut().iter_mut().zip(x.data().iter()) {
        *o = T::from_double(gelu_scalar(v.to_double()));
    }
    out
}

/// Global average pool over the spatial plane: (N,C,H,W) -> (N,C,1,1).
/// Accumulates in f64 regardless of element type. Counted as zero MACs by
/// convention (pure adds plus one scale per channel).
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let plane = s.h * s.w;
    let inv = 1.0 / plane as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let sum: f64 = x.data()[base..base + plane]
                .iter()
                .map(|v| v.to_double())
                .sum();
            out.data_mut()[n * s.c + c] = T::from_double(sum * inv);
        }
    }
    out
}
