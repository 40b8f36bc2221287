//! Full-model assembly: stem, four stages of MetaNeXt blocks, inter-stage
//! downsampling, classifier head. Owns configuration, parameter/MAC
//! accounting, and weight serialization.
//!
//! Models are immutable after build/load; `forward` takes `&self` and is
//! re-entrant, so concurrent forwards on one model are fine.

pub mod config;
pub mod count;
pub mod weights;

pub use config::{DownsampleMode, ModelConfig};

use crate::blocks::{
    BranchToggles, DownsampleBlock, MetaNeXtBlock, ParamCount, ParamFn, ParamMeta,
    PlainDownsample, Stem,
};
use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_counting, global_avg_pool, ConvParams, ConvSpec};
use crate::tensor::{Element, Shape, SplitMix64, Tensor};

/// One inter-stage downsample layer, in whichever of the two builds the
/// config selects.
#[derive(Debug, Clone, PartialEq)]
pub enum DownsampleLayer<T: Element = f64> {
    CopyConv(DownsampleBlock<T>),
    Plain3x3(PlainDownsample<T>),
}

impl<T: Element> DownsampleLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            DownsampleLayer::CopyConv(b) => b.forward(x),
            DownsampleLayer::Plain3x3(b) => b.forward(x),
        }
    }

    fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        match self {
            DownsampleLayer::CopyConv(b) => b.forward_counting(x),
            DownsampleLayer::Plain3x3(b) => b.forward_counting(x),
        }
    }

    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        match self {
            DownsampleLayer::CopyConv(b) => b.out_shape(in_shape),
            DownsampleLayer::Plain3x3(b) => b.out_shape(in_shape),
        }
    }

    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        match self {
            DownsampleLayer::CopyConv(b) => b.macs(in_shape),
            DownsampleLayer::Plain3x3(b) => b.macs(in_shape),
        }
    }

    pub fn param_counts(&self) -> ParamCount {
        match self {
            DownsampleLayer::CopyConv(b) => b.param_counts(),
            DownsampleLayer::Plain3x3(b) => b.param_counts(),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: ParamFn<T>) -> Result<()> {
        match self {
            DownsampleLayer::CopyConv(b) => b.visit_params(prefix, f),
            DownsampleLayer::Plain3x3(b) => b.visit_params(prefix, f),
        }
    }

    fn fuse(&self) -> Result<Self> {
        Ok(match self {
            DownsampleLayer::CopyConv(b) => DownsampleLayer::CopyConv(b.fuse()?),
            DownsampleLayer::Plain3x3(b) => DownsampleLayer::Plain3x3(b.fuse()?),
        })
    }

    fn cast<U: Element>(&self) -> DownsampleLayer<U> {
        match self {
            DownsampleLayer::CopyConv(b) => DownsampleLayer::CopyConv(b.cast()),
            DownsampleLayer::Plain3x3(b) => DownsampleLayer::Plain3x3(b.cast()),
        }
    }
}

/// Whether a model still carries its multi-branch training topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Training,
    Fused,
}

impl Form {
    pub fn as_str(self) -> &'static str {
        match self {
            Form::Training => "training",
            Form::Fused => "fused",
        }
    }
}

/// A complete model. Blocks appear in traversal order: stem, then for each
/// stage its blocks followed by the downsample into the next stage, then
/// the classifier head. Weight records serialize in exactly this order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f64> {
    pub config: ModelConfig,
    pub stem: Stem<T>,
    pub stages: [Vec<MetaNeXtBlock<T>>; 4],
    pub downsamples: [DownsampleLayer<T>; 3],
    /// Classifier projection applied after global average pooling. Plumbing
    /// the published architecture tables do not cover; excluded from the
    /// per-block closed-form checks but included in model totals.
    pub head: ConvParams<T>,
    form: Form,
}

/// Build the training-form model for `config`, deterministically from
/// `seed`: one generator stream, consumed in traversal order.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let toggles: BranchToggles = config.branches;

    let stem = Stem::random(config.stage_widths[0], config.bias, config.bn_eps, &mut rng)?;

    let mut stages: [Vec<MetaNeXtBlock<T>>; 4] = Default::default();
    let mut downsamples: Vec<DownsampleLayer<T>> = Vec::with_capacity(3);
    for i in 0..4 {
        let width = config.stage_widths[i];
        let hidden = config.hidden_width(width);
        for _ in 0..config.stage_depths[i] {
            stages[i].push(MetaNeXtBlock::random(
                width,
                config.k_s,
                config.k_m,
                config.k_l,
                toggles,
                hidden,
                config.bias,
                config.bn_eps,
                &mut rng,
            )?);
        }
        if i < 3 {
            let next = config.stage_widths[i + 1];
            let layer = match config.downsample {
                DownsampleMode::CopyConv => DownsampleLayer::CopyConv(DownsampleBlock::random(
                    width,
                    next,
                    config.k_s,
                    config.k_m,
                    config.hidden_width(next),
                    config.bias,
                    config.bn_eps,
                    &mut rng,
                )?),
                DownsampleMode::Plain3x3 => DownsampleLayer::Plain3x3(PlainDownsample::random(
                    width,
                    next,
                    config.bias,
                    config.bn_eps,
                    &mut rng,
                )?),
            };
            downsamples.push(layer);
        }
    }

    let head = ConvParams::random(
        ConvSpec::pointwise(config.stage_widths[3], config.classes)?,
        config.bias,
        &mut rng,
    );

    let downsamples: [DownsampleLayer<T>; 3] =
        downsamples.try_into().expect("exactly three downsamples");
    Ok(Model {
        config: config.clone(),
        stem,
        stages,
        downsamples,
        head,
        form: Form::Training,
    })
}

/// Fuse every block; the result computes the same function with strictly
/// fewer parameters and MACs.
pub fn fuse_model<T: Element>(model: &Model<T>) -> Result<Model<T>> {
    if model.form == Form::Fused {
        return Err(Error::AlreadyFused);
    }
    let mut stages: [Vec<MetaNeXtBlock<T>>; 4] = Default::default();
    for (i, stage) in model.stages.iter().enumerate() {
        for block in stage {
            stages[i].push(block.fuse()?);
        }
    }
    let downsamples = [
        model.downsamples[0].fuse()?,
        model.downsamples[1].fuse()?,
        model.downsamples[2].fuse()?,
    ];
    Ok(Model {
        config: model.config.clone(),
        stem: model.stem.fuse()?,
        stages,
        downsamples,
        head: model.head.clone(),
        form: Form::Fused,
    })
}

/// Shape trace entry: the resolution a stage operates at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct StageTrace {
    pub stage: usize,
    pub blocks: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Element> Model<T> {
    pub fn form(&self) -> Form {
        self.form
    }

    pub fn is_fused(&self) -> bool {
        self.form == Form::Fused
    }

    fn check_input(&self, in_shape: Shape) -> Result<()> {
        if in_shape.c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "model input must have 3 channels, got {}",
                in_shape.c
            )));
        }
        if in_shape.h % 32 != 0 || in_shape.w % 32 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial size must be divisible by 32 (got {}x{})",
                in_shape.h, in_shape.w
            )));
        }
        Ok(())
    }

    /// Per-stage operating resolutions for a valid input shape, by shape
    /// arithmetic alone (no forward pass).
    pub fn stage_traces(&self, in_shape: Shape) -> Result<Vec<StageTrace>> {
        self.check_input(in_shape)?;
        let mut shape = self.stem.out_shape(in_shape)?;
        let mut traces = Vec::with_capacity(4);
        for i in 0..4 {
            for block in &self.stages[i] {
                shape = block.out_shape(shape)?;
            }
            traces.push(StageTrace {
                stage: i + 1,
                blocks: self.stages[i].len(),
                channels: shape.c,
                h: shape.h,
                w: shape.w,
            });
            if i < 3 {
                shape = self.downsamples[i].out_shape(shape)?;
            }
        }
        Ok(traces)
    }

    /// Logits shape for a valid input: (N, classes, 1, 1).
    pub fn out_shape(&self, in_shape: Shape) -> Result<Shape> {
        self.check_input(in_shape)?;
        Ok(Shape::new(in_shape.n, self.config.classes, 1, 1))
    }

    /// Full forward pass: logits with spatial extent 1x1.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut t = self.stem.forward(x)?;
        for i in 0..4 {
            for block in &self.stages[i] {
                t = block.forward(&t)?;
            }
            if i < 3 {
                t = self.downsamples[i].forward(&t)?;
            }
        }
        conv2d(&self.head, &global_avg_pool(&t))
    }

    /// Forward pass that also counts every multiply executed. Identical
    /// arithmetic to `forward`; the pool is counted as zero by convention.
    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.check_input(x.shape())?;
        let (mut t, mut macs) = self.stem.forward_counting(x)?;
        for i in 0..4 {
            for block in &self.stages[i] {
                let (next, m) = block.forward_counting(&t)?;
                t = next;
                macs += m;
            }
            if i < 3 {
                let (next, m) = self.downsamples[i].forward_counting(&t)?;
                t = next;
                macs += m;
            }
        }
        let (logits, m) = conv2d_counting(&self.head, &global_avg_pool(&t))?;
        Ok((logits, macs + m))
    }

    /// Closed-form MAC total at a given input shape.
    pub fn macs(&self, in_shape: Shape) -> Result<u64> {
        self.check_input(in_shape)?;
        let mut shape = in_shape;
        let mut macs = self.stem.macs(shape)?;
        shape = self.stem.out_shape(shape)?;
        for i in 0..4 {
            for block in &self.stages[i] {
                macs += block.macs(shape)?;
                shape = block.out_shape(shape)?;
            }
            if i < 3 {
                macs += self.downsamples[i].macs(shape)?;
                shape = self.downsamples[i].out_shape(shape)?;
            }
        }
        let pooled = Shape::new(shape.n, shape.c, 1, 1);
        Ok(macs + self.head.spec.macs(pooled)?)
    }

    /// Closed-form parameter tally over every block including the head.
    pub fn param_counts(&self) -> ParamCount {
        let mut count = self.stem.param_counts();
        for stage in &self.stages {
            for block in stage {
                count += block.param_counts();
            }
        }
        for down in &self.downsamples {
            count += down.param_counts();
        }
        let (w, b) = self.head.param_counts();
        count + ParamCount { weights: w, biases: b, norm: 0 }
    }

    /// Visit every stored parameter array in traversal order.
    pub fn visit_params(&mut self, f: ParamFn<T>) -> Result<()> {
        self.stem.visit_params("stem", f)?;
        for i in 0..4 {
            for (j, block) in self.stages[i].iter_mut().enumerate() {
                block.visit_params(&format!("stages.{i}.blocks.{j}"), f)?;
            }
            if i < 3 {
                self.downsamples[i].visit_params(&format!("downsamples.{i}"), f)?;
            }
        }
        let spec = self.head.spec;
        let dims = [spec.out_channels, spec.in_per_group(), 1, 1];
        let meta = ParamMeta { dims: &dims, buffer: false };
        f("head.weight".to_string(), &mut self.head.weight, meta)?;
        if let Some(bias) = &mut self.head.bias {
            let meta = ParamMeta { dims: &[spec.out_channels], buffer: false };
            f("head.bias".to_string(), bias, meta)?;
        }
        Ok(())
    }

    /// Brute-force count of stored parameter values, independent of the
    /// closed forms in `param_counts`. Norm running statistics are buffers,
    /// not parameters, and are skipped here (they are still serialized).
    pub fn enumerate_params(&self) -> u64 {
        let mut clone = self.clone();
        let mut total: u64 = 0;
        clone
            .visit_params(&mut |_name, values, meta| {
                if !meta.buffer {
                    total += values.len() as u64;
                }
                Ok(())
            })
            .expect("enumeration cannot fail");
        total
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stem: self.stem.cast(),
            stages: [
                self.stages[0].iter().map(|b| b.cast()).collect(),
                self.stages[1].iter().map(|b| b.cast()).collect(),
                self.stages[2].iter().map(|b| b.cast()).collect(),
                self.stages[3].iter().map(|b| b.cast()).collect(),
            ],
            downsamples: [
                self.downsamples[0].cast(),
                self.downsamples[1].cast(),
                self.downsamples[2].cast(),
            ],
            head: self.head.cast(),
            form: self.form,
        }
    }
}
