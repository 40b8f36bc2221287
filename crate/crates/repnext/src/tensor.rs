//! Dense NCHW tensor storage plus the channel split/join primitives the
//! chunk convolution is built on.
//!
//! Element order is fixed: N-major, then C, then H, then W, row-major within
//! a plane. Every operation in the crate relies on that layout, as does the
//! weight file format.

use std::fmt;

use crate::error::{Error, Result};

/// Element precision tag carried by tensors and weight records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    Single,
    Double,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Single => 1,
            DType::Double => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::Single),
            2 => Some(DType::Double),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::Single => write!(f, "single"),
            DType::Double => write!(f, "double"),
        }
    }
}

/// Scalar element type usable by the engine. Double precision is the
/// verification default; single precision is provided for benchmarks.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    // Named from_double/to_double so they don't collide with the Option
    // returning num_traits::ToPrimitive::to_f64 pulled in by Float.
    fn from_double(v: f64) -> Self;
    fn to_double(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::Single;

    fn from_double(v: f64) -> Self {
        v as f32
    }
    fn to_double(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Double;

    fn from_double(v: f64) -> Self {
        v
    }
    fn to_double(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Shape of a 4-D feature map: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense real-valued NCHW tensor. Immutable after construction from the
/// caller's perspective; all operations are pure functions, so tensors are
/// safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "all shape components must be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + i) * self.shape.w + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(n, c, i, j)]
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_double(v.to_double())).collect(),
        }
    }

    /// Elementwise sum. Shapes must match.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {} to {}",
                other.shape, self.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Fills a tensor from the seeded generator, uniform in [-1, 1].
    pub fn random(shape: Shape, rng: &mut SplitMix64) -> Self {
        let data = (0..shape.len()).map(|_| T::from_double(rng.next_uniform())).collect();
        Tensor { shape, data }
    }
}

/// Splits `x` evenly along the channel dimension into `parts` tensors.
pub fn chunk_channels<T: Element>(x: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let Shape { n, c, h, w } = x.shape();
    if parts == 0 || c % parts != 0 {
        return Err(Error::NonDivisibleChannels { channels: c, parts });
    }
    let cp = c / parts;
    let plane = h * w;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut data = Vec::with_capacity(n * cp * plane);
        for batch in 0..n {
            let start = (batch * c + p * cp) * plane;
            data.extend_from_slice(&x.data()[start..start + cp * plane]);
        }
        out.push(Tensor {
            shape: Shape::new(n, cp, h, w),
            data,
        });
    }
    Ok(out)
}

/// Concatenates tensors along the channel dimension, in list order.
pub fn concat_channels<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of zero parts".to_string()))?;
    let Shape { n, h, w, .. } = first.shape();
    let mut c_total = 0;
    for part in parts {
        let s = part.shape();
        if s.n != n || s.h != h || s.w != w {
            return Err(Error::ShapeMismatch(format!(
                "concat parts disagree: {} vs {}",
                first.shape(),
                s
            )));
        }
        c_total += s.c;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c_total * plane);
    for batch in 0..n {
        for part in parts {
            let cp = part.shape().c;
            let start = batch * cp * plane;
            data.extend_from_slice(&part.data()[start..start + cp * plane]);
        }
    }
    Ok(Tensor {
        shape: Shape::new(n, c_total, h, w),
        data,
    })
}

/// Worst-case elementwise divergence |a - b|, the verification metric.
pub fn max_abs_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {} with {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = (x.to_double() - y.to_double()).abs();
        if d > worst {
            worst = d;
        }
    }
    Ok(worst)
}

/// Deterministic 64-bit generator (splitmix-style) used for every seeded
/// weight and input in the crate, so runs reproduce bit-for-bit across
/// platforms. State advances by the golden-ratio increment; outputs are
/// finalized with two xor-shift multiplies.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1): the top 53 bits map to [0, 1), then stretch.
    pub fn next_uniform(&mut self) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * unit - 1.0
    }

    /// Derives an independent stream, used for per-trial seeds.
    pub fn derive(&self, index: u64) -> SplitMix64 {
        let mut base = SplitMix64::new(self.state ^ 0xA076_1D64_78BD_642F);
        for _ in 0..2 {
            base.next_u64();
        }
        SplitMix64::new(base.next_u64().wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn state(&self) -> u64 {
        self.state
    }
}
