//! Weight-file serialization. The format is deliberately trivial so any
//! language can parse it bit-exactly:
//!
//! ```text
//! magic "RPNX" | version u32 LE | record count u32 LE
//! per record:
//!   name length u32 LE | name UTF-8 bytes
//!   dtype u8 (1 = single, 2 = double) | rank u8 | dims rank x u32 LE
//!   raw values, little-endian, prod(dims) * width bytes
//! ```
//!
//! Records appear in model traversal order and names are unique. Loading
//! validates the records against the schema derived from the config (both
//! forms are acceptable and distinguishable by their record names), then
//! overwrites a freshly built model's arrays, so a save/load roundtrip is
//! bitwise lossless.

use std::path::Path;

use super::{build_model, fuse_model, Form, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"RPNX";
pub const FORMAT_VERSION: u32 = 1;

/// Guard against absurd allocations from corrupt headers.
const MAX_RECORDS: u32 = 1 << 20;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u8 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    /// Little-endian element bytes; length is prod(dims) * dtype width.
    pub raw: Vec<u8>,
}

impl Record {
    pub fn value_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn from_values<T: Element>(name: String, dims: Vec<u32>, values: &[T]) -> Record {
        debug_assert_eq!(
            dims.iter().map(|&d| d as u64).product::<u64>(),
            values.len() as u64
        );
        let mut raw = Vec::with_capacity(values.len() * T::DTYPE.byte_width());
        for &v in values {
            v.write_le(&mut raw);
        }
        Record { name, dtype: T::DTYPE, dims, raw }
    }

    pub fn to_values<T: Element>(&self) -> Vec<T> {
        self.raw
            .chunks_exact(self.dtype.byte_width())
            .map(T::read_le)
            .collect()
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.push(rec.dtype.code());
        out.push(rec.dims.len() as u8);
        for &d in &rec.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&rec.raw);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptFile(format!(
                "truncated reading {what} at byte {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptFile(format!("bad magic {magic:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptFile(format!(
            "unsupported format version {version}"
        )));
    }
    let count = cur.u32("record count")?;
    if count > MAX_RECORDS {
        return Err(Error::CorruptFile(format!("implausible record count {count}")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::CorruptFile(format!("implausible name length {name_len}")));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| Error::CorruptFile("record name is not UTF-8".to_string()))?
            .to_string();
        let code = cur.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::CorruptFile(format!("unknown dtype code {code}")))?;
        let rank = cur.u8("rank")?;
        if rank > MAX_RANK {
            return Err(Error::CorruptFile(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(cur.u32("dims")?);
        }
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        let byte_len = count
            .checked_mul(dtype.byte_width() as u64)
            .filter(|&n| n <= u32::MAX as u64)
            .ok_or_else(|| Error::CorruptFile(format!("record '{name}' dims overflow")))?;
        let raw = cur
            .take(byte_len as usize, "values")
            .map_err(|_| {
                Error::CorruptFile(format!("truncated values for record '{name}'"))
            })?
            .to_vec();
        records.push(Record { name, dtype, dims, raw });
    }
    if cur.pos != bytes.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn write_store(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records))?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<Vec<Record>> {
    decode(&std::fs::read(path)?)
}

/// All of a model's parameter arrays as records, in traversal order.
pub fn collect_records<T: Element>(model: &Model<T>) -> Vec<Record> {
    let mut clone = model.clone();
    let mut records = Vec::new();
    clone
        .visit_params(&mut |name, values, meta| {
            let dims32 = meta.dims.iter().map(|&d| d as u32).collect();
            records.push(Record::from_values(name, dims32, values));
            Ok(())
        })
        .expect("collection visitor cannot fail");
    records
}

pub fn save_weights<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    write_store(path, &collect_records(model))
}

/// (name, dims) schema of a model's records, for exact-match validation.
pub fn schema_of<T: Element>(model: &Model<T>) -> Vec<(String, Vec<u32>)> {
    collect_records(model)
        .into_iter()
        .map(|r| (r.name, r.dims))
        .collect()
}

fn first_mismatch(records: &[Record], schema: &[(String, Vec<u32>)]) -> Option<(usize, Error)> {
    for i in 0..records.len().max(schema.len()) {
        match (records.get(i), schema.get(i)) {
            (Some(rec), Some((name, dims))) => {
                if rec.name != *name {
                    return Some((
                        i,
                        Error::SchemaMismatch {
                            record: rec.name.clone(),
                            reason: format!("expected record '{name}' at position {i}"),
                        },
                    ));
                }
                if rec.dims != *dims {
                    return Some((
                        i,
                        Error::SchemaMismatch {
                            record: rec.name.clone(),
                            reason: format!("dims {:?} do not match expected {:?}", rec.dims, dims),
                        },
                    ));
                }
            }
            (Some(rec), None) => {
                return Some((
                    i,
                    Error::SchemaMismatch {
                        record: rec.name.clone(),
                        reason: "unexpected extra record".to_string(),
                    },
                ));
            }
            (None, Some((name, _))) => {
                return Some((
                    i,
                    Error::SchemaMismatch {
                        record: name.clone(),
                        reason: "record missing from file".to_string(),
                    },
                ));
            }
            (None, None) => unreachable!(),
        }
    }
    None
}

/// A model loaded from disk, tagged by the element type stored in the file.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Single(Model<f32>),
    Double(Model<f64>),
}

impl LoadedModel {
    pub fn dtype(&self) -> DType {
        match self {
            LoadedModel::Single(_) => DType::Single,
            LoadedModel::Double(_) => DType::Double,
        }
    }

    pub fn form(&self) -> Form {
        match self {
            LoadedModel::Single(m) => m.form(),
            LoadedModel::Double(m) => m.form(),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.form() == Form::Fused
    }

    /// Widen to f64 for uniform downstream handling (bit-exact for values
    /// that came from an f32 file).
    pub fn into_double(self) -> Model<f64> {
        match self {
            LoadedModel::Single(m) => m.cast(),
            LoadedModel::Double(m) => m,
        }
    }
}

fn fill_from_records<T: Element>(model: &mut Model<T>, records: &[Record]) -> Result<()> {
    let mut iter = records.iter();
    model.visit_params(&mut |name, values, _meta| {
        let rec = iter.next().expect("schema match guarantees record count");
        debug_assert_eq!(rec.name, name);
        let parsed: Vec<T> = rec.to_values();
        if parsed.len() != values.len() {
            return Err(Error::SchemaMismatch {
                record: rec.name.clone(),
                reason: format!(
                    "{} values stored, model expects {}",
                    parsed.len(),
                    values.len()
                ),
            });
        }
        *values = parsed;
        Ok(())
    })
}

/// Load weights against `config`, requiring the records to match the
/// schema of `expected` form exactly; `None` accepts either form
/// (auto-detected from the record names).
pub fn load_weights_form(
    config: &ModelConfig,
    path: &Path,
    expected: Option<Form>,
) -> Result<LoadedModel> {
    let records = read_store(path)?;

    let training: Model<f64> = build_model(config, 0)?;
    let fused = fuse_model(&training)?;
    let train_schema = schema_of(&training);
    let fused_schema = schema_of(&fused);
    drop((training, fused));

    let train_miss = first_mismatch(&records, &train_schema);
    let fused_miss = first_mismatch(&records, &fused_schema);
    let form = match expected {
        Some(Form::Training) => match train_miss {
            None => Form::Training,
            Some((_, err)) => return Err(err),
        },
        Some(Form::Fused) => match fused_miss {
            None => Form::Fused,
            Some((_, err)) => return Err(err),
        },
        None => match (train_miss, fused_miss) {
            (None, _) => Form::Training,
            (_, None) => Form::Fused,
            // Report against whichever schema the file follows furthest.
            (Some((ti, terr)), Some((fi, ferr))) => {
                return Err(if ti >= fi { terr } else { ferr });
            }
        },
    };

    let dtype = match records.first() {
        Some(rec) => rec.dtype,
        None => unreachable!("schemas are never empty"),
    };
    if let Some(rec) = records.iter().find(|r| r.dtype != dtype) {
        return Err(Error::SchemaMismatch {
            record: rec.name.clone(),
            reason: format!("dtype {} differs from the file's first record ({dtype})", rec.dtype),
        });
    }

    Ok(match dtype {
        DType::Single => {
            let mut model: Model<f32> = build_model(config, 0)?;
            if form == Form::Fused {
                model = fuse_model(&model)?;
            }
            fill_from_records(&mut model, &records)?;
            LoadedModel::Single(model)
        }
        DType::Double => {
            let mut model: Model<f64> = build_model(config, 0)?;
            if form == Form::Fused {
                model = fuse_model(&model)?;
            }
            fill_from_records(&mut model, &records)?;
            LoadedModel::Double(model)
        }
    })
}

/// Load weights, accepting either form.
pub fn load_weights(config: &ModelConfig, path: &Path) -> Result<LoadedModel> {
    load_weights_form(config, path, None)
}

/// A single tensor loaded from a record file.
#[derive(Debug, Clone)]
pub enum LoadedTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl LoadedTensor {
    pub fn shape(&self) -> Shape {
        match self {
            LoadedTensor::Single(t) => t.shape(),
            LoadedTensor::Double(t) => t.shape(),
        }
    }

    pub fn into_double(self) -> Tensor<f64> {
        match self {
            LoadedTensor::Single(t) => t.cast(),
            LoadedTensor::Double(t) => t,
        }
    }
}

/// Write one tensor as a single-record store. Rank 4 always: (N,C,H,W).
pub fn save_tensor<T: Element>(path: &Path, name: &str, tensor: &Tensor<T>) -> Result<()> {
    let s = tensor.shape();
    let dims = vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32];
    write_store(
        path,
        &[Record::from_values(name.to_string(), dims, tensor.data())],
    )
}

/// Read a single-tensor store; accepts rank 4 (N,C,H,W) or rank 2 (N,C)
/// records (the latter gets unit spatial extent).
pub fn load_tensor(path: &Path) -> Result<(String, LoadedTensor)> {
    let records = read_store(path)?;
    if records.len() != 1 {
        return Err(Error::SchemaMismatch {
            record: path.display().to_string(),
            reason: format!("expected exactly one tensor record, found {}", records.len()),
        });
    }
    let rec = records.into_iter().next().unwrap();
    let shape = match rec.dims.as_slice() {
        [n, c, h, w] => Shape::new(*n as usize, *c as usize, *h as usize, *w as usize),
        [n, c] => Shape::new(*n as usize, *c as usize, 1, 1),
        dims => {
            return Err(Error::SchemaMismatch {
                record: rec.name,
                reason: format!("tensor rank must be 2 or 4, got dims {dims:?}"),
            })
        }
    };
    let name = rec.name.clone();
    let tensor = match rec.dtype {
        DType::Single => LoadedTensor::Single(Tensor::new(shape, rec.to_values())?),
        DType::Double => LoadedTensor::Double(Tensor::new(shape, rec.to_values())?),
    };
    Ok((name, tensor))
}
