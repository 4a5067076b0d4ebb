//! Binary model store.
//!
//! Little-endian layout:
//!
//! ```text
//! "QCNM"  u32 version=1  u32 set_count
//! per parameter set (sorted by name):
//!   u32 name_len, name (UTF-8)
//!   u8 dtype tag, u8 rank, rank x u32 extents
//!   6 x f32 quantizer record (all zero for float sets)
//!   payload: element_count x byte_width bytes
//! u32 range_count
//! per observed blob range (sorted by name):
//!   u32 name_len, name, f32 seen_min, f32 seen_max, u64 count
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::quant::{quantize, ObservationState, QuantizerValues};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QCNM";
const VERSION: u32 = 1;

/// Network weights plus observed blob ranges.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub params: BTreeMap<String, Tensor>,
    pub ranges: BTreeMap<String, ObservationState>,
}

/// Re-stores `t` at `dtype`. Quantized targets get quantizer values from
/// the tensor's own range.
pub fn convert_param(t: &Tensor, dtype: DataType) -> Result<Tensor> {
    if t.dtype() == dtype {
        return Ok(t.clone());
    }
    let values = t.to_f32_vec();
    if dtype.is_float() {
        return Tensor::from_f32_with(dtype, t.shape(), &values);
    }
    let f = Tensor::from_f32(t.shape(), &values)?;
    let qv = ObservationState::default().observe(&f)?.finalize(dtype)?;
    quantize(&f, &qv, dtype)
}

impl Model {
    /// Sum of raw parameter payload bytes, headers excluded.
    pub fn payload_bytes(&self) -> usize {
        self.params.values().map(|t| t.bytes().len()).sum()
    }

    /// Copy with every parameter converted to the type in `types`;
    /// parameters not listed keep their type.
    pub fn with_param_types(&self, types: &BTreeMap<String, DataType>) -> Result<Model> {
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            let d = types.get(name).copied().unwrap_or(t.dtype());
            params.insert(name.clone(), convert_param(t, d)?);
        }
        Ok(Model { params, ranges: self.ranges.clone() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.payload_bytes() + 64 * (self.params.len() + 1));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_name(&mut b, name);
            b.push(t.dtype().tag());
            b.push(t.shape().len() as u8);
            for &e in t.shape() {
                b.extend_from_slice(&(e as u32).to_le_bytes());
            }
            let rec = t.qvals().filter(|_| t.dtype().is_quantized()).map(|q| q.to_record()).unwrap_or([0.0; 6]);
            for v in rec {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(t.bytes());
        }
        b.extend_from_slice(&(self.ranges.len() as u32).to_le_bytes());
        for (name, r) in &self.ranges {
            put_name(&mut b, name);
            b.extend_from_slice(&(r.seen_min as f32).to_le_bytes());
            b.extend_from_slice(&(r.seen_max as f32).to_le_bytes());
            b.extend_from_slice(&r.count.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut model = Model::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let tag = r.u8()?;
            let dtype = DataType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let mut rec = [0f32; 6];
            for v in &mut rec {
                *v = r.f32()?;
            }
            let qv = if dtype.is_quantized() { Some(QuantizerValues::from_record(dtype, rec)?) } else { None };
            let len = shape
                .iter()
                .try_fold(dtype.byte_width(), |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("'{name}' extents overflow")))?;
            let data = r.take(len)?.to_vec();
            let t = Tensor::from_raw(dtype, &shape, data, qv).map_err(|e| Error::Format(format!("'{name}': {e}")))?;
            if model.params.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter set '{name}'")));
            }
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let (lo, hi, count) = (r.f32()? as f64, r.f32()? as f64, r.u64()?);
            model.ranges.insert(name, ObservationState { seen_min: lo, seen_max: hi, count });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Model::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let err = |e: std::io::Error| Error::file(path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

fn put_name(b: &mut Vec<u8>, name: &str) {
    b.extend_from_slice(&(name.len() as u32).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}
