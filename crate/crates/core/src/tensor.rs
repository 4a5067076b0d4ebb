//! Dense, contiguous, row-major tensors with N outermost.

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::fp16::{fp16_decode, fp16_encode};
use crate::quant::{dequantize_level, QuantizerValues};

pub const MAX_RANK: usize = 4;

/// Typed n-dimensional value container.
///
/// Elements are stored little-endian at the dtype's byte width. Quantized
/// tensors always carry the [`QuantizerValues`] that give their levels a
/// real-valued meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DataType,
    shape: Vec<usize>,
    data: Vec<u8>,
    qvals: Option<QuantizerValues>,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::ShapeMismatch(format!("rank {} not in 1..={MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: &[usize], values: &[f32]) -> Result<Self> {
        check_shape(shape)?;
        if element_count(shape) != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Tensor { dtype: DataType::Fp32, shape: shape.to_vec(), data, qvals: None })
    }

    /// Narrows `values` to binary16 storage.
    pub fn from_f32_as_fp16(shape: &[usize], values: &[f32]) -> Result<Self> {
        check_shape(shape)?;
        if element_count(shape) != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        let data = values.iter().flat_map(|&v| fp16_encode(v).to_le_bytes()).collect();
        Ok(Tensor { dtype: DataType::Fp16, shape: shape.to_vec(), data, qvals: None })
    }

    /// Builds a float tensor of `dtype` (FP32 or FP16) from `f32` values.
    pub fn from_f32_with(dtype: DataType, shape: &[usize], values: &[f32]) -> Result<Self> {
        match dtype {
            DataType::Fp32 => Tensor::from_f32(shape, values),
            DataType::Fp16 => Tensor::from_f32_as_fp16(shape, values),
            other => Err(Error::RequiresFloat { op: "from_f32_with", dtype: other }),
        }
    }

    /// Quantized tensor from raw levels. Every level must lie within the
    /// dtype's integer bounds.
    pub fn from_levels(
        dtype: DataType,
        shape: &[usize],
        levels: &[u16],
        qvals: QuantizerValues,
    ) -> Result<Self> {
        check_shape(shape)?;
        let (lo, hi) = dtype.integer_bounds().ok_or(Error::NotQuantized { dtype })?;
        if element_count(shape) != levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for shape {shape:?}",
                levels.len()
            )));
        }
        if let Some(bad) = levels.iter().find(|&&l| (l as i32) < lo || (l as i32) > hi) {
            return Err(Error::InvalidParam(format!("level {bad} outside [{lo}, {hi}] for {dtype}")));
        }
        let data = match dtype {
            DataType::Int8Q => levels.iter().map(|&l| l as u8).collect(),
            _ => levels.iter().flat_map(|l| l.to_le_bytes()).collect(),
        };
        Ok(Tensor { dtype, shape: shape.to_vec(), data, qvals: Some(qvals) })
    }

    /// Rebuilds a tensor from its serialized parts.
    pub fn from_raw(
        dtype: DataType,
        shape: &[usize],
        data: Vec<u8>,
        qvals: Option<QuantizerValues>,
    ) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != element_count(shape) * dtype.byte_width() {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for {dtype} shape {shape:?}",
                data.len()
            )));
        }
        if dtype.is_quantized() {
            let qv = qvals.ok_or(Error::MissingQuantizerValues)?;
            let t = Tensor { dtype, shape: shape.to_vec(), data, qvals: Some(qv) };
            let levels = t.levels()?;
            return Tensor::from_levels(dtype, shape, &levels, qv);
        }
        Ok(Tensor { dtype, shape: shape.to_vec(), data, qvals: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::from_f32(shape, &vec![0.0; element_count(shape)])
    }

    pub fn dtype(&self) -> DataType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn qvals(&self) -> Option<&QuantizerValues> {
        self.qvals.as_ref()
    }

    /// Leading extent, treated as the batch dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.len() / self.batch()
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if element_count(shape) != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Raw levels of a quantized tensor.
    pub fn levels(&self) -> Result<Vec<u16>> {
        match self.dtype {
            DataType::Int8Q => Ok(self.data.iter().map(|&b| b as u16).collect()),
            DataType::Int16Q => {
                Ok(self.data.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
            }
            dtype => Err(Error::NotQuantized { dtype }),
        }
    }

    /// Values of a float tensor, widened to `f32`.
    pub fn float_values(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DataType::Fp32 => Ok(self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            DataType::Fp16 => Ok(self
                .data
                .chunks_exact(2)
                .map(|c| fp16_decode(u16::from_le_bytes([c[0], c[1]])))
                .collect()),
            dtype => Err(Error::RequiresFloat { op: "float_values", dtype }),
        }
    }

    /// Real values of any tensor: widened floats or dequantized levels.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            DataType::Fp32 | DataType::Fp16 => self.float_values().expect("float dtype"),
            _ => {
                let qv = self.qvals.as_ref().expect("quantized tensor carries qvals");
                self.levels().expect("quantized dtype").into_iter().map(|l| dequantize_level(l, qv)).collect()
            }
        }
    }

    /// Sub-tensor of batch entries `[start, start + count)`.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        if count == 0 || start + count > self.batch() {
            return Err(Error::ShapeMismatch(format!(
                "batch slice {start}+{count} of {}",
                self.batch()
            )));
        }
        let stride = self.sample_len() * self.dtype.byte_width();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
            qvals: self.qvals,
        })
    }

    /// Stacks equally shaped tensors along the batch dimension.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("empty concat".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dtype != first.dtype || p.shape[1..] != first.shape[1..] || p.qvals != first.qvals {
                return Err(Error::ShapeMismatch("concat of mismatched tensors".into()));
            }
            n += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { dtype: first.dtype, shape, data, qvals: first.qvals })
    }
}
