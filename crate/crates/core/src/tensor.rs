//! Shape-tagged `f32` tensors and the `GMT0` file format.
//!
//! On-disk layout, no padding:
//!
//! ```text
//! "GMT0" | u32 LE header length | JSON {"dtype":"f32","shape":[...]} | f32 LE payload
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"GMT0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar_vec(values: &[f32]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sum of squares, accumulated in `f64`.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("tensor invariant guarantees consistent shape")
    }

    /// Rounds an `f64` array to `f32` storage.
    pub fn from_array<D: ndarray::Dimension>(array: &ndarray::Array<f64, D>) -> Result<Self> {
        let shape = array.shape().to_vec();
        let data = array.iter().map(|&v| v as f32).collect();
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dtype: "f32".into(),
            shape: self.shape.clone(),
        })
        .expect("header serialization cannot fail");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"GMT0\"".into()));
        }
        if bytes.len() < 8 {
            return Err(fail(4, "truncated header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8 + header_len;
        if bytes.len() < payload_start {
            return Err(fail(8, format!("header of {header_len} bytes is truncated")));
        }
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| fail(8, format!("invalid JSON header: {e}")))?;
        if header.dtype != "f32" {
            return Err(fail(8, format!("unsupported dtype {:?}", header.dtype)));
        }
        let count: usize = header.shape.iter().product();
        let payload = &bytes[payload_start..];
        if payload.len() != 4 * count {
            return Err(fail(
                payload_start,
                format!(
                    "shape {:?} needs {} payload bytes, found {}",
                    header.shape,
                    4 * count,
                    payload.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(payload_start + 4 * i, "non-finite value".into()));
            }
            data.push(v);
        }
        Ok(Tensor {
            shape: header.shape,
            data,
        })
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}
