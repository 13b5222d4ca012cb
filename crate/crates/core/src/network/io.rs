//! Versioned model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DSRF" | u32 format version | u64 header length | JSON header | f64 tensor payloads
//! ```
//!
//! The header carries the [`ModelConfig`] and a directory of tensors (name, shape, byte offset
//! from the start of the payload, element count) in canonical parameter order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cascade::{CascadeModel, ModelConfig};
use crate::dataio::atomic_write;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"DSRF";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    /// Scalar type the model was trained in; payloads are always f64.
    trained_as: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Serializes `model` to bytes.
pub fn model_to_bytes<T: Scalar>(model: &CascadeModel<T>) -> Result<Vec<u8>> {
    let shapes = param_shapes(model);
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for ((name, slice), shape) in model.param_names().into_iter().zip(model.param_slices()).zip(shapes) {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            len: slice.len() as u64,
        });
        for v in slice {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        trained_as: T::NAME.to_string(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a model; `origin` only labels errors.
pub fn model_from_bytes<T: Scalar>(mut bytes: &[u8], origin: &Path) -> Result<CascadeModel<T>> {
    let bad = |reason: String| Error::Format {
        format: "DSRF model",
        path: origin.to_path_buf(),
        reason,
    };
    let mut fixed = [0u8; 16];
    bytes
        .read_exact(&mut fixed)
        .map_err(|_| bad("file shorter than the fixed header".into()))?;
    if &fixed[..4] != MODEL_MAGIC {
        return Err(bad("missing DSRF magic".into()));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[header_len..];

    let mut model = CascadeModel::<T>::zeros(header.config.clone()).map_err(|e| bad(e.to_string()))?;
    let names = model.param_names();
    let shapes = param_shapes(&model);
    if header.tensors.len() != names.len() {
        return Err(bad(format!(
            "expected {} tensors, directory lists {}",
            names.len(),
            header.tensors.len()
        )));
    }
    for (((entry, slice), name), shape) in header
        .tensors
        .iter()
        .zip(model.param_slices_mut())
        .zip(&names)
        .zip(&shapes)
    {
        if &entry.name != name || &entry.shape != shape || entry.len as usize != slice.len() {
            return Err(bad(format!("tensor {} does not match the architecture", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + 8 * slice.len();
        let raw = payload
            .get(start..end)
            .ok_or_else(|| bad(format!("payload of {} is truncated", entry.name)))?;
        for (dst, chunk) in slice.iter_mut().zip(raw.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in {}", entry.name)));
            }
            *dst = T::of(v);
        }
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &CascadeModel<T>, path: &Path) -> Result<()> {
    atomic_write(path, &model_to_bytes(model)?)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<CascadeModel<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

/// Writes `model` to any sink (no atomicity).
pub fn write_model<T: Scalar, W: Write>(model: &CascadeModel<T>, mut sink: W) -> Result<()> {
    sink.write_all(&model_to_bytes(model)?)
        .map_err(|e| Error::io("<writer>", e))
}

fn param_shapes<T: Scalar>(model: &CascadeModel<T>) -> Vec<Vec<usize>> {
    let unit_shapes = |unit: &super::DcnnUnit<T>, out: &mut Vec<Vec<usize>>| {
        for l in unit.layers() {
            out.push(l.weights.shape().as_array().to_vec());
            out.push(vec![l.bias.len()]);
        }
    };
    let mut shapes = Vec::new();
    for stage in model.stages() {
        for unit in stage.units() {
            unit_shapes(unit, &mut shapes);
        }
    }
    if let Some(m) = model.msf_unit() {
        unit_shapes(m, &mut shapes);
    }
    shapes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DepthMap;
    use crate::network::DcnnUnitConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            stage_factors: vec![2, 2],
            unit: DcnnUnitConfig { num_layers: 3, channels: 4, kernel: 3, residual: true, center_input: true },
            msf: Some(DcnnUnitConfig { num_layers: 2, channels: 3, kernel: 5, residual: true, center_input: true }),
            value_shift: 8,
        }
    }

    #[test]
    fn round_trip_reproduces_inference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = CascadeModel::<f64>::init(config(), &mut rng).unwrap();
        for s in model.msf_unit_mut().unwrap().param_slices_mut() {
            for v in s.iter_mut() {
                *v += 0.01;
            }
        }
        let bytes = model_to_bytes(&model).unwrap();
        assert_eq!(&bytes[..4], b"DSRF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back: CascadeModel<f64> = model_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        let lr = DepthMap::from_fn(5, 4, |y, x| 100.0 + (y * 4 + x) as f64);
        assert_eq!(back.infer(&lr, true).unwrap(), model.infer(&lr, true).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = CascadeModel::<f64>::zeros(config()).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let origin = Path::new("mem");
        assert!(model_from_bytes::<f64>(&bytes[..bytes.len() - 8], origin).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(model_from_bytes::<f64>(&bad_magic, origin).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(matches!(
            model_from_bytes::<f64>(&bad_version, origin),
            Err(Error::Format { .. })
        ));
    }
}
