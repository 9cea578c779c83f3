//! Binary named-tensor container for checkpoints and backbone exports.
//!
//! Layout: an 8-byte magic, a format version, a JSON metadata header, then a
//! flat list of named f32 tensors in little-endian row-major order. Raw bits
//! are preserved, so a write/read cycle is bitwise exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"TSSLTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a tensor file (bad magic)")]
    BadMagic { path: String },
    #[error("format version mismatch: file has {file}, this build reads {supported}")]
    Version { file: u32, supported: u32 },
    #[error("malformed tensor file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("header json: {0}")]
    Header(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> TensorFileError {
    TensorFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write named tensors with a JSON header. Tensor order is preserved.
pub fn write_tensors<'a>(
    path: &Path,
    header: &serde_json::Value,
    tensors: impl Iterator<Item = (String, ArrayViewD<'a, f32>)>,
) -> Result<(), TensorFileError> {
    let tensors: Vec<(String, ArrayD<f32>)> = tensors
        .map(|(n, v)| (n, v.to_owned()))
        .collect();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let wr = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<(), TensorFileError> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };

    wr(&mut w, MAGIC)?;
    wr(&mut w, &FORMAT_VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    wr(&mut w, &(header_bytes.len() as u32).to_le_bytes())?;
    wr(&mut w, &header_bytes)?;
    wr(&mut w, &(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &tensors {
        let name_bytes = name.as_bytes();
        wr(&mut w, &(name_bytes.len() as u32).to_le_bytes())?;
        wr(&mut w, name_bytes)?;
        wr(&mut w, &(tensor.ndim() as u8).to_le_bytes())?;
        for &d in tensor.shape() {
            wr(&mut w, &(d as u64).to_le_bytes())?;
        }
        let data = tensor
            .as_standard_layout()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<u8>>();
        wr(&mut w, &(data.len() as u64).to_le_bytes())?;
        wr(&mut w, &data)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a tensor file back into a header and a name-keyed map.
pub fn read_tensors(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f32>>), TensorFileError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let malformed = |message: &str| TensorFileError::Malformed {
        path: path.display().to_string(),
        message: message.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(TensorFileError::Version {
            file: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;

    let count = read_u32(&mut r, path)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_bytes).map_err(|_| malformed("tensor name not utf8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|e| io_err(path, e))?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(read_u64(&mut r, path)? as usize);
        }
        let byte_len = read_u64(&mut r, path)? as usize;
        let expected: usize = dims.iter().product::<usize>() * 4;
        if byte_len != expected {
            return Err(malformed(&format!(
                "tensor {name}: {byte_len} bytes, dims {dims:?} imply {expected}"
            )));
        }
        let mut data = vec![0u8; byte_len];
        r.read_exact(&mut data).map_err(|e| io_err(path, e))?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| malformed(&format!("tensor {name}: {e}")))?;
        tensors.insert(name, array);
    }
    Ok((header, tensors))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, TensorFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64, TensorFileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
    Ok(u64::from_le_bytes(b))
}
