//! Portable named-array weight blob: little-endian float32 payloads with a
//! tiny binary header per array. Used for model checkpoints and optimizer
//! state so runs are reloadable and inspectable across platforms.

use crate::layers::VarStore;
use crate::scalar::Scalar;
use crate::NnError;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NNBLOB01";

/// Write arrays in iteration order. Values are stored as f32 regardless of the
/// in-memory scalar type.
pub fn write_blob<'a, S: Scalar>(
    path: &Path,
    arrays: impl Iterator<Item = (&'a str, &'a ArrayD<S>)>,
) -> Result<(), NnError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let mut count = 0u32;
    let mut body: Vec<u8> = Vec::new();
    for (name, arr) in arrays {
        let name_bytes = name.as_bytes();
        body.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        body.extend_from_slice(name_bytes);
        body.push(arr.ndim() as u8);
        for &d in arr.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            body.extend_from_slice(&v.to_f32().to_le_bytes());
        }
        count += 1;
    }
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&body);
    std::fs::write(path, buf).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read a blob back into named arrays (converted to the requested scalar).
pub fn read_blob<S: Scalar>(path: &Path) -> Result<IndexMap<String, ArrayD<S>>, NnError> {
    let data = std::fs::read(path).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut cursor = std::io::Cursor::new(&data);
    let mut magic = [0u8; 8];
    cursor.read_exact(&mut magic).map_err(|_| bad(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let mut count_bytes = [0u8; 4];
    cursor
        .read_exact(&mut count_bytes)
        .map_err(|_| bad(path, "truncated count"))?;
    let count = u32::from_le_bytes(count_bytes);

    let mut out = IndexMap::new();
    for _ in 0..count {
        let mut len_bytes = [0u8; 2];
        cursor
            .read_exact(&mut len_bytes)
            .map_err(|_| bad(path, "truncated name length"))?;
        let mut name = vec![0u8; u16::from_le_bytes(len_bytes) as usize];
        cursor.read_exact(&mut name).map_err(|_| bad(path, "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad(path, "name not utf-8"))?;
        let mut ndim = [0u8; 1];
        cursor.read_exact(&mut ndim).map_err(|_| bad(path, "truncated rank"))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut d = [0u8; 4];
            cursor.read_exact(&mut d).map_err(|_| bad(path, "truncated shape"))?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut v = [0u8; 4];
            cursor.read_exact(&mut v).map_err(|_| bad(path, "truncated payload"))?;
            values.push(S::from_f32(f32::from_le_bytes(v)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|_| bad(path, "inconsistent shape"))?;
        out.insert(name, arr);
    }
    Ok(out)
}

fn bad(path: &Path, what: &str) -> NnError {
    NnError::Format(format!("{}: {}", path.display(), what))
}

impl<S: Scalar> VarStore<S> {
    /// Persist all entries to a weight blob.
    pub fn save_blob(&self, path: &Path) -> Result<(), NnError> {
        write_blob(path, self.iter_arrays())
    }

    /// Load a weight blob into already-registered entries. Every registered
    /// entry must be present with a matching shape.
    pub fn load_blob(&mut self, path: &Path) -> Result<(), NnError> {
        let arrays = read_blob::<S>(path)?;
        let names: Vec<String> = self.names().map(str::to_string).collect();
        for name in names {
            let arr = arrays
                .get(&name)
                .ok_or_else(|| NnError::Format(format!("{}: missing array {name}", path.display())))?;
            if arr.shape() != self.get(&name).shape() {
                return Err(NnError::Format(format!(
                    "{}: shape mismatch for {name}: file {:?}, model {:?}",
                    path.display(),
                    arr.shape(),
                    self.get(&name).shape()
                )));
            }
            self.set(&name, arr.clone());
        }
        Ok(())
    }
}
