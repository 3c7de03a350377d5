//! Named-tensor checkpoint archive.
//!
//! Layout: `NTAR` magic, version, tensor count, then per tensor the name,
//! dtype tag, dims, and raw little-endian payload. Loading into a
//! [`ParamStore`] is strict about names and shapes; dtype is converted if the
//! file was written at a different precision.

use super::params::{hex_string, ParamStore};
use super::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"NTAR";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad archive: {0}")]
    Format(String),
    #[error("archive does not match the parameter store: {0}")]
    Mismatch(String),
}

pub fn write_store<F: Scalar, W: Write>(store: &ParamStore<F>, w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.tensor(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[F::DTYPE])?;
        w.write_all(&(t.rows as u64).to_le_bytes())?;
        w.write_all(&(t.cols as u64).to_le_bytes())?;
        for &v in &t.data {
            w.write_all(&v.to_le_bytes_vec())?;
        }
    }
    Ok(())
}

pub fn save_store<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<(), ArchiveError> {
    let mut buf = Vec::new();
    write_store(store, &mut buf)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read all tensors from an archive, converting dtype to `F` if needed.
pub fn read_tensors<F: Scalar, R: Read>(
    r: &mut R,
) -> Result<Vec<(String, Tensor<F>)>, ArchiveError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ArchiveError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(ArchiveError::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ArchiveError::Format("non-utf8 tensor name".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let numel = rows * cols;
        let t = match dtype[0] {
            0 => {
                let mut raw = vec![0u8; numel * 4];
                r.read_exact(&mut raw)?;
                let data: Vec<F> = raw
                    .chunks_exact(4)
                    .map(|c| F::from_f64(f32::from_le_slice(c) as f64))
                    .collect();
                Tensor::from_vec(rows, cols, data)
            }
            1 => {
                let mut raw = vec![0u8; numel * 8];
                r.read_exact(&mut raw)?;
                let data: Vec<F> = raw
                    .chunks_exact(8)
                    .map(|c| F::from_f64(f64::from_le_slice(c)))
                    .collect();
                Tensor::from_vec(rows, cols, data)
            }
            d => return Err(ArchiveError::Format(format!("unknown dtype tag {d}"))),
        };
        out.push((name, t));
    }
    Ok(out)
}

/// Load an archive into an existing store. Every archived tensor must match
/// a registered name and shape, and every registered parameter must be
/// present.
pub fn load_store<F: Scalar>(store: &mut ParamStore<F>, path: &Path) -> Result<(), ArchiveError> {
    let bytes = std::fs::read(path)?;
    let tensors = read_tensors::<F, _>(&mut bytes.as_slice())?;
    if tensors.len() != store.len() {
        return Err(ArchiveError::Mismatch(format!(
            "archive has {} tensors, store expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| ArchiveError::Mismatch(format!("unknown tensor `{name}`")))?;
        let dst = store.tensor_mut(id);
        if dst.dims() != t.dims() {
            return Err(ArchiveError::Mismatch(format!(
                "tensor `{name}`: shape {:?} vs registered {:?}",
                t.dims(),
                dst.dims()
            )));
        }
        *dst = t;
    }
    Ok(())
}

/// SHA-256 of a file, hex-encoded.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn roundtrip_f32() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(1, "arch", 0);
        store.add("a.w", Tensor::randn(3, 4, 0.3, &mut rng));
        store.add("a.b", Tensor::zeros(1, 4));
        let mut buf = Vec::new();
        write_store(&store, &mut buf).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("a.w", Tensor::zeros(3, 4));
        other.add("a.b", Tensor::zeros(1, 4));
        let dir = std::env::temp_dir().join("innerctl-archive-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ntar");
        std::fs::write(&path, &buf).unwrap();
        load_store(&mut other, &path).unwrap();
        assert_eq!(store.content_hash(), other.content_hash());

        // f64 load of an f32 archive casts
        let mut wide: ParamStore<f64> = ParamStore::new();
        wide.add("a.w", Tensor::zeros(3, 4));
        wide.add("a.b", Tensor::zeros(1, 4));
        load_store(&mut wide, &path).unwrap();
        assert_eq!(
            wide.tensor(wide.id("a.w").unwrap()).data[0],
            store.tensor(store.id("a.w").unwrap()).data[0] as f64
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("x", Tensor::zeros(2, 2));
        let dir = std::env::temp_dir().join("innerctl-archive-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ntar");
        save_store(&store, &path).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("x", Tensor::zeros(2, 3));
        assert!(load_store(&mut other, &path).is_err());
    }
}
