//! Binary parameter checkpoints with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     b"IDCKPT\0\0"
//! version   u32
//! seed      u64
//! count     u32
//! manifest  count × (name_len u32, name utf-8, rank u32, rank × dim u64)
//! records   count × (name_len u32, name utf-8, rank u32, rank × dim u64, numel × f64)
//! ```
//!
//! The sidecar lives next to the checkpoint as `<path>.json`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"IDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint has unexpected parameter {0}")]
    Unexpected(String),
    #[error("sidecar json: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    pub manifest: Vec<(String, Vec<usize>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_name_shape(buf: &mut Vec<u8>, name: &str, shape: &[usize]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
}

/// Serializes a store to bytes.
pub fn encode(store: &ParamStore, seed: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, shape) in store.manifest() {
        put_name_shape(&mut buf, &name, &shape);
    }
    for (_, p) in store.iter() {
        put_name_shape(&mut buf, &p.name, p.value.shape());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name_shape(&mut self) -> Result<(String, Vec<usize>), CheckpointError> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::Format("parameter name is not utf-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Format(format!("bad rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((name, shape))
    }
}

/// Parses checkpoint bytes into a header and a fresh store.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let manifest = (0..count)
        .map(|_| r.name_shape())
        .collect::<Result<Vec<_>, _>>()?;
    let mut store = ParamStore::new();
    for (name, shape) in &manifest {
        let (rname, rshape) = r.name_shape()?;
        if &rname != name || &rshape != shape {
            return Err(CheckpointError::Format(format!(
                "record {rname} {rshape:?} disagrees with manifest entry {name} {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        store
            .add(name.clone(), t)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok((CheckpointHeader { version, seed, manifest }, store))
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    seed: u64,
    sidecar: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode(store, seed)).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(&side, text + "\n").map_err(io_err(&side))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore, serde_json::Value), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let (header, store) = decode(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|source| CheckpointError::Io { path: side, source })?;
    Ok((header, store, serde_json::from_str(&text)?))
}

/// Copies values from `loaded` into `target`, requiring identical names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    for (_, p) in loaded.iter() {
        if target.id(&p.name).is_none() {
            return Err(CheckpointError::Unexpected(p.name.clone()));
        }
    }
    let ids: Vec<_> = target.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let src = loaded
            .id(&name)
            .map(|i| loaded.value(i))
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if src.shape() != target.value(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: target.value(id).shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        target.set_value(id, src.clone()).expect("shape checked");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &store, 42, &serde_json::json!({"d": 2})).unwrap();
        let (header, loaded, side) = load(&path).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.manifest, store.manifest());
        assert_eq!(side["d"], 2);
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let store = sample_store();
        let mut target = ParamStore::new();
        target.add("a", Tensor::zeros(&[2, 2])).unwrap();
        target.add("b", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(
            restore_into(&mut target, &store),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncated_and_corrupt_manifest() {
        let bytes = encode(&sample_store(), 1);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        // Flip a manifest dimension so it disagrees with the record.
        let mut bad = bytes;
        let off = 8 + 4 + 8 + 4 + 4 + 1 + 4;
        bad[off] = 3;
        assert!(matches!(decode(&bad), Err(CheckpointError::Format(_))));
    }
}
