//! Flat binary parameter checkpoints.
//!
//! Layout: an 8-byte magic, a format version, the element dtype, training
//! metadata, then an index of (name, group, optimizer step, shape) records
//! followed by the concatenated little-endian data blobs (value, then the two
//! Adam moment buffers, per parameter). Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamBank, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TRECCKPT";
const VERSION: u32 = 1;

/// Training progress stored alongside the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Last completed epoch.
    pub epoch: u64,
    /// EMA return baseline.
    pub baseline: f64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    bank: &ParamBank<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH);
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.baseline.to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());

    // Index section.
    for id in bank.ids() {
        let name = bank.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(bank.group(id).tag());
        let (_, _, step) = bank.adam_state(id);
        out.extend_from_slice(&step.to_le_bytes());
        let shape = bank.value(id).shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in shape {
            out.extend_from_slice(&(*dim as u64).to_le_bytes());
        }
    }

    // Data section: value, m, v per parameter, index order.
    for id in bank.ids() {
        for x in bank.value(id).data() {
            x.write_le(&mut out);
        }
        let (m, v, _) = bank.adam_state(id);
        for x in m {
            x.write_le(&mut out);
        }
        for x in v {
            x.write_le(&mut out);
        }
    }

    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Element width stored in a checkpoint, without loading it.
pub fn peek_width(path: &Path) -> Result<u8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    check_header(&mut c)?;
    c.u8()
}

fn check_header(c: &mut Cursor<'_>) -> Result<()> {
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamBank<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    check_header(&mut c)?;
    let width = c.u8()?;
    if width != T::WIDTH {
        return Err(Error::Checkpoint(format!(
            "element width {width} does not match requested precision f{}",
            T::WIDTH as usize * 8
        )));
    }
    let meta = CheckpointMeta {
        epoch: c.u64()?,
        baseline: c.f64()?,
    };
    let count = c.u32()? as usize;

    struct IndexEntry {
        name: String,
        group: ParamGroup,
        step: u64,
        shape: Vec<usize>,
    }
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let group = ParamGroup::from_tag(c.u8()?)?;
        let step = c.u64()?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        index.push(IndexEntry {
            name,
            group,
            step,
            shape,
        });
    }

    let mut bank = ParamBank::new();
    let width = T::WIDTH as usize;
    for entry in index {
        let numel: usize = entry.shape.iter().product();
        let read_buf = |c: &mut Cursor<'_>| -> Result<Vec<T>> {
            let raw = c.take(numel * width)?;
            Ok(raw.chunks_exact(width).map(T::read_le).collect())
        };
        let value = read_buf(&mut c)?;
        let m = read_buf(&mut c)?;
        let v = read_buf(&mut c)?;
        let id = bank.add(&entry.name, entry.group, Tensor::new(entry.shape, value)?)?;
        bank.restore_adam_state(id, m, v, entry.step)?;
    }
    if c.pos != c.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after data section".into()));
    }
    Ok((bank, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelDims};
    use crate::params::Gradients;

    #[test]
    fn round_trip_is_bit_exact() {
        let dims = ModelDims::new(8, 3, 7).unwrap();
        let (mut bank, model) = init_model::<f64>(&dims, 3).unwrap();
        // Advance optimizer state so moments are non-trivial.
        let mut grads = Gradients::zeros(&bank);
        grads.row_mut(model.user_emb)[0] = 0.5;
        grads.row_mut(model.agent_gru.w_update)[3] = -0.25;
        bank.adam_step(&grads, 0.01, |_| true);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            epoch: 17,
            baseline: -0.75,
        };
        save_checkpoint(&path, &bank, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(bank.len(), loaded.len());
        for id in bank.ids() {
            assert_eq!(bank.name(id), loaded.name(id));
            assert_eq!(bank.group(id), loaded.group(id));
            assert_eq!(bank.value(id).data(), loaded.value(id).data());
            let (m0, v0, s0) = bank.adam_state(id);
            let (m1, v1, s1) = loaded.adam_state(id);
            assert_eq!((m0, v0, s0), (m1, v1, s1));
        }
        // Saving the reloaded bank reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded, &loaded_meta).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dims = ModelDims::new(8, 2, 3).unwrap();
        let (bank, _) = init_model::<f32>(&dims, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &bank, &CheckpointMeta::default()).unwrap();
        assert_eq!(peek_width(&path).unwrap(), 4);
        assert!(load_checkpoint::<f64>(&path).is_err());
        assert!(load_checkpoint::<f32>(&path).is_ok());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
