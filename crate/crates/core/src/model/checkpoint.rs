//! Checkpoints: `LMVT` magic, `u32` version, `u32` record count, one tensor
//! record per parameter in registration order, then a CRC-32 of everything
//! before it.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{Model, VariantSpec};
use crate::error::{Error, Result};
use crate::io::{read_record, write_record, ByteReader, Record};
use crate::tensor::{ParamStore, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMVT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Input("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, name, t) in store.iter() {
        write_record(&mut out, name, t)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a checkpoint into its records without interpreting them.
pub fn read_checkpoint(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let rec = read_record(&mut r)?;
        if !seen.insert(rec.name.clone()) {
            return Err(Error::format(rec.offset, format!("duplicate tensor {}", rec.name)));
        }
        records.push(rec);
    }
    let body_len = r.offset();
    let stored = r.u32("checksum")?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    let actual = crc32fast::hash(&buf[..body_len as usize]);
    if stored != actual {
        return Err(Error::format(
            body_len,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(records)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model.store())?)?;
    Ok(())
}

/// Restores a model of the given architecture. Every parameter must be
/// present once with the right shape and the dtype of `T`.
pub fn load_checkpoint<T: Scalar>(spec: VariantSpec, path: impl AsRef<Path>) -> Result<Model<T>> {
    let buf = fs::read(path)?;
    let records = read_checkpoint(&buf)?;
    let mut model = Model::<T>::new(spec, 0)?;
    let store = model.store_mut();
    for rec in &records {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| Error::format(rec.offset, format!("unexpected tensor {}", rec.name)))?;
        if rec.dtype != T::DTYPE {
            return Err(Error::format(
                rec.offset,
                format!("tensor {} stored as {:?}, expected {:?}", rec.name, rec.dtype, T::DTYPE),
            ));
        }
        if store.get(id).shape() != rec.shape.as_slice() {
            return Err(Error::format(
                rec.offset,
                format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    store.get(id).shape()
                ),
            ));
        }
        store.set(id, rec.to_tensor()?)?;
    }
    if records.len() != store.len() {
        let have: HashSet<&str> = records.iter().map(|r| r.name.as_str()).collect();
        let missing = store.iter().find(|(_, n, _)| !have.contains(n)).map(|(_, n, _)| n.to_string());
        return Err(Error::format(
            buf.len() as u64,
            format!("checkpoint is missing tensor {}", missing.unwrap_or_default()),
        ));
    }
    Ok(model)
}
