//! Binary tensor section shared by all checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32  tensor count
//! per tensor:
//!   u32  name length in bytes, then UTF-8 name
//!   u32  rank, then rank x u64 dimension sizes
//!   product(dims) x f64 values
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub fn write_tensors<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for d in tensor.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, values)?));
    }
    Ok(out)
}

/// Overwrites every parameter in `store` with the tensor of the same name.
/// Every parameter must be present with a matching shape.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut seen = 0;
    for (name, tensor) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let target = store.tensor_mut(id);
        if target.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        target.values_mut().copy_from_slice(tensor.values());
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} tensors, model has {}",
            store.len()
        )));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
