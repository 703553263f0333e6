//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "EVCC"
//! version          u32      currently 1
//! config_digest    u64      FNV-1a 64 of the resolved config text
//! step             u64      trained-step counter
//! tensor_count     u32
//! per tensor:
//!   name_len       u16      then name bytes (UTF-8)
//!   dtype          u8       0 = f32 (the only stored dtype)
//!   rank           u8
//!   dims           u32 * rank
//!   payload        numel * 4 bytes, little-endian f32
//! checksum         u64      FNV-1a 64 over all payload bytes in order
//! ```
//!
//! Loading verifies magic, version, and checksum; a config-digest mismatch
//! is reported as a warning by callers, never a silent reshape.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::config::fnv1a64;
use crate::error::{EvccError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVCC";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointData {
    pub config_digest: u64,
    pub step: u64,
    /// Named tensors in file order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointData {
    pub fn tensor_map(&self) -> HashMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }
}

pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, Tensor<f32>)],
    step: u64,
    config_digest: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let mut payload_hash_input = Vec::new();
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(EvccError::Argument(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(0u8); // dtype f32
        let dims = tensor.dims();
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            let bytes = v.to_le_bytes();
            buf.extend_from_slice(&bytes);
            payload_hash_input.extend_from_slice(&bytes);
        }
    }
    buf.extend_from_slice(&fnv1a64(&payload_hash_input).to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(EvccError::Format(format!(
                "checkpoint truncated at byte offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(EvccError::Format("bad magic, not an EVCC checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(EvccError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_digest = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;

    let mut tensors = Vec::with_capacity(count);
    let mut payload_hash_input = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| EvccError::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != 0 {
            return Err(EvccError::Format(format!(
                "unsupported dtype code {dtype} for tensor {name}"
            )));
        }
        let rank = r.take(1)?[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(EvccError::Format(format!(
                "tensor {name} has invalid rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4)?;
        payload_hash_input.extend_from_slice(payload);
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    let stored = r.u64()?;
    let computed = fnv1a64(&payload_hash_input);
    if stored != computed {
        return Err(EvccError::Format(format!(
            "checkpoint payload checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    Ok(CheckpointData { config_digest, step, tensors })
}

/// Copy checkpoint tensors into a parameter store. Tensor names prefixed
/// `optim.` are optimizer state and are skipped here. Every remaining name
/// must match a store parameter and every store parameter must be present.
pub fn load_into_store(store: &mut ParamStore<f32>, ckpt: &CheckpointData) -> Result<()> {
    let mut seen = vec![false; store.len()];
    let mut unknown = Vec::new();
    for (name, tensor) in &ckpt.tensors {
        if name.starts_with("optim.") {
            continue;
        }
        match store.by_name(name) {
            Some(id) => {
                let current = &store.get(id).value;
                if current.dims() != tensor.dims() {
                    return Err(EvccError::Format(format!(
                        "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                        tensor.dims(),
                        current.dims()
                    )));
                }
                store.get_mut(id).value = tensor.clone();
                seen[id.0] = true;
            }
            None => unknown.push(name.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(EvccError::Format(format!(
            "checkpoint contains unknown tensor names: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<String> = store
        .iter()
        .filter(|(id, _)| !seen[id.0])
        .map(|(_, p)| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvccError::Format(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// All store parameters as (name, tensor) pairs in canonical order.
pub fn store_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}
