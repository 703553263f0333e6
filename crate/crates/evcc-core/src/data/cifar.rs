//! CIFAR-100 binary format loader.
//!
//! Each record is 2 label bytes (coarse then fine) followed by 3072
//! channel-major pixel bytes (R plane, G plane, B plane, 32x32 each). Only
//! the fine label is used. Pixels are scaled to [0, 1]; optional
//! per-channel standardization subtracts the dataset channel mean and
//! divides by the channel standard deviation.

use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::error::{EvccError, Result};
use crate::tensor::Tensor;

pub const LABEL_BYTES: usize = 2;
pub const PIXEL_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = LABEL_BYTES + PIXEL_BYTES;
pub const FINE_CLASSES: usize = 100;

/// Load up to `take_n` records (0 = all).
pub fn load_cifar_binary(path: &Path, take_n: usize, standardize: bool) -> Result<Dataset> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_cifar_bytes(&bytes, take_n, standardize)
}

pub fn parse_cifar_bytes(bytes: &[u8], take_n: usize, standardize: bool) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let complete = bytes.len() / RECORD_BYTES;
        return Err(EvccError::Format(format!(
            "truncated CIFAR record: {} bytes leave a partial record at byte offset {}",
            bytes.len(),
            complete * RECORD_BYTES
        )));
    }
    let total = bytes.len() / RECORD_BYTES;
    if total == 0 {
        return Err(EvccError::Format("empty CIFAR file".into()));
    }
    let n = if take_n == 0 { total } else { take_n.min(total) };

    let mut data = vec![0.0f32; n * PIXEL_BYTES];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * RECORD_BYTES..(i + 1) * RECORD_BYTES];
        labels.push(rec[1] as usize); // fine label
        for (j, &b) in rec[LABEL_BYTES..].iter().enumerate() {
            data[i * PIXEL_BYTES + j] = b as f32 / 255.0;
        }
    }

    if standardize {
        let plane = 32 * 32;
        for ch in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                for p in 0..plane {
                    let v = data[i * PIXEL_BYTES + ch * plane + p] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * plane) as f64;
            let mean = sum / count;
            let std = (sq / count - mean * mean).sqrt().max(1e-6);
            for i in 0..n {
                for p in 0..plane {
                    let v = &mut data[i * PIXEL_BYTES + ch * plane + p];
                    *v = ((*v as f64 - mean) / std) as f32;
                }
            }
        }
    }

    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        n_classes: FINE_CLASSES,
    })
}
