//! Datasets, augmentation, checkpoints, and metrics logging.

pub mod augment;
pub mod checkpoint;
pub mod cifar;
pub mod metrics;
pub mod synthetic;

use crate::error::{EvccError, Result};
use crate::tensor::Tensor;

/// An in-memory labeled image set; images are [N, 3, H, W] in [0, 1]-ish
/// float range.
#[derive(Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.dims()[2]
    }

    /// Copy the given samples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let dims = self.images.dims();
        let per = dims[1] * dims[2] * dims[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(EvccError::Argument(format!(
                    "sample index {i} out of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::from_vec(&[indices.len(), dims[1], dims[2], dims[3]], data)?;
        Ok((batch, labels))
    }
}
