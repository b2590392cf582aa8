use candle_core::{DType, Device, Tensor};

use super::{Modality, ModalitySequence, MultimodalSample, NUM_MODALITIES};
use crate::{DhmdError, Result};

/// One modality of a batch, zero-padded to the longest sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub modality: Modality,
    pub dim: usize,
    pub max_len: usize,
    /// Original length of every sample, used by [`Batch::unpad`].
    pub lengths: Vec<usize>,
    /// `[batch x max_len x dim]`, row-major.
    pub data: Vec<f32>,
    /// `[batch x max_len]`, false on padding.
    pub mask: Vec<bool>,
}

impl ModalityBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Data as `[B, T, C]` and mask as `[B, T]` (1.0 valid, 0.0 padded).
    pub fn tensors(&self, device: &Device, dtype: DType) -> Result<(Tensor, Tensor)> {
        let b = self.batch_size();
        let data = Tensor::from_slice(&self.data, (b, self.max_len, self.dim), device)?
            .to_dtype(dtype)?;
        let mask: Vec<f32> = self.mask.iter().map(|&v| f32::from(u8::from(v))).collect();
        let mask = Tensor::from_slice(&mask, (b, self.max_len), device)?.to_dtype(dtype)?;
        Ok((data, mask))
    }

    pub fn sample_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_len..(b + 1) * self.max_len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<MultimodalSample>,
    pub modalities: [ModalityBatch; NUM_MODALITIES],
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &ModalityBatch {
        &self.modalities[m.index()]
    }

    pub fn labels(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Recovers the original samples by slicing off padding.
    pub fn unpad(&self) -> Vec<MultimodalSample> {
        let mut out = self.samples.clone();
        for (b, sample) in out.iter_mut().enumerate() {
            for mb in &self.modalities {
                let len = mb.lengths[b];
                let start = b * mb.max_len;
                let data = mb.data[start * mb.dim..(start + len) * mb.dim].to_vec();
                let mask = mb.mask[start..start + len].to_vec();
                *sample.modality_mut(mb.modality) = ModalitySequence {
                    modality: mb.modality,
                    steps: len,
                    dim: mb.dim,
                    data,
                    mask,
                };
            }
        }
        out
    }
}

/// Pads every modality of `samples` to its batch maximum length.
///
/// Padding positions hold zero data and a false mask. Sample order is kept.
pub fn collate(samples: &[MultimodalSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| DhmdError::InvalidDataset("cannot collate an empty sample list".into()))?;
    let dims = first.dims();
    for s in samples {
        if s.dims() != dims {
            return Err(DhmdError::Shape(format!(
                "sample {} has feature dims {:?}, batch expects {:?}",
                s.sample_id,
                s.dims(),
                dims
            )));
        }
    }
    let modalities = Modality::ALL.map(|m| pad_modality(samples, m, dims[m.index()]));
    Ok(Batch {
        samples: samples.to_vec(),
        modalities,
    })
}

fn pad_modality(samples: &[MultimodalSample], m: Modality, dim: usize) -> ModalityBatch {
    let lengths: Vec<usize> = samples.iter().map(|s| s.modality(m).steps).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![0.0f32; samples.len() * max_len * dim];
    let mut mask = vec![false; samples.len() * max_len];
    for (b, s) in samples.iter().enumerate() {
        let seq = s.modality(m);
        let start = b * max_len;
        data[start * dim..(start + seq.steps) * dim].copy_from_slice(&seq.data);
        for (t, &valid) in seq.mask.iter().enumerate() {
            mask[start + t] = valid;
        }
        // Masked steps inside the original sequence keep their data so unpad is exact.
    }
    ModalityBatch {
        modality: m,
        dim,
        max_len,
        lengths,
        data,
        mask,
    }
}
