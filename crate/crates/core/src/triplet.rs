//! Cross-modal triplet margin loss over cosine similarity.
//!
//! Items are (sample, modality) feature vectors. A triplet `(i, j, k)` is
//! valid when `j` shares the anchor's class but comes from another modality,
//! and `k` shares the anchor's modality but has another class. Each triplet
//! contributes `max(0, margin - cos(x_i, x_j) + cos(x_i, x_k))`; the loss is
//! the mean over every valid triplet in the batch.

use candle_core::{Device, Tensor};

use crate::nn::{cosine_matrix, zeros_scalar};
use crate::Result;

/// Flat indices into the `N x N` similarity matrix for every mined triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub num_items: usize,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

/// Exhaustive in-batch enumeration of the triplet set.
pub fn mine_triplets(modality: &[usize], class: &[usize]) -> TripletSet {
    assert_eq!(modality.len(), class.len(), "one modality and class per item");
    let n = modality.len();
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| modality[j] != modality[i] && class[j] == class[i])
            .collect();
        let negatives: Vec<usize> = (0..n)
            .filter(|&k| modality[k] == modality[i] && class[k] != class[i])
            .collect();
        for &j in &positives {
            for &k in &negatives {
                positive.push((i * n + j) as u32);
                negative.push((i * n + k) as u32);
            }
        }
    }
    TripletSet {
        num_items: n,
        positive,
        negative,
    }
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub value: Tensor,
    pub triplets: usize,
}

impl TripletLoss {
    /// True when the batch held no valid triplet and the loss is a constant 0.
    pub fn no_triplet(&self) -> bool {
        self.triplets == 0
    }
}

/// Mean triplet margin loss of `features` (`[N, C]`) with per-item modality
/// and class ids.
pub fn triplet_margin_loss(
    features: &Tensor,
    modality: &[usize],
    class: &[usize],
    margin: f64,
) -> Result<TripletLoss> {
    let set = mine_triplets(modality, class);
    triplet_loss_with_set(features, &set, margin)
}

pub fn triplet_loss_with_set(features: &Tensor, set: &TripletSet, margin: f64) -> Result<TripletLoss> {
    if set.is_empty() {
        return Ok(TripletLoss {
            value: zeros_scalar(features.dtype(), features.device())?,
            triplets: 0,
        });
    }
    let n = set.num_items;
    let sim = cosine_matrix(features)?.reshape(n * n)?;
    let dev: &Device = features.device();
    let pos_idx = Tensor::from_slice(&set.positive, set.len(), dev)?;
    let neg_idx = Tensor::from_slice(&set.negative, set.len(), dev)?;
    let pos = sim.index_select(&pos_idx, 0)?;
    let neg = sim.index_select(&neg_idx, 0)?;
    let terms = ((neg - pos)? + margin)?.relu()?;
    Ok(TripletLoss {
        value: terms.mean_all()?,
        triplets: set.len(),
    })
}

/// Stacks per-modality `[B, C]` vectors into `[M*B, C]` (modality-major) and
/// returns the matching modality and class ids.
pub fn stack_items(per_modality: &[Tensor], class_ids: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let stacked = Tensor::cat(per_modality, 0)?;
    let b = class_ids.len();
    let modality = (0..per_modality.len()).flat_map(|m| std::iter::repeat_n(m, b)).collect();
    let class = (0..per_modality.len()).flat_map(|_| class_ids.iter().copied()).collect();
    Ok((stacked, modality, class))
}
