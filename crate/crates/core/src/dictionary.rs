//! Cross-modal dictionary matching.
//!
//! A dictionary is a learnable `[K, C']` matrix shared by all modalities of
//! one feature space. A sequence `X` (`[T, C']`) is matched against it by
//! scoring every step with every element (`A = X D^T`), max-pooling each
//! element's scores over the valid steps, and normalizing with a softmax.
//! The resulting simplex weights `alpha` rebuild the sequence as a convex
//! combination of dictionary rows, `z = alpha D`. Reconstructions of the
//! same class from different modalities are pulled together by a triplet
//! margin loss.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::Modality;
use crate::nn::{ensure_nonempty_rows, fill_masked_neg_inf, softmax, Init, ParamStore};
use crate::triplet::{stack_items, triplet_margin_loss, TripletLoss};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "ho")]
    Homogeneous,
    #[serde(rename = "he")]
    Heterogeneous,
}

impl Space {
    pub fn short(self) -> &'static str {
        match self {
            Space::Homogeneous => "ho",
            Space::Heterogeneous => "he",
        }
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    pub space: Space,
    /// `[K, C']`.
    pub atoms: Tensor,
}

impl Dictionary {
    /// Entries drawn from `N(0, 1/C')`.
    pub fn new(store: &mut ParamStore, prefix: &str, space: Space, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(DhmdError::Config(format!("dictionary {space} needs K >= 1 and C' >= 1")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Dictionary {
            space,
            atoms: store.var(&format!("{prefix}.{}", space.short()), (size, dim), Init::Normal { std })?,
        })
    }

    pub fn from_atoms(space: Space, atoms: Tensor) -> Result<Self> {
        atoms.dims2()?;
        Ok(Dictionary { space, atoms })
    }

    pub fn size(&self) -> usize {
        self.atoms.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.atoms.dims()[1]
    }
}

/// Matching of a batch of sequences against one dictionary.
#[derive(Debug, Clone)]
pub struct DictionaryMatch {
    /// Element scores per step, `[B, T, K]`; padded steps hold negative infinity.
    pub scores: Tensor,
    /// Column max over valid steps, `[B, K]`.
    pub pooled: Tensor,
    /// Softmax of `pooled`, `[B, K]`.
    pub alpha: Tensor,
    /// Reconstruction `alpha D`, `[B, C']`.
    pub z: Tensor,
}

/// Matches `features` (`[B, T, C']`, mask `[B, T]`) against `dict`.
pub fn match_features(features: &Tensor, mask: &Tensor, dict: &Dictionary) -> Result<DictionaryMatch> {
    let (b, t, c) = features.dims3()?;
    if c != dict.dim() {
        return Err(DhmdError::Shape(format!(
            "features have {c} channels but the {} dictionary has {}",
            dict.space,
            dict.dim()
        )));
    }
    ensure_nonempty_rows(mask, &format!("{} dictionary input", dict.space))?;
    let k = dict.size();
    let raw = features.reshape((b * t, c))?.matmul(&dict.atoms.t()?)?.reshape((b, t, k))?;
    let scores = fill_masked_neg_inf(&raw, &mask.unsqueeze(2)?)?;
    let pooled = scores.max(1)?;
    let alpha = softmax(&pooled, 1)?;
    let z = alpha.matmul(&dict.atoms)?;
    Ok(DictionaryMatch {
        scores,
        pooled,
        alpha,
        z,
    })
}

/// Triplet margin loss over per-modality reconstructions `[B, C']`.
pub fn contrastive_loss(z: &[Tensor], class_ids: &[usize], margin: f64) -> Result<TripletLoss> {
    let (items, modality, class) = stack_items(z, class_ids)?;
    triplet_margin_loss(&items, &modality, &class, margin)
}

/// Sum of the homogeneous and heterogeneous contrastive terms.
pub fn dic_loss(ho: &Tensor, he: &Tensor) -> Result<Tensor> {
    Ok((ho + he)?)
}

/// Indices of the `k` largest values; equal values keep ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub space: Space,
    pub modality: Modality,
    pub class: usize,
    /// Mean `alpha` over the samples of this class.
    pub alpha: Vec<f32>,
    /// Most activated elements, strongest first.
    pub top: Vec<usize>,
}

/// Running sums of `alpha` per (space, modality, class).
#[derive(Debug, Clone, Default)]
pub struct ActivationTable {
    sums: BTreeMap<(Space, Modality, usize), (Vec<f64>, usize)>,
}

impl ActivationTable {
    /// Adds a `[B, K]` batch of `alpha` with one class id per row.
    pub fn add(&mut self, space: Space, modality: Modality, alpha: &Tensor, class_ids: &[usize]) -> Result<()> {
        let rows: Vec<Vec<f64>> = alpha.to_dtype(DType::F64)?.to_vec2()?;
        if rows.len() != class_ids.len() {
            return Err(DhmdError::Shape(format!(
                "{} alpha rows for {} class ids",
                rows.len(),
                class_ids.len()
            )));
        }
        for (row, &class) in rows.iter().zip(class_ids) {
            let entry = self
                .sums
                .entry((space, modality, class))
                .or_insert_with(|| (vec![0.0; row.len()], 0));
            for (s, v) in entry.0.iter_mut().zip(row) {
                *s += v;
            }
            entry.1 += 1;
        }
        Ok(())
    }

    /// One row per observed (space, modality, class), ordered by space, modality, then class.
    pub fn rows(&self, top: usize) -> Vec<ActivationRow> {
        self.sums
            .iter()
            .map(|(&(space, modality, class), (sum, count))| {
                let mean: Vec<f64> = sum.iter().map(|s| s / *count as f64).collect();
                ActivationRow {
                    space,
                    modality,
                    class,
                    top: top_k(&mean, top),
                    alpha: mean.iter().map(|&v| v as f32).collect(),
                }
            })
            .collect()
    }
}

/// Activation table of a single batch of matches, one entry per modality.
pub fn export_activations(
    space: Space,
    matches: &[(Modality, &DictionaryMatch)],
    class_ids: &[usize],
    top: usize,
) -> Result<Vec<ActivationRow>> {
    let mut table = ActivationTable::default();
    for (m, dm) in matches {
        table.add(space, *m, &dm.alpha, class_ids)?;
    }
    Ok(table.rows(top))
}
