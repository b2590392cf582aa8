//! Graph distillation unit (GD-Unit).
//!
//! Every modality is a node of a directed graph. A shared logit head `f`
//! regresses per-modality logits from pooled features; a shared edge network
//! `g` scores each ordered pair `i -> j` from the concatenated descriptors
//! `[f(X_i), X_i]` and `[f(X_j), X_j]`. Raw scores are normalized with a
//! softmax over the incoming edges of each target (self-edges excluded),
//! giving the column-stochastic matrix `W`. The discrepancy matrix `E` holds
//! the mean absolute logit difference with the source side detached, so each
//! edge only moves its target. The unit's loss is the entrywise L1 norm of
//! `W * E`, averaged over the batch.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{fill_masked_neg_inf, masked_mean, softmax, Affine, Init, ParamStore};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdUnitConfig {
    /// Channel width of the features the unit observes.
    pub feature_dim: usize,
    pub num_outputs: usize,
    /// Width of the logit and representation projections inside `g`.
    pub hidden: usize,
}

/// Logit head `f` and edge network `g` of one GD-Unit.
///
/// `g` projects the logits and the pooled representation of both endpoints
/// to `hidden` channels each and maps the concatenation of the four
/// projections to a scalar; the whole network is affine in its input. The
/// incoming-edge softmax cancels any term that depends only on the target,
/// so `g` carries no output bias.
#[derive(Debug, Clone)]
pub struct GdUnit {
    pub config: GdUnitConfig,
    pub logit_head: Affine,
    pub logit_proj: Affine,
    pub repr_proj: Affine,
    pub edge: Affine,
}

/// One evaluation of a GD-Unit on a batch.
#[derive(Debug, Clone)]
pub struct DistillGraph {
    /// Pooled features per modality, `[B, C']`.
    pub pooled: Vec<Tensor>,
    /// Logits per modality, `[B, num_outputs]`.
    pub logits: Vec<Tensor>,
    /// Raw edge scores `[B, M, M]`, entry `(i, j)` scores edge `i -> j`.
    pub raw: Tensor,
    /// Per-sample normalized edge weights `[B, M, M]`.
    pub w: Tensor,
    /// Per-sample discrepancies `[B, M, M]`.
    pub e: Tensor,
}

impl DistillGraph {
    /// `||W * E||_1`, batch-averaged.
    pub fn loss(&self) -> Result<Tensor> {
        distillation_loss(&self.w, &self.e)
    }

    /// Batch mean of `W` as nested rows (source-major).
    pub fn mean_w(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.w.mean(0)?.to_dtype(DType::F64)?.to_vec2()?)
    }
}

impl GdUnit {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &GdUnitConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.num_outputs == 0 || config.hidden == 0 {
            return Err(DhmdError::Config(format!("degenerate GD-Unit config {config:?}")));
        }
        let h = config.hidden;
        Ok(GdUnit {
            config: config.clone(),
            logit_head: Affine::new(store, &format!("{prefix}.logit_head"), config.feature_dim, config.num_outputs)?,
            // no biases: a shift shared by every source cancels in the per-target softmax
            logit_proj: Affine::with_init(
                store,
                &format!("{prefix}.logit_proj"),
                config.num_outputs,
                h,
                Init::FanIn { fan_in: config.num_outputs },
                false,
            )?,
            repr_proj: Affine::with_init(
                store,
                &format!("{prefix}.repr_proj"),
                config.feature_dim,
                h,
                Init::FanIn { fan_in: config.feature_dim },
                false,
            )?,
            edge: Affine::with_init(store, &format!("{prefix}.edge"), 4 * h, 1, Init::FanIn { fan_in: 4 * h }, false)?,
        })
    }

    /// Pools each `[B, T, C']` sequence over its valid steps and applies `f`.
    pub fn modality_logits(&self, features: &[Tensor], masks: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let pooled = features
            .iter()
            .zip(masks)
            .map(|(x, m)| masked_mean(x, m))
            .collect::<Result<Vec<_>>>()?;
        let logits = pooled
            .iter()
            .map(|p| self.logit_head.forward(p))
            .collect::<Result<Vec<_>>>()?;
        Ok((pooled, logits))
    }

    /// Per-modality descriptor `[logit_proj(f(X)), repr_proj(X)]`, `[B, 2h]`.
    fn descriptor(&self, pooled: &Tensor, logits: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[self.logit_proj.forward(logits)?, self.repr_proj.forward(pooled)?],
            1,
        )?)
    }

    /// Raw edge scores `[B, M, M]` with entry `(i, j)` = `g(desc_i, desc_j)`.
    pub fn raw_edges(&self, pooled: &[Tensor], logits: &[Tensor]) -> Result<Tensor> {
        let desc = pooled
            .iter()
            .zip(logits)
            .map(|(p, l)| self.descriptor(p, l))
            .collect::<Result<Vec<_>>>()?;
        let desc = Tensor::stack(&desc, 1)?; // [B, M, 2h]
        let h2 = 2 * self.config.hidden;
        // g is affine on [desc_i, desc_j], so it splits into a source and a target term.
        let w = self.edge.weight.reshape(4 * self.config.hidden)?;
        let source_w = w.narrow(0, 0, h2)?;
        let target_w = w.narrow(0, h2, h2)?;
        let (b, m, _) = desc.dims3()?;
        let flat = desc.reshape((b * m, h2))?;
        let src = flat.matmul(&source_w.unsqueeze(1)?)?.reshape((b, m, 1))?;
        let tgt = flat.matmul(&target_w.unsqueeze(1)?)?.reshape((b, 1, m))?;
        let mut raw = src.broadcast_add(&tgt)?;
        if let Some(bias) = &self.edge.bias {
            raw = raw.broadcast_add(bias)?;
        }
        Ok(raw)
    }

    /// Column-wise softmax over incoming edges, self-edges excluded.
    pub fn edge_weights(&self, pooled: &[Tensor], logits: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let raw = self.raw_edges(pooled, logits)?;
        let w = normalize_incoming(&raw)?;
        Ok((raw, w))
    }

    /// Runs the full unit on per-modality sequences.
    pub fn forward(&self, features: &[Tensor], masks: &[Tensor]) -> Result<DistillGraph> {
        let (pooled, logits) = self.modality_logits(features, masks)?;
        let (raw, w) = self.edge_weights(&pooled, &logits)?;
        let e = discrepancy_matrix(&logits)?;
        Ok(DistillGraph {
            pooled,
            logits,
            raw,
            w,
            e,
        })
    }
}

fn off_diagonal(m: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..m * m)
        .map(|k| if k / m == k % m { 0.0 } else { 1.0 })
        .collect();
    Ok(Tensor::from_vec(values, (m, m), device)?.to_dtype(dtype)?)
}

/// Softmax over the source axis (dim 1) of `[B, M, M]` raw scores with the
/// diagonal excluded; the diagonal of the result is exactly zero.
pub fn normalize_incoming(raw: &Tensor) -> Result<Tensor> {
    let (_, m, m2) = raw.dims3()?;
    if m != m2 {
        return Err(DhmdError::Shape(format!("edge scores must be square, got {m}x{m2}")));
    }
    let keep = off_diagonal(m, raw.dtype(), raw.device())?.unsqueeze(0)?;
    softmax(&fill_masked_neg_inf(raw, &keep)?, 1)
}

/// `E[b, i, j] = mean_o |stopgrad(logit_i) - logit_j|`, zero on the diagonal.
pub fn discrepancy_matrix(logits: &[Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack(logits, 1)?; // [B, M, O]
    let m = stacked.dim(1)?;
    let teacher = stacked.detach().unsqueeze(2)?; // [B, M, 1, O]
    let student = stacked.unsqueeze(1)?; // [B, 1, M, O]
    let e = teacher.broadcast_sub(&student)?.abs()?.mean(D::Minus1)?;
    let keep = off_diagonal(m, e.dtype(), e.device())?.unsqueeze(0)?;
    Ok(e.broadcast_mul(&keep)?)
}

fn check_pair(w: &Tensor, e: &Tensor) -> Result<()> {
    if w.dims() != e.dims() || w.rank() < 2 {
        return Err(DhmdError::Shape(format!(
            "edge weights {:?} and discrepancies {:?} must share an [.., M, M] shape",
            w.dims(),
            e.dims()
        )));
    }
    Ok(())
}

/// `sum_{i != j} W_ij E_ij`, averaged over the batch when the inputs are `[B, M, M]`.
pub fn distillation_loss(w: &Tensor, e: &Tensor) -> Result<Tensor> {
    check_pair(w, e)?;
    let prod = (w * e)?;
    Ok(match prod.rank() {
        2 => prod.sum_all()?,
        _ => prod.flatten_from(1)?.sum(1)?.mean_all()?,
    })
}

/// Per-target weighted losses: entry `j` is `sum_i W_ij E_ij`, batch-averaged.
pub fn per_target_losses(w: &Tensor, e: &Tensor) -> Result<Vec<f64>> {
    check_pair(w, e)?;
    let prod = (w * e)?;
    let cols = match prod.rank() {
        2 => prod.sum(0)?,
        _ => prod.sum(1)?.mean(0)?,
    };
    Ok(cols.to_dtype(DType::F64)?.to_vec1()?)
}

/// Exponential moving average of batch-mean edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLogger {
    pub decay: f64,
    pub ema: Option<Vec<Vec<f64>>>,
}

impl Default for EdgeLogger {
    fn default() -> Self {
        EdgeLogger {
            decay: 0.9,
            ema: None,
        }
    }
}

impl EdgeLogger {
    pub fn update(&mut self, batch_mean: &[Vec<f64>]) {
        match &mut self.ema {
            None => self.ema = Some(batch_mean.to_vec()),
            Some(ema) => {
                for (row, new) in ema.iter_mut().zip(batch_mean) {
                    for (v, n) in row.iter_mut().zip(new) {
                        *v = self.decay * *v + (1.0 - self.decay) * n;
                    }
                }
            }
        }
    }
}

/// Sum of each row of `W` excluding the diagonal: the outgoing distillation mass per source.
pub fn outgoing_mass(w: &[Vec<f64>]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum())
        .collect()
}
