//! Feature decoupling.
//!
//! Each modality is first embedded by its own same-length temporal
//! convolution to a common width `C`. A single shared encoder then produces
//! the homogeneous features and a private encoder per modality produces the
//! heterogeneous features. A private decoder reconstructs the shallow features
//! from their channel-wise concatenation and the reconstruction is re-encoded
//! by the private encoder, which yields the reconstruction and cycle losses.
//! Encoders and decoders are kernel-size-1 convolutions, i.e. per-timestep
//! affine maps; encoders are followed by a fixed activation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Modality, NUM_MODALITIES};
use crate::nn::{apply_mask, cosine_rows, masked_mean, Activation, Affine, Init, ParamStore};
use crate::triplet::{stack_items, triplet_margin_loss, TripletLoss};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplerConfig {
    /// Raw feature dims (L, V, A).
    pub input_dims: [usize; NUM_MODALITIES],
    /// Odd temporal kernel sizes of the shallow convolutions (L, V, A).
    pub kernels: [usize; NUM_MODALITIES],
    /// Common channel width after the shallow convolutions.
    pub width: usize,
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the margin and orthogonality terms inside the decoupling loss.
    pub gamma: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl DecouplerConfig {
    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let k = self.kernels[m.index()];
            if k.is_multiple_of(2) {
                return Err(DhmdError::Config(format!(
                    "{m} shallow kernel size {k} must be odd for same-length padding"
                )));
            }
            if self.input_dims[m.index()] == 0 {
                return Err(DhmdError::Config(format!("{m} input dim must be positive")));
            }
        }
        if self.width == 0 {
            return Err(DhmdError::Config("decoupler width must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(DhmdError::Config(format!("margin {} must be > 0", self.margin)));
        }
        if !(self.gamma >= 0.0) {
            return Err(DhmdError::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// Same-length 1-D convolution over time with zero padding.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    /// `[C_out, C_in, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = d_in * kernel;
        Ok(TemporalConv {
            weight: store.var(&format!("{name}.weight"), (d_out, d_in, kernel), Init::FanIn { fan_in })?,
            bias: store.var(&format!("{name}.bias"), d_out, Init::FanIn { fan_in })?,
            kernel,
        })
    }

    /// `x`: `[B, T, C_in]`, `mask`: `[B, T]` -> `[B, T, C_out]`, zero at masked steps.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let steps = x.dim(1)?;
        if self.kernel > 2 * steps + 1 {
            return Err(DhmdError::Shape(format!(
                "kernel size {} exceeds 2*T+1 = {} for a length-{steps} sequence",
                self.kernel,
                2 * steps + 1
            )));
        }
        // Built from shifted slices and a matmul: candle's conv1d backward
        // returns wrong weight gradients.
        let (b, _, c_in) = x.dims3()?;
        let pad = (self.kernel - 1) / 2;
        let x = apply_mask(x, mask)?;
        let padded = if pad > 0 {
            let zeros = Tensor::zeros((b, pad, c_in), x.dtype(), x.device())?;
            Tensor::cat(&[&zeros, &x, &zeros], 1)?
        } else {
            x
        };
        let shifted = (0..self.kernel)
            .map(|j| padded.narrow(1, j, steps))
            .collect::<candle_core::Result<Vec<_>>>()?;
        // [B, T, C_in, k] flattened channel-major to match the weight layout
        let windows = Tensor::stack(&shifted, 3)?.reshape((b * steps, c_in * self.kernel))?;
        let c_out = self.weight.dim(0)?;
        let w = self.weight.reshape((c_out, c_in * self.kernel))?;
        let y = windows.matmul(&w.t()?)?.broadcast_add(&self.bias)?.reshape((b, steps, c_out))?;
        apply_mask(&y, mask)
    }
}

/// One modality's padded input.
#[derive(Debug, Clone)]
pub struct ModalityInput {
    /// `[B, T, C_m]`
    pub data: Tensor,
    /// `[B, T]`, 1 valid / 0 padded.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoupledModality {
    pub mask: Tensor,
    pub shallow: Tensor,
    pub homogeneous: Tensor,
    pub heterogeneous: Tensor,
    pub reconstruction: Tensor,
    pub recoded: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoupledFeatures {
    pub modalities: [DecoupledModality; NUM_MODALITIES],
}

impl DecoupledFeatures {
    pub fn get(&self, m: Modality) -> &DecoupledModality {
        &self.modalities[m.index()]
    }

    /// Masked temporal mean of the homogeneous features per modality, `[B, C]` each.
    pub fn pooled_homogeneous(&self) -> Result<Vec<Tensor>> {
        self.modalities
            .iter()
            .map(|d| masked_mean(&d.homogeneous, &d.mask))
            .collect()
    }

    pub fn pooled_heterogeneous(&self) -> Result<Vec<Tensor>> {
        self.modalities
            .iter()
            .map(|d| masked_mean(&d.heterogeneous, &d.mask))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Decoupler {
    pub config: DecouplerConfig,
    pub embed: ShallowEmbedding,
    pub shared: Affine,
    pub private: [Affine; NUM_MODALITIES],
    pub decoders: [Affine; NUM_MODALITIES],
}

/// The shallow convolutions alone, used when decoupling is switched off.
#[derive(Debug, Clone)]
pub struct ShallowEmbedding {
    pub convs: [TemporalConv; NUM_MODALITIES],
}

impl ShallowEmbedding {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &DecouplerConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let i = m.index();
            convs.push(TemporalConv::new(
                store,
                &format!("{prefix}.shallow.{m}"),
                config.input_dims[i],
                config.width,
                config.kernels[i],
            )?);
        }
        Ok(ShallowEmbedding {
            convs: convs.try_into().expect("three modalities"),
        })
    }

    /// Per-modality `[B, T_m, C]` shallow features, zero on padding.
    pub fn forward(&self, inputs: &[ModalityInput; NUM_MODALITIES]) -> Result<[Tensor; NUM_MODALITIES]> {
        let mut out = Vec::with_capacity(NUM_MODALITIES);
        for (conv, input) in self.convs.iter().zip(inputs) {
            if input.data.dim(2)? != conv.weight.dim(1)? {
                return Err(DhmdError::Shape(format!(
                    "input has {} channels, convolution expects {}",
                    input.data.dim(2)?,
                    conv.weight.dim(1)?
                )));
            }
            out.push(conv.forward(&input.data, &input.mask)?);
        }
        Ok(out.try_into().expect("three modalities"))
    }
}

impl Decoupler {
    /// Builds the shallow convolutions, encoders and decoders under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: &DecouplerConfig) -> Result<Self> {
        let embed = ShallowEmbedding::new(store, prefix, config)?;
        let c = config.width;
        let shared = Affine::new(store, &format!("{prefix}.shared"), c, c)?;
        let mut private = Vec::new();
        let mut decoders = Vec::new();
        for m in Modality::ALL {
            private.push(Affine::new(store, &format!("{prefix}.private.{m}"), c, c)?);
            decoders.push(Affine::new(store, &format!("{prefix}.decoder.{m}"), 2 * c, c)?);
        }
        Ok(Decoupler {
            config: config.clone(),
            embed,
            shared,
            private: private.try_into().expect("three modalities"),
            decoders: decoders.try_into().expect("three modalities"),
        })
    }

    /// Shallow embedding of a batch; see [`ShallowEmbedding::forward`].
    pub fn embed_shallow(&self, inputs: &[ModalityInput; NUM_MODALITIES]) -> Result<[Tensor; NUM_MODALITIES]> {
        self.embed.forward(inputs)
    }

    fn encode(&self, enc: &Affine, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        apply_mask(&self.config.activation.apply(&enc.forward(x)?)?, mask)
    }

    /// Splits shallow features into homogeneous and heterogeneous parts and
    /// runs the reconstruction / re-encoding cycle.
    pub fn decouple(&self, shallow: &[Tensor; NUM_MODALITIES], masks: &[Tensor; NUM_MODALITIES]) -> Result<DecoupledFeatures> {
        let mut mods = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let i = m.index();
            let (x, mask) = (&shallow[i], &masks[i]);
            let homogeneous = self.encode(&self.shared, x, mask)?;
            let heterogeneous = self.encode(&self.private[i], x, mask)?;
            let joint = Tensor::cat(&[&homogeneous, &heterogeneous], 2)?;
            let reconstruction = apply_mask(&self.decoders[i].forward(&joint)?, mask)?;
            let recoded = self.encode(&self.private[i], &reconstruction, mask)?;
            mods.push(DecoupledModality {
                mask: mask.clone(),
                shallow: x.clone(),
                homogeneous,
                heterogeneous,
                reconstruction,
                recoded,
            });
        }
        Ok(DecoupledFeatures {
            modalities: mods.try_into().expect("three modalities"),
        })
    }
}

/// Squared Frobenius distance summed over valid timesteps (no averaging).
pub fn squared_error_sum(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(apply_mask(&(a - b)?, mask)?.sqr()?.sum_all()?)
}

fn averaged_over_steps(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let total = squared_error_sum(a, b, mask)?;
    let steps = mask.sum_all()?;
    Ok((total / steps)?)
}

/// Reconstruction loss: summed over modalities, averaged over the valid
/// (sample, timestep) positions of each modality.
pub fn loss_rec(df: &DecoupledFeatures) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for d in &df.modalities {
        let term = averaged_over_steps(&d.shallow, &d.reconstruction, &d.mask)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Cycle loss between the heterogeneous features and their re-encoded reconstruction.
pub fn loss_cyc(df: &DecoupledFeatures) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for d in &df.modalities {
        let term = averaged_over_steps(&d.heterogeneous, &d.recoded, &d.mask)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Cross-modal triplet margin loss on pooled homogeneous features.
pub fn loss_margin(pooled: &[Tensor], class_ids: &[usize], margin: f64) -> Result<TripletLoss> {
    let (items, modality, class) = stack_items(pooled, class_ids)?;
    triplet_margin_loss(&items, &modality, &class, margin)
}

/// Soft orthogonality: per modality the batch-mean cosine between pooled
/// homogeneous and heterogeneous features, summed over modalities.
pub fn loss_ort(df: &DecoupledFeatures) -> Result<Tensor> {
    let com = df.pooled_homogeneous()?;
    let prt = df.pooled_heterogeneous()?;
    let mut total: Option<Tensor> = None;
    for (c, p) in com.iter().zip(&prt) {
        let term = cosine_rows(c, p)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three modalities"))
}

#[derive(Debug, Clone)]
pub struct DecouplingLosses {
    pub rec: Tensor,
    pub cyc: Tensor,
    pub margin: Tensor,
    pub ort: Tensor,
    pub triplets: usize,
    pub total: Tensor,
}

/// `rec + cyc + gamma * (margin + ort)`.
pub fn combine_dec(rec: &Tensor, cyc: &Tensor, margin: &Tensor, ort: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok(((rec + cyc)? + ((margin + ort)? * gamma)?)?)
}

/// All decoupling loss components and their weighted sum.
pub fn loss_dec(df: &DecoupledFeatures, class_ids: &[usize], config: &DecouplerConfig) -> Result<DecouplingLosses> {
    let rec = loss_rec(df)?;
    let cyc = loss_cyc(df)?;
    let margin = loss_margin(&df.pooled_homogeneous()?, class_ids, config.margin)?;
    let ort = loss_ort(df)?;
    let total = combine_dec(&rec, &cyc, &margin.value, &ort, config.gamma)?;
    Ok(DecouplingLosses {
        rec,
        cyc,
        margin: margin.value,
        ort,
        triplets: margin.triplets,
        total,
    })
}
