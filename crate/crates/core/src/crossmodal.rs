//! Pairwise cross-modal attention over heterogeneous features.
//!
//! Each modality is first projected to `d_model` channels and given a learned
//! positional embedding. For every ordered pair `s -> t` a stack of layers
//! lets the target attend to the source:
//!
//! ```text
//! x <- x + Attn(LN(x), LN(src))      queries from the target, keys/values from the source
//! x <- x + FFN(LN(x))
//! ```
//!
//! Padded source steps are excluded from every softmax, so the output of a
//! pair depends only on valid source positions and keeps the target's length.
//! The two outputs reaching a target are concatenated along channels in
//! L, V, A order (skipping the target) to form its reinforced features.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Modality, NUM_MODALITIES};
use crate::nn::{apply_mask, ensure_nonempty_rows, fill_masked_neg_inf, softmax, Affine, Init, LayerNorm, ParamStore};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalConfig {
    /// Channel width of each modality's input features.
    pub input_dims: [usize; NUM_MODALITIES],
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    /// Longest sequence the positional embeddings cover.
    pub max_len: usize,
}

impl CrossModalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(DhmdError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ff_width == 0 || self.max_len == 0 {
            return Err(DhmdError::Config("cross-modal layers, ff_width and max_len must be positive".into()));
        }
        if self.input_dims.contains(&0) {
            return Err(DhmdError::Config("cross-modal input dims must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Scaled dot-product attention with key masking.
///
/// `q` is `[B, H, Tq, d]`, `k` and `v` are `[B, H, Tk, d]`, `key_mask` is
/// `[B, Tk]` (1 = valid). Returns the context `[B, H, Tq, d]` and the
/// attention weights `[B, H, Tq, Tk]`; masked keys get weight exactly 0.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
    let keep = key_mask.unsqueeze(1)?.unsqueeze(1)?;
    let weights = softmax(&fill_masked_neg_inf(&scores, &keep)?, 3)?;
    let context = weights.matmul(v)?;
    Ok((context, weights))
}

/// Multi-head attention with queries from one sequence and keys/values from another.
#[derive(Debug, Clone)]
pub struct MultiHeadCross {
    pub heads: usize,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
}

impl MultiHeadCross {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadCross {
            heads,
            query: Affine::new(store, &format!("{prefix}.query"), d_model, d_model)?,
            key: Affine::new(store, &format!("{prefix}.key"), d_model, d_model)?,
            value: Affine::new(store, &format!("{prefix}.value"), d_model, d_model)?,
            output: Affine::new(store, &format!("{prefix}.output"), d_model, d_model)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns `[B, Tt, d_model]` and per-head weights `[B, H, Tt, Ts]`.
    pub fn forward(&self, target: &Tensor, source: &Tensor, source_mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.query.forward(target)?)?;
        let k = self.split_heads(&self.key.forward(source)?)?;
        let v = self.split_heads(&self.value.forward(source)?)?;
        let (ctx, weights) = scaled_dot_attention(&q, &k, &v, source_mask)?;
        let (b, _, t, _) = ctx.dims4()?;
        let merged = ctx.transpose(1, 2)?.contiguous()?.reshape((b, t, ()))?;
        Ok((self.output.forward(&merged)?, weights))
    }
}

/// One pre-norm cross-attention layer followed by a position-wise feed-forward block.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub norm_target: LayerNorm,
    pub norm_source: LayerNorm,
    pub attention: MultiHeadCross,
    pub norm_ff: LayerNorm,
    pub ff_in: Affine,
    pub ff_out: Affine,
}

impl CrossLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &CrossModalConfig) -> Result<Self> {
        Ok(CrossLayer {
            norm_target: LayerNorm::new(store, &format!("{prefix}.norm_target"), cfg.d_model)?,
            norm_source: LayerNorm::new(store, &format!("{prefix}.norm_source"), cfg.d_model)?,
            attention: MultiHeadCross::new(store, &format!("{prefix}.attn"), cfg.d_model, cfg.heads)?,
            norm_ff: LayerNorm::new(store, &format!("{prefix}.norm_ff"), cfg.d_model)?,
            ff_in: Affine::new(store, &format!("{prefix}.ff_in"), cfg.d_model, cfg.ff_width)?,
            ff_out: Affine::new(store, &format!("{prefix}.ff_out"), cfg.ff_width, cfg.d_model)?,
        })
    }

    pub fn forward(
        &self,
        target: &Tensor,
        source: &Tensor,
        target_mask: &Tensor,
        source_mask: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (attended, weights) = self.attention.forward(
            &self.norm_target.forward(target)?,
            &self.norm_source.forward(source)?,
            source_mask,
        )?;
        let x = (target + attended)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.norm_ff.forward(&x)?)?.relu()?)?;
        let x = (x + ff)?;
        Ok((apply_mask(&x, target_mask)?, weights))
    }
}

/// Stack of layers for one directed pair.
#[derive(Debug, Clone)]
pub struct CrossStack {
    pub source: Modality,
    pub target: Modality,
    pub layers: Vec<CrossLayer>,
}

impl CrossStack {
    /// Returns the reinforced target `[B, Tt, d_model]` and the last layer's
    /// head-averaged attention `[B, Tt, Ts]`.
    pub fn forward(
        &self,
        target: &Tensor,
        source: &Tensor,
        target_mask: &Tensor,
        source_mask: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut x = target.clone();
        let mut last = None;
        for layer in &self.layers {
            let (next, w) = layer.forward(&x, source, target_mask, source_mask)?;
            x = next;
            last = Some(w);
        }
        let weights = last.expect("validated: at least one layer").mean(1)?;
        Ok((x, weights))
    }
}

pub fn pair_name(source: Modality, target: Modality) -> String {
    format!("{}->{}", source.short(), target.short())
}

/// Sources feeding `target`, in concat order.
pub fn sources_of(target: Modality) -> impl Iterator<Item = Modality> {
    Modality::ALL.into_iter().filter(move |&m| m != target)
}

/// Output of all six directed stacks.
#[derive(Debug, Clone)]
pub struct ReinforcedFeatures {
    /// `pairs[s][t]` is the `s -> t` output; `None` on the diagonal.
    pub pairs: [[Option<Tensor>; NUM_MODALITIES]; NUM_MODALITIES],
    /// `attention[s][t]` is head-averaged `[B, Tt, Ts]`.
    pub attention: [[Option<Tensor>; NUM_MODALITIES]; NUM_MODALITIES],
    /// Per target, `[B, Tt, 2 * d_model]`.
    pub reinforced: [Tensor; NUM_MODALITIES],
}

impl ReinforcedFeatures {
    pub fn pair(&self, source: Modality, target: Modality) -> Option<&Tensor> {
        self.pairs[source.index()][target.index()].as_ref()
    }

    pub fn attention(&self, source: Modality, target: Modality) -> Option<&Tensor> {
        self.attention[source.index()][target.index()].as_ref()
    }
}

/// Input projections, positional embeddings and the six directed stacks.
#[derive(Debug, Clone)]
pub struct CrossModal {
    pub config: CrossModalConfig,
    pub input_proj: [Affine; NUM_MODALITIES],
    pub positions: [Tensor; NUM_MODALITIES],
    pub stacks: Vec<CrossStack>,
}

impl CrossModal {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &CrossModalConfig) -> Result<Self> {
        config.validate()?;
        let mut proj = Vec::with_capacity(NUM_MODALITIES);
        let mut pos = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            proj.push(Affine::new(
                store,
                &format!("{prefix}.input.{}", m.short()),
                config.input_dims[m.index()],
                config.d_model,
            )?);
            pos.push(store.var(
                &format!("{prefix}.position.{}", m.short()),
                (config.max_len, config.d_model),
                Init::Normal { std: 0.02 },
            )?);
        }
        let mut stacks = Vec::new();
        for target in Modality::ALL {
            for source in sources_of(target) {
                let name = format!("{prefix}.{}{}", source.short(), target.short());
                let layers = (0..config.layers)
                    .map(|l| CrossLayer::new(store, &format!("{name}.layer{l}"), config))
                    .collect::<Result<Vec<_>>>()?;
                stacks.push(CrossStack { source, target, layers });
            }
        }
        Ok(CrossModal {
            config: config.clone(),
            input_proj: proj.try_into().expect("three modalities"),
            positions: pos.try_into().expect("three modalities"),
            stacks,
        })
    }

    /// Projects `[B, T, C]` features of modality `m` to `d_model` and adds positions.
    pub fn embed(&self, m: Modality, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        if t > self.config.max_len {
            return Err(DhmdError::Shape(format!(
                "{m} sequence of length {t} exceeds the positional cap {}",
                self.config.max_len
            )));
        }
        let pos = self.positions[m.index()].narrow(0, 0, t)?.unsqueeze(0)?;
        let h = self.input_proj[m.index()].forward(x)?.broadcast_add(&pos)?;
        apply_mask(&h, mask)
    }

    /// Runs one directed stack on already-embedded sequences.
    pub fn cross_attention(
        &self,
        source: Modality,
        target: Modality,
        embedded: &[Tensor],
        masks: &[Tensor],
    ) -> Result<(Tensor, Tensor)> {
        let stack = self
            .stacks
            .iter()
            .find(|s| s.source == source && s.target == target)
            .ok_or_else(|| DhmdError::Config(format!("no stack for pair {}", pair_name(source, target))))?;
        ensure_nonempty_rows(&masks[source.index()], &format!("source keys of {}", pair_name(source, target)))?;
        stack.forward(
            &embedded[target.index()],
            &embedded[source.index()],
            &masks[target.index()],
            &masks[source.index()],
        )
    }

    /// Evaluates every directed pair and concatenates per target.
    pub fn reinforce_all(&self, features: &[Tensor], masks: &[Tensor]) -> Result<ReinforcedFeatures> {
        if features.len() != NUM_MODALITIES || masks.len() != NUM_MODALITIES {
            return Err(DhmdError::Shape("cross-modal attention needs all three modalities".into()));
        }
        let embedded = Modality::ALL
            .iter()
            .map(|&m| self.embed(m, &features[m.index()], &masks[m.index()]))
            .collect::<Result<Vec<_>>>()?;
        let mut pairs: [[Option<Tensor>; NUM_MODALITIES]; NUM_MODALITIES] = Default::default();
        let mut attention: [[Option<Tensor>; NUM_MODALITIES]; NUM_MODALITIES] = Default::default();
        let mut reinforced = Vec::with_capacity(NUM_MODALITIES);
        for target in Modality::ALL {
            let mut parts = Vec::with_capacity(NUM_MODALITIES - 1);
            for source in sources_of(target) {
                let (z, w) = self.cross_attention(source, target, &embedded, masks)?;
                parts.push(z.clone());
                pairs[source.index()][target.index()] = Some(z);
                attention[source.index()][target.index()] = Some(w);
            }
            reinforced.push(Tensor::cat(&parts, 2)?);
        }
        Ok(ReinforcedFeatures {
            pairs,
            attention,
            reinforced: reinforced.try_into().expect("three modalities"),
        })
    }

    /// Channel width of each reinforced target.
    pub fn output_dim(&self) -> usize {
        (NUM_MODALITIES - 1) * self.config.d_model
    }
}

/// Head-averaged attention of one sample, trimmed to its valid target and source steps.
pub fn attention_rows(weights: &Tensor, sample: usize, target_len: usize, source_len: usize) -> Result<Vec<Vec<f32>>> {
    Ok(weights
        .get(sample)?
        .narrow(0, 0, target_len)?
        .narrow(1, 0, source_len)?
        .to_dtype(DType::F32)?
        .to_vec2()?)
}
