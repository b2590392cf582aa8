//! Parameter storage and the small set of differentiable building blocks the
//! model is made of. Everything is composed from primitive tensor ops so that
//! reverse-mode gradients are available for every layer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{DhmdError, Result};

/// Added under the square root of vector norms so the cosine of a zero vector is 0.
pub const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn { fan_in: usize },
}

/// Named trainable parameters, created from a seeded generator so model
/// construction is reproducible. Names are dotted paths such as
/// `decoupler.shared.weight`; iteration order is lexicographic.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or fetches, when the name already exists) a parameter.
    pub fn var(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(v) = self.vars.get(name) {
            if v.shape() != &shape {
                return Err(DhmdError::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_owned(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; layers holding the tensor see the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| DhmdError::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Convenience for tests and hand-built toys.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| DhmdError::Config(format!("unknown parameter {name}")))?;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?;
        self.set(name, &t)
    }

    /// Copies the current values out, detached from any graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            self.set(name, value)?;
        }
        Ok(())
    }
}

/// Per-position affine map `y = x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::FanIn { fan_in: d_in }, true)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.var(&format!("{name}.weight"), (d_out, d_in), init)?;
        let bias = if bias {
            let b_init = match init {
                Init::FanIn { .. } => init,
                _ => Init::Zeros,
            };
            Some(store.var(&format!("{name}.bias"), d_out, b_init)?)
        } else {
            None
        };
        Ok(Affine { weight, bias })
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| DhmdError::Shape("affine on a scalar".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.d_out();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.var(&format!("{name}.gain"), dim, Init::Ones)?,
            shift: store.var(&format!("{name}.shift"), dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Zeroes positions where `mask` (`[B, T]`, 1/0) is 0. `x` is `[B, T, C]`.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&mask.unsqueeze(2)?)?)
}

/// Mean over valid timesteps: `[B, T, C]` with mask `[B, T]` -> `[B, C]`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let summed = apply_mask(x, mask)?.sum(1)?;
    let counts = mask.sum_keepdim(1)?;
    Ok(summed.broadcast_div(&counts)?)
}

/// Replaces entries where `keep` is 0 by negative infinity. `keep` must
/// broadcast to `x`.
pub fn fill_masked_neg_inf(x: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let keep = keep.broadcast_as(x.shape())?.ne(0.0)?;
    let neg = Tensor::full(f64::NEG_INFINITY, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(keep.where_cond(x, &neg)?)
}

/// Numerically stable softmax along `dim`. Entries at negative infinity get
/// exactly zero weight.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let denom = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&denom)?)
}

/// Euclidean norm along the last dimension, regularized so zero vectors stay finite.
pub fn l2_norm(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?)
}

/// Row-wise cosine similarity of two `[N, C]` matrices -> `[N]`.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum_keepdim(D::Minus1)?;
    let denom = (l2_norm(a)? * l2_norm(b)?)?;
    Ok(dot.broadcast_div(&denom)?.squeeze(D::Minus1)?)
}

/// All-pairs cosine similarity of the rows of `[N, C]` -> `[N, N]`.
pub fn cosine_matrix(x: &Tensor) -> Result<Tensor> {
    let unit = x.broadcast_div(&l2_norm(x)?)?;
    Ok(unit.matmul(&unit.t()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Identity, used for linear toy configurations.
    Linear,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Tanh => x.tanh()?,
            Activation::Linear => x.clone(),
        })
    }
}

/// Host-side mask rows (`[B][T]`) from a 1/0 mask tensor.
pub fn mask_rows(mask: &Tensor) -> Result<Vec<Vec<bool>>> {
    let rows: Vec<Vec<f64>> = mask.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .into_iter()
        .map(|r| r.into_iter().map(|v| v != 0.0).collect())
        .collect())
}

/// Errors when some row of a `[B, T]` mask has no valid position.
pub fn ensure_nonempty_rows(mask: &Tensor, what: &str) -> Result<()> {
    let counts: Vec<f64> = mask.to_dtype(DType::F64)?.sum(1)?.to_vec1()?;
    match counts.iter().position(|&c| c <= 0.0) {
        Some(sample) => Err(DhmdError::FullyMasked {
            sample,
            what: what.to_owned(),
        }),
        None => Ok(()),
    }
}

pub fn to_f64_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn zeros_scalar(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}
