//! Full model assembly, forward pass and objective.
//!
//! Per modality `m` the homogeneous stream is `H_m = X^com_m` (or the shallow
//! features when decoupling is off) and the heterogeneous stream `P_m` is the
//! reinforced output of cross-modal attention, the private features when
//! attention is off, or absent when decoupling is off. The fused vector is
//! the modality-major concatenation of `[pool(H_m), pool(P_m), z^ho_m, z^he_m]`
//! over whichever parts exist, followed by one affine task head.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::crossmodal::{CrossModal, CrossModalConfig, ReinforcedFeatures};
use crate::datamodel::{Batch, Modality, TaskType, NUM_MODALITIES};
use crate::decoupler::{loss_dec, DecoupledFeatures, Decoupler, DecouplerConfig, ModalityInput, ShallowEmbedding};
use crate::dictionary::{contrastive_loss, dic_loss, match_features, Dictionary, DictionaryMatch, Space};
use crate::graph_distill::{DistillGraph, GdUnit, GdUnitConfig};
use crate::nn::{masked_mean, softmax, to_f64_scalar, zeros_scalar, Affine, ParamStore};
use crate::pipeline::config::{RunConfig, Switches};
use crate::{DhmdError, Result};

/// Shapes fixed by the dataset rather than the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub input_dims: [usize; NUM_MODALITIES],
    pub task: TaskType,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Shallow(ShallowEmbedding),
    Decoupled(Decoupler),
}

#[derive(Debug, Clone)]
pub struct DhmdModel {
    pub switches: Switches,
    pub shape: DataShape,
    pub margin: f64,
    pub encoder: Encoder,
    pub crossmodal: Option<CrossModal>,
    pub hogd: Option<GdUnit>,
    pub hegd: Option<GdUnit>,
    pub hodm: Option<Dictionary>,
    pub hedm: Option<Dictionary>,
    pub head: Affine,
    pub fused_dim: usize,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, num_outputs]`.
    pub prediction: Tensor,
    /// `[B, fused_dim]`.
    pub fused: Tensor,
    pub masks: [Tensor; NUM_MODALITIES],
    pub decoupled: Option<DecoupledFeatures>,
    /// `H_m`, `[B, T_m, C]`.
    pub homogeneous: Vec<Tensor>,
    /// `P_m`, `[B, T_m, C_p]`.
    pub heterogeneous: Option<Vec<Tensor>>,
    pub reinforced: Option<ReinforcedFeatures>,
    pub ho_graph: Option<DistillGraph>,
    pub he_graph: Option<DistillGraph>,
    pub ho_match: Option<Vec<DictionaryMatch>>,
    pub he_match: Option<Vec<DictionaryMatch>>,
}

/// Loss components as graph tensors; disabled parts are constant zeros.
#[derive(Debug, Clone)]
pub struct Losses {
    pub task_fused: Tensor,
    pub task_unimodal: Tensor,
    pub task: Tensor,
    pub rec: Tensor,
    pub cyc: Tensor,
    pub margin: Tensor,
    pub ort: Tensor,
    pub dec: Tensor,
    pub dtl_ho: Tensor,
    pub dtl_he: Tensor,
    pub dtl: Tensor,
    pub ctr_ho: Tensor,
    pub ctr_he: Tensor,
    pub dic: Tensor,
    pub total: Tensor,
}

/// Host copy of [`Losses`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub task_fused: f64,
    pub task_unimodal: f64,
    pub task: f64,
    pub rec: f64,
    pub cyc: f64,
    pub margin: f64,
    pub ort: f64,
    pub dec: f64,
    pub dtl_ho: f64,
    pub dtl_he: f64,
    pub dtl: f64,
    pub ctr_ho: f64,
    pub ctr_he: f64,
    pub dic: f64,
    pub total: f64,
}

impl LossValues {
    pub const NAMES: [&'static str; 15] = [
        "task_fused",
        "task_unimodal",
        "task",
        "rec",
        "cyc",
        "margin",
        "ort",
        "dec",
        "dtl_ho",
        "dtl_he",
        "dtl",
        "ctr_ho",
        "ctr_he",
        "dic",
        "total",
    ];

    pub fn as_array(&self) -> [f64; 15] {
        [
            self.task_fused,
            self.task_unimodal,
            self.task,
            self.rec,
            self.cyc,
            self.margin,
            self.ort,
            self.dec,
            self.dtl_ho,
            self.dtl_he,
            self.dtl,
            self.ctr_ho,
            self.ctr_he,
            self.dic,
            self.total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        Self::NAMES
            .iter()
            .zip(self.as_array())
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Running mean update with `count` previous observations.
    pub fn accumulate(&mut self, other: &LossValues, count: usize) {
        let mut mine = self.as_array();
        for (m, o) in mine.iter_mut().zip(other.as_array()) {
            *m += (o - *m) / (count as f64 + 1.0);
        }
        *self = LossValues::from_array(mine);
    }

    fn from_array(a: [f64; 15]) -> Self {
        LossValues {
            task_fused: a[0],
            task_unimodal: a[1],
            task: a[2],
            rec: a[3],
            cyc: a[4],
            margin: a[5],
            ort: a[6],
            dec: a[7],
            dtl_ho: a[8],
            dtl_he: a[9],
            dtl: a[10],
            ctr_ho: a[11],
            ctr_he: a[12],
            dic: a[13],
            total: a[14],
        }
    }
}

impl Losses {
    pub fn values(&self) -> Result<LossValues> {
        let v = |t: &Tensor| to_f64_scalar(t);
        Ok(LossValues {
            task_fused: v(&self.task_fused)?,
            task_unimodal: v(&self.task_unimodal)?,
            task: v(&self.task)?,
            rec: v(&self.rec)?,
            cyc: v(&self.cyc)?,
            margin: v(&self.margin)?,
            ort: v(&self.ort)?,
            dec: v(&self.dec)?,
            dtl_ho: v(&self.dtl_ho)?,
            dtl_he: v(&self.dtl_he)?,
            dtl: v(&self.dtl)?,
            ctr_ho: v(&self.ctr_ho)?,
            ctr_he: v(&self.ctr_he)?,
            dic: v(&self.dic)?,
            total: v(&self.total)?,
        })
    }
}

/// Loss weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dec: f64,
    pub dtl: f64,
    pub dic: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            dec: cfg.lambda_dec,
            dtl: cfg.lambda_dtl,
            dic: cfg.lambda_dic,
        }
    }

    /// All weights 1; used to check that every component reaches its parameters.
    pub fn unit() -> Self {
        LossWeights {
            dec: 1.0,
            dtl: 1.0,
            dic: 1.0,
        }
    }
}

/// `task + l_dec * dec + l_dtl * dtl + l_dic * dic`.
pub fn total_loss(task: &Tensor, dec: &Tensor, dtl: &Tensor, dic: &Tensor, w: LossWeights) -> Result<Tensor> {
    Ok((((task + (dec * w.dec)?)? + (dtl * w.dtl)?)? + (dic * w.dic)?)?)
}

/// Batch tensors in model layout.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub inputs: [ModalityInput; NUM_MODALITIES],
    /// `[B]`.
    pub labels: Tensor,
    pub class_ids: Vec<usize>,
}

impl BatchTensors {
    pub fn new(batch: &Batch, device: &Device, dtype: DType) -> Result<Self> {
        let mut inputs = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let (data, mask) = batch.modality(m).tensors(device, dtype)?;
            inputs.push(ModalityInput { data, mask });
        }
        let labels = Tensor::from_vec(batch.labels(), batch.len(), device)?.to_dtype(dtype)?;
        Ok(BatchTensors {
            inputs: inputs.try_into().expect("three modalities"),
            labels,
            class_ids: batch.class_ids(),
        })
    }
}

/// Mean absolute error between `[B, 1]` predictions and `[B]` labels, or the
/// two-class negative log-likelihood for `[B, 2]` logits.
pub fn task_loss(task: TaskType, prediction: &Tensor, labels: &Tensor, class_ids: &[usize]) -> Result<Tensor> {
    match task {
        TaskType::Regression => Ok((prediction.squeeze(1)? - labels)?.abs()?.mean_all()?),
        TaskType::Binary => {
            let log_probs = log_softmax(prediction)?;
            let n = prediction.dim(1)?;
            let onehot: Vec<f64> = class_ids
                .iter()
                .flat_map(|&c| (0..n).map(move |k| if k == c { 1.0 } else { 0.0 }))
                .collect();
            let onehot = Tensor::from_vec(onehot, (class_ids.len(), n), prediction.device())?
                .to_dtype(prediction.dtype())?;
            Ok((log_probs * onehot)?.sum(1)?.neg()?.mean_all()?)
        }
    }
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Class probabilities from `[B, 2]` logits.
pub fn class_probabilities(prediction: &Tensor) -> Result<Tensor> {
    softmax(prediction, 1)
}

fn sum_all(terms: &[Tensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut total = zeros_scalar(dtype, device)?;
    for t in terms {
        total = (total + t)?;
    }
    Ok(total)
}

impl DhmdModel {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, shape: DataShape) -> Result<Self> {
        cfg.validate()?;
        let switches = cfg.switches;
        let dcfg = DecouplerConfig {
            input_dims: shape.input_dims,
            kernels: cfg.kernels,
            width: cfg.width,
            margin: cfg.margin,
            gamma: cfg.gamma,
            activation: cfg.activation,
        };
        let encoder = if switches.fd {
            Encoder::Decoupled(Decoupler::new(store, "decoupler", &dcfg)?)
        } else {
            Encoder::Shallow(ShallowEmbedding::new(store, "decoupler", &dcfg)?)
        };
        let c = cfg.width;
        let crossmodal = if switches.ca {
            Some(CrossModal::new(
                store,
                "crossmodal",
                &CrossModalConfig {
                    input_dims: [c; NUM_MODALITIES],
                    d_model: cfg.ca_dim,
                    heads: cfg.ca_heads,
                    layers: cfg.ca_layers,
                    ff_width: cfg.ca_ff,
                    max_len: shape.max_len,
                },
            )?)
        } else {
            None
        };
        let hetero_dim = match (&crossmodal, switches.fd) {
            (Some(ca), _) => Some(ca.output_dim()),
            (None, true) => Some(c),
            (None, false) => None,
        };
        let num_outputs = shape.task.num_outputs();
        let gd = |store: &mut ParamStore, name: &str, dim: usize| {
            GdUnit::new(
                store,
                name,
                &GdUnitConfig {
                    feature_dim: dim,
                    num_outputs,
                    hidden: cfg.gd_hidden,
                },
            )
        };
        let hogd = if switches.gd { Some(gd(store, "hogd", c)?) } else { None };
        let hegd = match (switches.gd, hetero_dim) {
            (true, Some(d)) => Some(gd(store, "hegd", d)?),
            _ => None,
        };
        let hodm = if switches.dm {
            Some(Dictionary::new(store, "dictionary", Space::Homogeneous, cfg.dict_size, c)?)
        } else {
            None
        };
        let hedm = match (switches.dm, hetero_dim) {
            (true, Some(d)) => Some(Dictionary::new(store, "dictionary", Space::Heterogeneous, cfg.dict_size, d)?),
            _ => None,
        };
        let per_modality = c
            + hetero_dim.unwrap_or(0)
            + hodm.as_ref().map_or(0, |d| d.dim())
            + hedm.as_ref().map_or(0, |d| d.dim());
        let fused_dim = NUM_MODALITIES * per_modality;
        let head = Affine::new(store, "head", fused_dim, num_outputs)?;
        Ok(DhmdModel {
            switches,
            shape,
            margin: cfg.margin,
            encoder,
            crossmodal,
            hogd,
            hegd,
            hodm,
            hedm,
            head,
            fused_dim,
        })
    }

    pub fn decouple_config(&self) -> Option<&DecouplerConfig> {
        match &self.encoder {
            Encoder::Decoupled(d) => Some(&d.config),
            Encoder::Shallow(_) => None,
        }
    }

    pub fn forward(&self, batch: &BatchTensors) -> Result<ForwardOutput> {
        let masks: [Tensor; NUM_MODALITIES] = batch.inputs.clone().map(|i| i.mask);
        let (shallow, decoupled) = match &self.encoder {
            Encoder::Shallow(e) => (e.forward(&batch.inputs)?, None),
            Encoder::Decoupled(d) => {
                let shallow = d.embed_shallow(&batch.inputs)?;
                let df = d.decouple(&shallow, &masks)?;
                (shallow, Some(df))
            }
        };
        let homogeneous: Vec<Tensor> = match &decoupled {
            Some(df) => df.modalities.iter().map(|m| m.homogeneous.clone()).collect(),
            None => shallow.to_vec(),
        };
        let reinforced = match (&self.crossmodal, &decoupled) {
            (Some(ca), Some(df)) => {
                let prt: Vec<Tensor> = df.modalities.iter().map(|m| m.heterogeneous.clone()).collect();
                Some(ca.reinforce_all(&prt, &masks)?)
            }
            _ => None,
        };
        let heterogeneous: Option<Vec<Tensor>> = match (&reinforced, &decoupled) {
            (Some(r), _) => Some(r.reinforced.to_vec()),
            (None, Some(df)) => Some(df.modalities.iter().map(|m| m.heterogeneous.clone()).collect()),
            _ => None,
        };

        let ho_graph = match &self.hogd {
            Some(u) => Some(u.forward(&homogeneous, &masks)?),
            None => None,
        };
        let he_graph = match (&self.hegd, &heterogeneous) {
            (Some(u), Some(p)) => Some(u.forward(p, &masks)?),
            _ => None,
        };
        let run_dm = |dict: &Option<Dictionary>, feats: Option<&Vec<Tensor>>| -> Result<Option<Vec<DictionaryMatch>>> {
            match (dict, feats) {
                (Some(d), Some(f)) => Ok(Some(
                    f.iter()
                        .zip(&masks)
                        .map(|(x, m)| match_features(x, m, d))
                        .collect::<Result<Vec<_>>>()?,
                )),
                _ => Ok(None),
            }
        };
        let ho_match = run_dm(&self.hodm, Some(&homogeneous))?;
        let he_match = run_dm(&self.hedm, heterogeneous.as_ref())?;

        let mut parts = Vec::new();
        for m in 0..NUM_MODALITIES {
            parts.push(masked_mean(&homogeneous[m], &masks[m])?);
            if let Some(p) = &heterogeneous {
                parts.push(masked_mean(&p[m], &masks[m])?);
            }
            if let Some(dm) = &ho_match {
                parts.push(dm[m].z.clone());
            }
            if let Some(dm) = &he_match {
                parts.push(dm[m].z.clone());
            }
        }
        let fused = Tensor::cat(&parts, 1)?;
        if fused.dim(1)? != self.fused_dim {
            return Err(DhmdError::Shape(format!(
                "fused width {} differs from the head input {}",
                fused.dim(1)?,
                self.fused_dim
            )));
        }
        let prediction = self.head.forward(&fused)?;
        Ok(ForwardOutput {
            prediction,
            fused,
            masks,
            decoupled,
            homogeneous,
            heterogeneous,
            reinforced,
            ho_graph,
            he_graph,
            ho_match,
            he_match,
        })
    }

    /// All loss components of a forward pass and their weighted total.
    pub fn losses(&self, out: &ForwardOutput, batch: &BatchTensors, weights: LossWeights) -> Result<Losses> {
        let dtype = out.prediction.dtype();
        let device = out.prediction.device().clone();
        let zero = || zeros_scalar(dtype, &device);
        let task = self.shape.task;
        let task_fused = task_loss(task, &out.prediction, &batch.labels, &batch.class_ids)?;

        let mut unimodal = Vec::new();
        for g in [&out.ho_graph, &out.he_graph].into_iter().flatten() {
            for l in &g.logits {
                unimodal.push(task_loss(task, l, &batch.labels, &batch.class_ids)?);
            }
        }
        let task_unimodal = if unimodal.is_empty() {
            zero()?
        } else {
            (sum_all(&unimodal, dtype, &device)? / unimodal.len() as f64)?
        };
        let task_total = (&task_fused + &task_unimodal)?;

        let (rec, cyc, margin, ort, dec) = match (&out.decoupled, self.decouple_config()) {
            (Some(df), Some(cfg)) => {
                let d = loss_dec(df, &batch.class_ids, cfg)?;
                (d.rec, d.cyc, d.margin, d.ort, d.total)
            }
            _ => (zero()?, zero()?, zero()?, zero()?, zero()?),
        };
        let graph_loss = |g: &Option<DistillGraph>| match g {
            Some(g) => g.loss(),
            None => zero(),
        };
        let dtl_ho = graph_loss(&out.ho_graph)?;
        let dtl_he = graph_loss(&out.he_graph)?;
        let dtl = (&dtl_ho + &dtl_he)?;
        let ctr = |m: &Option<Vec<DictionaryMatch>>| -> Result<Tensor> {
            match m {
                Some(ms) => {
                    let z: Vec<Tensor> = ms.iter().map(|d| d.z.clone()).collect();
                    Ok(contrastive_loss(&z, &batch.class_ids, self.margin)?.value)
                }
                None => zero(),
            }
        };
        let ctr_ho = ctr(&out.ho_match)?;
        let ctr_he = ctr(&out.he_match)?;
        let dic = dic_loss(&ctr_ho, &ctr_he)?;
        let total = total_loss(&task_total, &dec, &dtl, &dic, weights)?;
        Ok(Losses {
            task_fused,
            task_unimodal,
            task: task_total,
            rec,
            cyc,
            margin,
            ort,
            dec,
            dtl_ho,
            dtl_he,
            dtl,
            ctr_ho,
            ctr_he,
            dic,
            total,
        })
    }
}

/// Parameter tensors whose gradient is zero or missing for `loss`.
pub fn parameters_without_gradient(store: &ParamStore, loss: &Tensor) -> Result<Vec<String>> {
    let grads = loss.backward()?;
    let mut dead = Vec::new();
    for (name, var) in store.iter() {
        let alive = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_scalar(&g.abs()?.sum_all()?)? > 0.0,
            None => false,
        };
        if !alive {
            dead.push(name.clone());
        }
    }
    Ok(dead)
}
