//! Training session: data loading, the optimization loop, validation,
//! best-checkpoint selection and resumption.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{attention_rows, pair_name, sources_of};
use crate::datamodel::{
    collate, generate_synthetic, load_dataset, load_manifest, Batch, Modality, MultimodalSample, OracleReport,
    Split, TaskType, NUM_MODALITIES,
};
use crate::dictionary::{ActivationRow, ActivationTable, Space};
use crate::graph_distill::EdgeLogger;
use crate::nn::{masked_mean, ParamStore};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{DataSource, RunConfig};
use crate::pipeline::metrics::{classification_metrics, regression_metrics, Metrics};
use crate::pipeline::model::{parameters_without_gradient, BatchTensors, DataShape, DhmdModel, LossValues, LossWeights};
use crate::pipeline::optim::{Adam, AdamConfig};
use crate::pipeline::probe::{population_std, LinearProbe, ProbeReport, DEFAULT_RIDGE};
use crate::{DhmdError, Result};

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub task: TaskType,
    pub input_dims: [usize; NUM_MODALITIES],
    pub train: Vec<MultimodalSample>,
    pub valid: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub oracle: Option<OracleReport>,
}

impl LoadedData {
    pub fn split(&self, split: Split) -> &[MultimodalSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .flat_map(|s| Modality::ALL.map(|m| s.modality(m).steps))
            .max()
            .unwrap_or(1)
    }
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    match source {
        DataSource::Synthetic(spec) => {
            let ds = generate_synthetic(spec)?;
            Ok(LoadedData {
                task: ds.task(),
                input_dims: spec.feature_dims,
                train: ds.train,
                valid: ds.valid,
                test: ds.test,
                oracle: Some(ds.oracle),
            })
        }
        DataSource::Dir(dir) => {
            let manifest = load_manifest(dir)?;
            Ok(LoadedData {
                task: manifest.task,
                input_dims: manifest.dims_array()?,
                train: load_dataset(dir, Split::Train)?,
                valid: load_dataset(dir, Split::Valid)?,
                test: load_dataset(dir, Split::Test)?,
                oracle: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValues,
    pub valid: Metrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub epoch: usize,
    pub unit: String,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub row: ActivationRow,
}

/// Progress carried across epochs and stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps: u64,
    pub history: Vec<EpochRecord>,
    pub edges: Vec<EdgeRecord>,
    pub activations: Vec<ActivationRecord>,
    pub ho_edges: EdgeLogger,
    pub he_edges: EdgeLogger,
    /// Epoch and validation accuracy of the retained parameters (0 = untrained).
    pub best: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Scores for regression, predicted classes for binary tasks.
    pub predictions: Vec<f64>,
    pub activations: ActivationTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_id: String,
    pub pair: String,
    pub weights: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    shape: DataShape,
    state: TrainState,
}

pub struct Session {
    pub config: RunConfig,
    pub data: LoadedData,
    pub shape: DataShape,
    pub store: ParamStore,
    pub model: DhmdModel,
    pub adam: Adam,
    pub state: TrainState,
    best_params: BTreeMap<String, Tensor>,
}

fn unit_name(space: Space) -> &'static str {
    match space {
        Space::Homogeneous => "HoGD",
        Space::Heterogeneous => "HeGD",
    }
}

impl Session {
    /// Builds a fresh model and verifies every parameter receives a gradient.
    pub fn new(config: RunConfig, data: LoadedData) -> Result<Self> {
        let session = Self::build(config, data)?;
        session.check_gradient_flow()?;
        Ok(session)
    }

    fn build(config: RunConfig, data: LoadedData) -> Result<Self> {
        config.validate()?;
        for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
            if split.is_empty() {
                return Err(DhmdError::EmptySplit(name.into()));
            }
        }
        let shape = DataShape {
            input_dims: data.input_dims,
            task: data.task,
            max_len: if config.max_len == 0 { data.max_len() } else { config.max_len },
        };
        let mut store = ParamStore::new(config.seed, config.precision.dtype(), Device::Cpu);
        let model = DhmdModel::new(&mut store, &config, shape)?;
        let adam = Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        });
        let best_params = store.snapshot()?;
        let state = TrainState {
            ho_edges: EdgeLogger {
                decay: config.edge_decay,
                ema: None,
            },
            he_edges: EdgeLogger {
                decay: config.edge_decay,
                ema: None,
            },
            ..TrainState::default()
        };
        Ok(Session {
            config,
            data,
            shape,
            store,
            model,
            adam,
            state,
            best_params,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn tensors(&self, batch: &Batch) -> Result<BatchTensors> {
        BatchTensors::new(batch, self.store.device(), self.dtype())
    }

    /// Every parameter tensor must get a nonzero gradient from the unweighted objective.
    pub fn check_gradient_flow(&self) -> Result<()> {
        // Odd count: with an absolute-error objective an even batch can leave the
        // output bias with an exactly cancelling sign sum.
        let n = self.config.batch_size.max(8).min(self.data.train.len());
        let n = if n.is_multiple_of(2) { n - 1 } else { n };
        let batch = collate(&self.data.train[..n])?;
        let bt = self.tensors(&batch)?;
        let out = self.model.forward(&bt)?;
        let losses = self.model.losses(&out, &bt, LossWeights::unit())?;
        let dead = parameters_without_gradient(&self.store, &losses.total)?;
        if dead.is_empty() {
            Ok(())
        } else {
            Err(DhmdError::Config(format!("parameters without gradient: {}", dead.join(", "))))
        }
    }

    /// Training sample order of `epoch` (1-based), derived from the seed.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch>> {
        let order = self.epoch_order(epoch);
        order
            .chunks(self.config.batch_size)
            .map(|chunk| {
                let samples: Vec<MultimodalSample> = chunk.iter().map(|&i| self.data.train[i].clone()).collect();
                collate(&samples)
            })
            .collect()
    }

    /// Forward and loss without an update.
    pub fn batch_losses(&self, batch: &Batch) -> Result<LossValues> {
        let bt = self.tensors(batch)?;
        let out = self.model.forward(&bt)?;
        self.model.losses(&out, &bt, LossWeights::from_config(&self.config))?.values()
    }

    /// One optimization step; returns the pre-update loss components.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize, step: usize) -> Result<LossValues> {
        let bt = self.tensors(batch)?;
        let out = self.model.forward(&bt)?;
        let losses = self.model.losses(&out, &bt, LossWeights::from_config(&self.config))?;
        let values = losses.values()?;
        if !values.is_finite() {
            return Err(DhmdError::NonFiniteLoss {
                epoch,
                step,
                components: values.describe(),
            });
        }
        let grads = losses.total.backward()?;
        self.adam.step(&self.store, &grads)?;
        self.state.steps += 1;
        if let Some(g) = &out.ho_graph {
            self.state.ho_edges.update(&g.mean_w()?);
        }
        if let Some(g) = &out.he_graph {
            self.state.he_edges.update(&g.mean_w()?);
        }
        Ok(values)
    }

    /// Trains one more epoch, validates, and updates the retained parameters.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done + 1;
        let start = Instant::now();
        let mut mean = LossValues::default();
        for (step, batch) in self.epoch_batches(epoch)?.iter().enumerate() {
            let v = self.train_step(batch, epoch, step)?;
            mean.accumulate(&v, step);
        }
        let eval = self.evaluate(&self.data.valid)?;
        let record = EpochRecord {
            epoch,
            train: mean,
            valid: eval.metrics,
            seconds: start.elapsed().as_secs_f64(),
        };
        for (space, logger) in [(Space::Homogeneous, &self.state.ho_edges), (Space::Heterogeneous, &self.state.he_edges)] {
            if let Some(w) = &logger.ema {
                self.state.edges.push(EdgeRecord {
                    epoch,
                    unit: unit_name(space).into(),
                    w: w.clone(),
                });
            }
        }
        for row in eval.activations.rows(self.config.top_k) {
            self.state.activations.push(ActivationRecord { epoch, row });
        }
        if self.state.best.is_none_or(|(_, acc)| record.valid.accuracy > acc) {
            self.state.best = Some((epoch, record.valid.accuracy));
            self.best_params = self.store.snapshot()?;
        }
        info!(
            "epoch {epoch}: loss {:.4} (task {:.4}) valid acc {:.2} in {:.1}s",
            mean.total, mean.task, record.valid.accuracy, record.seconds
        );
        debug!("epoch {epoch} components: {}", mean.describe());
        self.state.epochs_done = epoch;
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self) -> Result<()> {
        if self.state.best.is_none() && self.config.epochs == 0 {
            let eval = self.evaluate(&self.data.valid)?;
            self.state.best = Some((0, eval.metrics.accuracy));
        }
        while self.state.epochs_done < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Swaps in the best-validation parameters.
    pub fn use_best(&self) -> Result<()> {
        self.store.restore(&self.best_params)
    }

    pub fn evaluate(&self, samples: &[MultimodalSample]) -> Result<Evaluation> {
        if samples.is_empty() {
            return Err(DhmdError::EmptySplit("evaluation split has no samples".into()));
        }
        let task = self.shape.task;
        let mut predictions = Vec::with_capacity(samples.len());
        let mut activations = ActivationTable::default();
        for chunk in samples.chunks(EVAL_BATCH) {
            let batch = collate(chunk)?;
            let bt = self.tensors(&batch)?;
            let out = self.model.forward(&bt)?;
            let pred: Vec<Vec<f64>> = out.prediction.detach().to_dtype(DType::F64)?.to_vec2()?;
            predictions.extend(pred.iter().map(|p| match task {
                TaskType::Regression => p[0],
                TaskType::Binary => f64::from(u8::from(p[1] > p[0])),
            }));
            for (space, matches) in [(Space::Homogeneous, &out.ho_match), (Space::Heterogeneous, &out.he_match)] {
                if let Some(ms) = matches {
                    for (m, dm) in Modality::ALL.iter().zip(ms) {
                        activations.add(space, *m, &dm.alpha.detach(), &bt.class_ids)?;
                    }
                }
            }
        }
        let metrics = match task {
            TaskType::Regression => {
                let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
                regression_metrics(&predictions, &labels)
            }
            TaskType::Binary => {
                let pred: Vec<usize> = predictions.iter().map(|&p| p as usize).collect();
                let truth: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
                classification_metrics(&pred, &truth)
            }
        };
        Ok(Evaluation {
            metrics,
            predictions,
            activations,
        })
    }

    /// Pooled homogeneous features (`H_m`) per modality for every sample.
    pub fn pooled_homogeneous(&self, samples: &[MultimodalSample]) -> Result<[Vec<Vec<f64>>; NUM_MODALITIES]> {
        let mut out: [Vec<Vec<f64>>; NUM_MODALITIES] = Default::default();
        for chunk in samples.chunks(EVAL_BATCH) {
            let batch = collate(chunk)?;
            let bt = self.tensors(&batch)?;
            let fwd = self.model.forward(&bt)?;
            for (m, (h, mask)) in fwd.homogeneous.iter().zip(&fwd.masks).enumerate() {
                let pooled: Vec<Vec<f64>> = masked_mean(h, mask)?.detach().to_dtype(DType::F64)?.to_vec2()?;
                out[m].extend(pooled);
            }
        }
        Ok(out)
    }

    /// Linear probes on pooled homogeneous features, fitted on train and scored on test.
    pub fn probe(&self) -> Result<ProbeReport> {
        let train = self.pooled_homogeneous(&self.data.train)?;
        let test = self.pooled_homogeneous(&self.data.test)?;
        let train_y: Vec<usize> = self.data.train.iter().map(|s| s.class_id).collect();
        let test_y: Vec<usize> = self.data.test.iter().map(|s| s.class_id).collect();
        let classes = train_y.iter().chain(&test_y).max().map_or(1, |c| c + 1);
        let mut accuracy = Vec::with_capacity(NUM_MODALITIES);
        for m in 0..NUM_MODALITIES {
            let probe = LinearProbe::fit(&train[m], &train_y, classes, DEFAULT_RIDGE)?;
            accuracy.push(probe.accuracy(&test[m], &test_y));
        }
        Ok(ProbeReport {
            std: population_std(&accuracy),
            accuracy,
            features: if self.config.switches.fd { "homogeneous" } else { "shallow" }.into(),
        })
    }

    /// Head-averaged last-layer attention maps for the first `count` samples.
    pub fn attention_maps(&self, samples: &[MultimodalSample], count: usize) -> Result<Vec<AttentionRecord>> {
        if self.model.crossmodal.is_none() {
            return Err(DhmdError::Config("attention export needs CA enabled".into()));
        }
        let chosen = &samples[..count.min(samples.len())];
        if chosen.is_empty() {
            return Ok(Vec::new());
        }
        let batch = collate(chosen)?;
        let bt = self.tensors(&batch)?;
        let out = self.model.forward(&bt)?;
        let reinforced = out.reinforced.expect("CA enabled");
        let mut records = Vec::new();
        for (b, sample) in chosen.iter().enumerate() {
            for target in Modality::ALL {
                for source in sources_of(target) {
                    let w = reinforced.attention(source, target).expect("all pairs evaluated");
                    records.push(AttentionRecord {
                        sample_id: sample.sample_id.clone(),
                        pair: pair_name(source, target),
                        weights: attention_rows(
                            &w.detach(),
                            b,
                            sample.modality(target).steps,
                            sample.modality(source).steps,
                        )?,
                    });
                }
            }
        }
        Ok(records)
    }

    fn meta(&self) -> Result<serde_json::Value> {
        serde_json::to_value(CheckpointMeta {
            config: self.config.clone(),
            shape: self.shape,
            state: self.state.clone(),
        })
        .map_err(|e| DhmdError::Checkpoint {
            path: Default::default(),
            reason: e.to_string(),
        })
    }

    /// Current parameters, optimizer moments and progress.
    pub fn last_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(self.meta()?, &self.store, Some(&self.adam))
    }

    /// The retained best-validation parameters.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let current = self.store.snapshot()?;
        self.store.restore(&self.best_params)?;
        let ck = Checkpoint::capture(self.meta()?, &self.store, None);
        self.store.restore(&current)?;
        ck
    }

    /// Rebuilds a session from a checkpoint; optimizer moments are restored when present.
    pub fn from_checkpoint(ck: &Checkpoint, data: LoadedData) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| DhmdError::Checkpoint {
            path: Default::default(),
            reason: format!("metadata: {e}"),
        })?;
        if data.input_dims != meta.shape.input_dims || data.task != meta.shape.task {
            return Err(DhmdError::Checkpoint {
                path: Default::default(),
                reason: format!(
                    "checkpoint expects dims {:?} ({:?}), data has {:?} ({:?})",
                    meta.shape.input_dims, meta.shape.task, data.input_dims, data.task
                ),
            });
        }
        let mut config = meta.config;
        config.max_len = meta.shape.max_len;
        let mut session = Self::build(config, data)?;
        ck.restore_params(&session.store)?;
        ck.restore_adam(&session.store, &mut session.adam, meta.state.steps)?;
        session.state = meta.state;
        session.best_params = session.store.snapshot()?;
        Ok(session)
    }
}
