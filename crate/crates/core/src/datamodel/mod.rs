//! Samples, batches, dataset files and the synthetic task generator.

mod batch;
mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{DhmdError, Result};

pub use batch::{collate, Batch, ModalityBatch};
pub use io::{
    load_dataset, load_manifest, read_jsonl_split, read_packed_split, save_dataset, DatasetFormat,
    Manifest, Split,
};
pub(crate) use io::write_bytes_atomic;
pub use synthetic::{
    generate_synthetic, nearest_template_accuracy, OracleReport, SyntheticDataset,
    SyntheticTaskSpec,
};

/// Number of modalities handled by the model.
pub const NUM_MODALITIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "L")]
    Language,
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "A")]
    Acoustic,
}

impl Modality {
    /// Canonical L, V, A order used everywhere (tensor stacking, concat order, exports).
    pub const ALL: [Modality; NUM_MODALITIES] =
        [Modality::Language, Modality::Visual, Modality::Acoustic];

    pub fn index(self) -> usize {
        match self {
            Modality::Language => 0,
            Modality::Visual => 1,
            Modality::Acoustic => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Language => "L",
            Modality::Visual => "V",
            Modality::Acoustic => "A",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Modality {
    type Err = DhmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" | "language" => Ok(Modality::Language),
            "V" | "v" | "visual" => Ok(Modality::Visual),
            "A" | "a" | "acoustic" => Ok(Modality::Acoustic),
            other => Err(DhmdError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    /// Sentiment score regression on [-3, 3], evaluated with 7-class rounding.
    #[default]
    Regression,
    /// Two-class labels in {0, 1}.
    Binary,
}

impl TaskType {
    /// Discrete class used for triplet mining.
    ///
    /// Regression scores are bucketed as `round(label) + 3` clamped to `[0, 6]`;
    /// binary labels are their own class.
    pub fn class_of(self, label: f32) -> usize {
        match self {
            TaskType::Regression => (label.round() as i64 + 3).clamp(0, 6) as usize,
            TaskType::Binary => usize::from(label >= 0.5),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskType::Regression => 7,
            TaskType::Binary => 2,
        }
    }

    /// Width of the task head and of the unimodal logit heads.
    pub fn num_outputs(self) -> usize {
        match self {
            TaskType::Regression => 1,
            TaskType::Binary => 2,
        }
    }
}

impl FromStr for TaskType {
    type Err = DhmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "regression" => Ok(TaskType::Regression),
            "binary" => Ok(TaskType::Binary),
            other => Err(DhmdError::Config(format!("unknown task type '{other}'"))),
        }
    }
}

/// One modality's `[steps x dim]` feature matrix (row-major) with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl ModalitySequence {
    /// Builds a fully valid sequence from nested rows.
    pub fn from_rows(modality: Modality, rows: &[Vec<f32>]) -> Result<Self> {
        let steps = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DhmdError::Shape(format!(
                "ragged rows in {modality} sequence"
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(modality, steps, dim, data, vec![true; steps])
    }

    pub fn new(
        modality: Modality,
        steps: usize,
        dim: usize,
        data: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let seq = ModalitySequence {
            modality,
            steps,
            dim,
            data,
            mask,
        };
        seq.check().map_err(|reason| DhmdError::InvalidSample {
            sample_id: String::from("<unnamed>"),
            reason,
        })?;
        Ok(seq)
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        let m = self.modality;
        if self.steps == 0 || self.dim == 0 {
            return Err(format!("{m} sequence has an empty dimension"));
        }
        if self.data.len() != self.steps * self.dim {
            return Err(format!(
                "{m} data has {} values, expected {}x{}",
                self.data.len(),
                self.steps,
                self.dim
            ));
        }
        if self.mask.len() != self.steps {
            return Err(format!("{m} mask length {} != {}", self.mask.len(), self.steps));
        }
        if !self.mask.iter().any(|&v| v) {
            return Err(format!("{m} mask has no valid step"));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(format!(
                "non-finite value in {m} stream at step {}, channel {}",
                pos / self.dim,
                pos % self.dim
            ));
        }
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub sample_id: String,
    pub language: ModalitySequence,
    pub visual: ModalitySequence,
    pub acoustic: ModalitySequence,
    pub label: f32,
    pub class_id: usize,
}

impl MultimodalSample {
    /// Builds a sample, deriving `class_id` from the label with the task's bucketing rule.
    pub fn new(
        sample_id: impl Into<String>,
        task: TaskType,
        label: f32,
        [language, visual, acoustic]: [ModalitySequence; NUM_MODALITIES],
    ) -> Result<Self> {
        let sample = MultimodalSample {
            sample_id: sample_id.into(),
            language,
            visual,
            acoustic,
            label,
            class_id: task.class_of(label),
        };
        sample.validate(task)?;
        Ok(sample)
    }

    pub fn modality(&self, m: Modality) -> &ModalitySequence {
        match m {
            Modality::Language => &self.language,
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalitySequence {
        match m {
            Modality::Language => &mut self.language,
            Modality::Visual => &mut self.visual,
            Modality::Acoustic => &mut self.acoustic,
        }
    }

    pub fn dims(&self) -> [usize; NUM_MODALITIES] {
        Modality::ALL.map(|m| self.modality(m).dim)
    }

    pub fn validate(&self, task: TaskType) -> Result<()> {
        let fail = |reason: String| DhmdError::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        for m in Modality::ALL {
            let seq = self.modality(m);
            if seq.modality != m {
                return Err(fail(format!("{m} slot holds a {} sequence", seq.modality)));
            }
            seq.check().map_err(fail)?;
        }
        if !self.label.is_finite() {
            return Err(fail("non-finite label".into()));
        }
        if task == TaskType::Binary && self.label != 0.0 && self.label != 1.0 {
            return Err(fail(format!("binary label must be 0 or 1, got {}", self.label)));
        }
        if self.class_id != task.class_of(self.label) {
            return Err(fail(format!(
                "class id {} does not match label {}",
                self.class_id, self.label
            )));
        }
        Ok(())
    }
}
