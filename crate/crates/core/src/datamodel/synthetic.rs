//! Parameterized synthetic multimodal classification tasks.
//!
//! Each class owns one template direction per modality. A `cue_sparsity`
//! fraction of the timesteps of a sample carries its class template scaled so
//! that `signal_strength` is the fraction of per-step variance that is class
//! discriminative; every step also carries class-independent background and
//! isotropic noise of scale `noise_sigma`. Sparse cues mimic emotion evidence
//! concentrated in a handful of words or frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Modality, ModalitySequence, MultimodalSample, Split, TaskType, NUM_MODALITIES};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// 2 gives a binary task; 3..=7 give a sentiment-style regression task
    /// whose scores round back to the class.
    pub num_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Validation and test samples per class (each).
    pub eval_samples_per_class: usize,
    /// Inclusive `(min, max)` sequence length per modality (L, V, A).
    pub seq_len: [(usize, usize); NUM_MODALITIES],
    pub feature_dims: [usize; NUM_MODALITIES],
    pub signal_strength: [f32; NUM_MODALITIES],
    pub noise_sigma: f32,
    pub cue_sparsity: f32,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 7,
            samples_per_class: 715,
            eval_samples_per_class: 100,
            seq_len: [(6, 10), (8, 12), (8, 12)],
            feature_dims: [16, 12, 12],
            signal_strength: [0.9, 0.4, 0.2],
            noise_sigma: 1.0,
            cue_sparsity: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn task(&self) -> TaskType {
        if self.num_classes == 2 {
            TaskType::Binary
        } else {
            TaskType::Regression
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DhmdError::Config(format!("synthetic spec: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_classes > 7 {
            return bad(format!(
                "num_classes {} cannot be bucketed from scores in [-3, 3]",
                self.num_classes
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        for m in Modality::ALL {
            let i = m.index();
            let (lo, hi) = self.seq_len[i];
            if lo == 0 || hi < lo {
                return bad(format!("{m} length range ({lo}, {hi}) is invalid"));
            }
            if self.feature_dims[i] == 0 {
                return bad(format!("{m} feature dim must be positive"));
            }
            let s = self.signal_strength[i];
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{m} signal strength {s} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.cue_sparsity > 0.0 && self.cue_sparsity <= 1.0) {
            return bad(format!("cue_sparsity {} outside (0, 1]", self.cue_sparsity));
        }
        Ok(())
    }
}

/// Per-modality accuracy of the nearest-template classifier on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub test_accuracy: [f64; NUM_MODALITIES],
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<MultimodalSample>,
    pub valid: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    /// `templates[m][c]` is the unit-variance template of class `c` in modality `m`.
    pub templates: [Vec<Vec<f32>>; NUM_MODALITIES],
    pub oracle: OracleReport,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[MultimodalSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn task(&self) -> TaskType {
        self.spec.task()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

fn make_templates(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..classes)
        .map(|_| {
            let raw: Vec<f32> = (0..dim).map(|_| normal(rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            let scale = (dim as f32).sqrt() / norm;
            raw.into_iter().map(|v| v * scale).collect()
        })
        .collect()
}

fn make_sequence(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticTaskSpec,
    m: Modality,
    template: &[f32],
) -> ModalitySequence {
    let i = m.index();
    let (lo, hi) = spec.seq_len[i];
    let steps = rng.random_range(lo..=hi);
    let dim = spec.feature_dims[i];
    let cues = ((spec.cue_sparsity * steps as f32).round() as usize).clamp(1, steps);
    let mut order: Vec<usize> = (0..steps).collect();
    order.shuffle(rng);
    let mut is_cue = vec![false; steps];
    for &t in &order[..cues] {
        is_cue[t] = true;
    }
    let s = spec.signal_strength[i];
    let (sig, bg) = (s.sqrt(), (1.0 - s).sqrt());
    let mut data = Vec::with_capacity(steps * dim);
    for &cue in &is_cue {
        for &tc in template {
            // Draw both terms on every step so the random stream does not depend on strength.
            let background = normal(rng);
            let noise = normal(rng) * spec.noise_sigma;
            let v = if cue { sig * tc + bg * background } else { background };
            data.push(v + noise);
        }
    }
    ModalitySequence {
        modality: m,
        steps,
        dim,
        data,
        mask: vec![true; steps],
    }
}

fn make_split(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticTaskSpec,
    templates: &[Vec<Vec<f32>>; NUM_MODALITIES],
    split: Split,
    per_class: usize,
) -> Vec<MultimodalSample> {
    let task = spec.task();
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    for c in 0..spec.num_classes {
        for k in 0..per_class {
            let label = match task {
                TaskType::Binary => c as f32,
                TaskType::Regression => c as f32 - 3.0 + rng.random_range(-0.45f32..0.45),
            };
            let seqs = Modality::ALL.map(|m| make_sequence(rng, spec, m, &templates[m.index()][c]));
            let [language, visual, acoustic] = seqs;
            out.push(MultimodalSample {
                sample_id: format!("{split}-{c}-{k}"),
                language,
                visual,
                acoustic,
                label,
                class_id: task.class_of(label),
            });
        }
    }
    out.shuffle(rng);
    out
}

/// Nearest-template classifier: each class is scored by the best matching
/// step of the sequence against its template; the highest score wins.
pub fn nearest_template_accuracy(
    samples: &[MultimodalSample],
    templates: &[Vec<f32>],
    m: Modality,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| {
            let seq = s.modality(m);
            let score = |tpl: &[f32]| {
                seq.rows()
                    .zip(&seq.mask)
                    .filter(|(_, &valid)| valid)
                    .map(|(row, _)| row.iter().zip(tpl).map(|(a, b)| a * b).sum::<f32>())
                    .fold(f32::NEG_INFINITY, f32::max)
            };
            let mut best = (0usize, f32::NEG_INFINITY);
            for (c, tpl) in templates.iter().enumerate() {
                let v = score(tpl);
                if v > best.1 {
                    best = (c, v);
                }
            }
            best.0 == s.class_id
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// Generates train/valid/test splits. The result is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates =
        Modality::ALL.map(|m| make_templates(&mut rng, spec.num_classes, spec.feature_dims[m.index()]));
    let train = make_split(&mut rng, spec, &templates, Split::Train, spec.samples_per_class);
    let valid = make_split(&mut rng, spec, &templates, Split::Valid, spec.eval_samples_per_class);
    let test = make_split(&mut rng, spec, &templates, Split::Test, spec.eval_samples_per_class);
    let test_accuracy =
        Modality::ALL.map(|m| nearest_template_accuracy(&test, &templates[m.index()], m));
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        valid,
        test,
        templates,
        oracle: OracleReport {
            test_accuracy,
            chance: 1.0 / spec.num_classes as f64,
        },
    })
}
