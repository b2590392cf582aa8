//! Central finite-difference checks of every loss component of the full model.

use candle_core::{DType, Tensor};
use dhmd::datamodel::TaskType;
use dhmd::nn::ParamStore;
use dhmd::pipeline::model::BatchTensors;
use dhmd::graph_distill::{distillation_loss, DistillGraph};
use dhmd::pipeline::{DataShape, DhmdModel, ForwardOutput, LossWeights, Losses};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack for gradients at the level of floating-point cancellation.
const ABS_FLOOR: f64 = 1e-9;
/// Attempts per component before giving up on finding smooth coordinates.
const MAX_ATTEMPTS: usize = 400;

/// Teacher logits of both GD-Units, frozen at the base point.
pub struct Frozen {
    ho: Option<Tensor>,
    he: Option<Tensor>,
}

impl Frozen {
    fn capture(out: &ForwardOutput) -> Self {
        let stack = |g: &Option<DistillGraph>| g.as_ref().map(|g| Tensor::stack(&g.logits, 1).unwrap().detach());
        Frozen {
            ho: stack(&out.ho_graph),
            he: stack(&out.he_graph),
        }
    }
}

/// `sum W E` with the teacher side of `E` held at `teacher` (`[B, M, O]`).
/// The implementation stops the teacher gradient, so this is the function
/// whose derivative backpropagation reports.
fn frozen_distillation(graph: &DistillGraph, teacher: &Tensor) -> Tensor {
    let student = Tensor::stack(&graph.logits, 1).unwrap().unsqueeze(1).unwrap();
    let e = teacher.unsqueeze(2).unwrap().broadcast_sub(&student).unwrap().abs().unwrap().mean(3).unwrap();
    let m = graph.logits.len();
    let off: Vec<f64> = (0..m * m).map(|k| if k / m == k % m { 0.0 } else { 1.0 }).collect();
    let off = tensor(off, &[1, m, m]).to_dtype(e.dtype()).unwrap();
    distillation_loss(&graph.w, &e.broadcast_mul(&off).unwrap()).unwrap()
}

fn dtl_ho(out: &ForwardOutput, frozen: &Frozen) -> Tensor {
    frozen_distillation(out.ho_graph.as_ref().unwrap(), frozen.ho.as_ref().unwrap())
}

fn dtl_he(out: &ForwardOutput, frozen: &Frozen) -> Tensor {
    frozen_distillation(out.he_graph.as_ref().unwrap(), frozen.he.as_ref().unwrap())
}

pub type Pick = fn(&ForwardOutput, &Losses, &Frozen) -> Tensor;

pub fn regression_components() -> Vec<(&'static str, Pick)> {
    vec![
        ("task (fused head, absolute error)", |_, l, _| l.task_fused.clone()),
        ("task (unimodal logits)", |_, l, _| l.task_unimodal.clone()),
        ("reconstruction", |_, l, _| l.rec.clone()),
        ("cycle", |_, l, _| l.cyc.clone()),
        ("margin triplet", |_, l, _| l.margin.clone()),
        ("orthogonality", |_, l, _| l.ort.clone()),
        ("homogeneous distillation", |o, _, f| dtl_ho(o, f)),
        ("heterogeneous distillation", |o, _, f| dtl_he(o, f)),
        ("homogeneous dictionary contrastive", |_, l, _| l.ctr_ho.clone()),
        ("heterogeneous dictionary contrastive", |_, l, _| l.ctr_he.clone()),
        ("total objective", |o, l, f| {
            // unit weights: swap each distillation term for its frozen-teacher form
            let rest = (&l.total - &l.dtl).unwrap();
            ((rest + dtl_ho(o, f)).unwrap() + dtl_he(o, f)).unwrap()
        }),
    ]
}

pub fn binary_components() -> Vec<(&'static str, Pick)> {
    vec![
        ("task (fused head, class NLL)", |_, l, _| l.task_fused.clone()),
        ("task (unimodal logits, class NLL)", |_, l, _| l.task_unimodal.clone()),
    ]
}

pub struct Harness {
    pub store: ParamStore,
    pub model: DhmdModel,
    pub batch: BatchTensors,
}

impl Harness {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut cfg = toy_config(classes, seed);
        // wide margin keeps the hinge terms active at initialization
        cfg.margin = 0.8;
        let batch = toy_batch(classes, seed, 6);
        let task = if classes == 2 { TaskType::Binary } else { TaskType::Regression };
        let shape = DataShape {
            input_dims: toy_spec(classes, seed).feature_dims,
            task,
            max_len: 5,
        };
        let mut store = f64_store(seed);
        let model = DhmdModel::new(&mut store, &cfg, shape).unwrap();
        let batch = BatchTensors::new(&batch, &cpu(), DType::F64).unwrap();
        Harness { store, model, batch }
    }

    pub fn eval(&self, pick: Pick, frozen: &Frozen) -> f64 {
        let out = self.model.forward(&self.batch).unwrap();
        let losses = self.model.losses(&out, &self.batch, LossWeights::unit()).unwrap();
        scalar(&pick(&out, &losses, frozen))
    }

    fn values(&self, name: &str) -> Vec<f64> {
        vec1(self.store.get(name).unwrap().as_tensor())
    }

    fn eval_at(&self, name: &str, base: &[f64], index: usize, delta: f64, pick: Pick, frozen: &Frozen) -> f64 {
        let mut v = base.to_vec();
        v[index] += delta;
        self.store.set_values(name, &v).unwrap();
        let f = self.eval(pick, frozen);
        self.store.set_values(name, base).unwrap();
        f
    }

    /// Checks `coords` randomly chosen coordinates with nonzero analytic
    /// gradient. Coordinates near a kink (one-sided slopes that do not
    /// scale like a smooth function's) are resampled.
    pub fn check(&self, pick: Pick, coords: usize, seed: u64) -> std::result::Result<String, String> {
        let out = self.model.forward(&self.batch).unwrap();
        let losses = self.model.losses(&out, &self.batch, LossWeights::unit()).unwrap();
        let frozen = Frozen::capture(&out);
        let loss = pick(&out, &losses, &frozen);
        let f0 = scalar(&loss);
        let grads = loss.backward().unwrap();
        let mut candidates = Vec::new();
        for (name, var) in self.store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                for (i, a) in vec1(g).into_iter().enumerate() {
                    if a.abs() > 1e-8 {
                        candidates.push((name.clone(), i, a));
                    }
                }
            }
        }
        candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (mut verified, mut kinks, mut worst) = (0, 0, 0.0f64);
        for (name, index, analytic) in candidates.iter().take(MAX_ATTEMPTS) {
            let base = self.values(name);
            let f = |d: f64| self.eval_at(name, &base, *index, d, pick, &frozen);
            let (fp, fm) = (f(STEP), f(-STEP));
            let (fp2, fm2) = (f(STEP / 2.0), f(-STEP / 2.0));
            let jump = ((fp - f0) - (f0 - fm)) / STEP;
            let jump_half = ((fp2 - f0) - (f0 - fm2)) / (STEP / 2.0);
            if (jump - 2.0 * jump_half).abs() > 1e-7 * (1.0 + f0.abs()) {
                kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            if err > REL_TOL * scale + ABS_FLOOR {
                return Err(format!(
                    "{name}[{index}]: analytic {analytic:.6e}, numeric {numeric:.6e}, relative error {:.2e}",
                    err / scale
                ));
            }
            worst = worst.max(err / scale);
            verified += 1;
            if verified == coords {
                return Ok(format!("{verified} coordinates, worst relative error {worst:.1e}, {kinks} kinks resampled"));
            }
        }
        Err(format!(
            "only {verified} smooth coordinates with nonzero gradient out of {} candidates ({kinks} kinks)",
            candidates.len()
        ))
    }
}

/// Runs every component on the regression and binary toy models.
pub fn gradient_suite(coords: usize) -> Vec<(String, std::result::Result<String, String>)> {
    let mut results = Vec::new();
    for (classes, components) in [(3, regression_components()), (2, binary_components())] {
        let h = Harness::new(classes, 7);
        for (k, (name, pick)) in components.into_iter().enumerate() {
            results.push((name.to_string(), h.check(pick, coords, 100 + k as u64)));
        }
    }
    results
}
