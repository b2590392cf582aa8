//! Shared support for the integration and acceptance targets.
#![allow(dead_code)]

pub mod experiments;
pub mod gradcheck;
pub mod invariants;
pub mod oracles;
pub mod roundtrip;

use candle_core::{DType, Device, Tensor};
use dhmd::datamodel::{collate, generate_synthetic, Batch, SyntheticTaskSpec};
use dhmd::nn::ParamStore;
use dhmd::pipeline::{DataSource, Precision, RunConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = std::result::Result<(), String>;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn f64_store(seed: u64) -> ParamStore {
    ParamStore::new(seed, DType::F64, Device::Cpu)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn tensor(values: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(values, dims, &Device::Cpu).expect("shape matches")
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    tensor(normals(rng, n), dims)
}

/// Prefix mask `[B, T]` for the given valid lengths.
pub fn prefix_mask(lengths: &[usize], steps: usize) -> Tensor {
    let v: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..steps).map(move |t| if t < l { 1.0 } else { 0.0 }))
        .collect();
    tensor(v, &[lengths.len(), steps])
}

pub fn random_lengths(rng: &mut ChaCha8Rng, batch: usize, steps: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    // at least one row uses every step so the tensor width is meaningful
    l[0] = steps;
    l
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn vec2(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

pub fn vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Check {
    if got.len() != want.len() {
        return Err(format!("{what}: {} values, oracle has {}", got.len(), want.len()));
    }
    let d = max_abs_diff(got, want);
    if d <= tol {
        Ok(())
    } else {
        Err(format!("{what}: max abs difference {d:.3e} exceeds {tol:.0e}"))
    }
}

/// Small synthetic task for model-level tests.
pub fn toy_spec(classes: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        num_classes: classes,
        samples_per_class: 4,
        eval_samples_per_class: 2,
        seq_len: [(3, 5), (2, 4), (3, 5)],
        feature_dims: [5, 4, 3],
        seed,
        ..SyntheticTaskSpec::default()
    }
}

/// Float64 configuration with every component switched on and tiny widths.
pub fn toy_config(classes: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataSource::Synthetic(toy_spec(classes, seed));
    cfg.seed = seed;
    cfg.epochs = 1;
    cfg.batch_size = 6;
    cfg.width = 4;
    cfg.kernels = [3, 3, 3];
    cfg.ca_dim = 4;
    cfg.ca_heads = 2;
    cfg.ca_layers = 1;
    cfg.ca_ff = 6;
    cfg.dict_size = 5;
    cfg.gd_hidden = 3;
    cfg.precision = Precision::F64;
    cfg
}

/// First `n` training samples of a toy task, spread over the classes.
pub fn toy_batch(classes: usize, seed: u64, n: usize) -> Batch {
    let ds = generate_synthetic(&toy_spec(classes, seed)).expect("valid toy spec");
    let per = ds.spec.samples_per_class;
    let picked: Vec<_> = (0..n)
        .map(|k| ds.train[(k % classes) * per + k / classes].clone())
        .collect();
    collate(&picked).expect("collatable")
}
