//! Randomized structural invariants of the masked paths, run through proptest.

use candle_core::Tensor;
use dhmd::crossmodal::{CrossModal, CrossModalConfig};
use dhmd::datamodel::Modality;
use dhmd::decoupler::TemporalConv;
use dhmd::dictionary::{match_features, Dictionary, Space};
use dhmd::graph_distill::{GdUnit, GdUnitConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::randomize;
use super::*;

const STOCHASTIC_TOL: f64 = 1e-6;
const PADDING_TOL: f64 = 1e-9;
const GARBAGE: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct Case {
    pub batch: usize,
    pub steps: [usize; 3],
    pub dims: [usize; 3],
    pub pad: usize,
    pub seed: u64,
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (
        1usize..=4,
        prop::array::uniform3(1usize..=5),
        prop::array::uniform3(1usize..=5),
        1usize..=3,
        any::<u64>(),
    )
        .prop_map(|(batch, steps, dims, pad, seed)| Case {
            batch,
            steps,
            dims,
            pad,
            seed,
        })
}

/// A padded sequence batch: values, valid lengths, and the same batch with
/// `pad` extra trailing steps. Every invalid position holds large garbage.
struct Padded {
    x: Tensor,
    mask: Tensor,
    x_long: Tensor,
    mask_long: Tensor,
    lengths: Vec<usize>,
}

fn padded(rng: &mut ChaCha8Rng, batch: usize, steps: usize, dim: usize, pad: usize) -> Padded {
    let lengths = random_lengths(rng, batch, steps);
    let long = steps + pad;
    let mut short = Vec::new();
    let mut full = Vec::new();
    for &len in &lengths {
        for t in 0..long {
            let row: Vec<f64> = if t < len {
                normals(rng, dim)
            } else {
                normals(rng, dim).into_iter().map(|v| v * GARBAGE).collect()
            };
            if t < steps {
                short.extend(&row);
            }
            full.extend(row);
        }
    }
    Padded {
        x: tensor(short, &[batch, steps, dim]),
        mask: prefix_mask(&lengths, steps),
        x_long: tensor(full, &[batch, long, dim]),
        mask_long: prefix_mask(&lengths, long),
        lengths,
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Valid-prefix rows of a `[B, T, C]` tensor.
fn valid_rows(x: &Tensor, lengths: &[usize]) -> Vec<f64> {
    vec3(x)
        .into_iter()
        .zip(lengths)
        .flat_map(|(seq, &l)| seq.into_iter().take(l).flatten())
        .collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn check_case(case: &Case) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let b = case.batch;
    let seqs: Vec<Padded> = (0..3)
        .map(|m| padded(&mut rng, b, case.steps[m], case.dims[m], case.pad))
        .collect();
    let mut store = f64_store(case.seed);

    // Convolution: trailing padding never leaks into valid steps.
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let conv = TemporalConv::new(&mut store, "conv", case.dims[0], 3, kernel).unwrap();
    let s = &seqs[0];
    if kernel <= 2 * case.steps[0] + 1 {
        let y = conv.forward(&s.x, &s.mask).map_err(err)?;
        let y_long = conv.forward(&s.x_long, &s.mask_long).map_err(err)?;
        let (a, c) = (valid_rows(&y, &s.lengths), valid_rows(&y_long, &s.lengths));
        ensure(max_abs_diff(&a, &c) <= PADDING_TOL, || {
            format!("convolution changes under padding by {:.2e}", max_abs_diff(&a, &c))
        })?;
    }

    // Dictionary: alpha on the simplex, z inside the atoms' hull, padding invariant.
    let k = rng.random_range(1..=6);
    let dict = Dictionary::new(&mut store, "dictionary", Space::Homogeneous, k, case.dims[1]).unwrap();
    let s = &seqs[1];
    let dm = match_features(&s.x, &s.mask, &dict).map_err(err)?;
    let dm_long = match_features(&s.x_long, &s.mask_long, &dict).map_err(err)?;
    let atoms = vec2(&dict.atoms);
    for (alpha, z) in vec2(&dm.alpha).iter().zip(vec2(&dm.z)) {
        let sum: f64 = alpha.iter().sum();
        ensure(alpha.iter().all(|&a| a >= 0.0) && (sum - 1.0).abs() <= STOCHASTIC_TOL, || {
            format!("alpha {alpha:?} is not on the simplex")
        })?;
        for (c, zc) in z.iter().enumerate() {
            let lo = atoms.iter().map(|a| a[c]).fold(f64::INFINITY, f64::min);
            let hi = atoms.iter().map(|a| a[c]).fold(f64::NEG_INFINITY, f64::max);
            ensure(*zc >= lo - PADDING_TOL && *zc <= hi + PADDING_TOL, || {
                format!("z[{c}] = {zc} outside the atoms' range [{lo}, {hi}]")
            })?;
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_atom = atoms
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        ensure(zn <= max_atom + PADDING_TOL, || format!("|z| = {zn} exceeds the largest atom norm {max_atom}"))?;
    }
    let d = max_abs_diff(&vec1(&dm.alpha), &vec1(&dm_long.alpha));
    ensure(d <= PADDING_TOL, || format!("dictionary alpha changes under padding by {d:.2e}"))?;

    // Cross-modal attention: rows stochastic over valid keys, padding invariant.
    let cfg = CrossModalConfig {
        input_dims: case.dims,
        d_model: 4,
        heads: 2,
        layers: rng.random_range(1..=2),
        ff_width: 5,
        max_len: 8,
    };
    let mut ca_store = f64_store(case.seed ^ 1);
    let ca = CrossModal::new(&mut ca_store, "crossmodal", &cfg).unwrap();
    randomize(&ca_store, &mut rng, 0.5);
    let xs: Vec<Tensor> = seqs.iter().map(|s| s.x.clone()).collect();
    let ms: Vec<Tensor> = seqs.iter().map(|s| s.mask.clone()).collect();
    let xl: Vec<Tensor> = seqs.iter().map(|s| s.x_long.clone()).collect();
    let ml: Vec<Tensor> = seqs.iter().map(|s| s.mask_long.clone()).collect();
    let r = ca.reinforce_all(&xs, &ms).map_err(err)?;
    let r_long = ca.reinforce_all(&xl, &ml).map_err(err)?;
    for target in Modality::ALL {
        let t = target.index();
        let (a, c) = (valid_rows(&r.reinforced[t], &seqs[t].lengths), valid_rows(&r_long.reinforced[t], &seqs[t].lengths));
        ensure(max_abs_diff(&a, &c) <= PADDING_TOL, || {
            format!("reinforced {target} changes under padding by {:.2e}", max_abs_diff(&a, &c))
        })?;
        for source in dhmd::crossmodal::sources_of(target) {
            let w = vec3(r.attention(source, target).unwrap());
            let src_len = &seqs[source.index()].lengths;
            for (bi, rows) in w.iter().enumerate() {
                for row in rows {
                    let sum: f64 = row.iter().sum();
                    ensure((sum - 1.0).abs() <= STOCHASTIC_TOL, || format!("attention row sums to {sum}"))?;
                    ensure(row.iter().skip(src_len[bi]).all(|&v| v == 0.0), || {
                        "masked key received attention".to_string()
                    })?;
                }
            }
        }
    }

    // Edge weights: incoming columns stochastic, no self-edges, pooling padding invariant.
    let c = rng.random_range(1..=4);
    let gd = GdUnit::new(
        &mut store,
        "gd",
        &GdUnitConfig {
            feature_dim: c,
            num_outputs: rng.random_range(1..=2),
            hidden: 3,
        },
    )
    .unwrap();
    randomize(&store, &mut rng, 1.0);
    let feats: Vec<Padded> = (0..3).map(|m| padded(&mut rng, b, case.steps[m], c, case.pad)).collect();
    let g = gd
        .forward(&feats.iter().map(|p| p.x.clone()).collect::<Vec<_>>(), &feats.iter().map(|p| p.mask.clone()).collect::<Vec<_>>())
        .map_err(err)?;
    let g_long = gd
        .forward(
            &feats.iter().map(|p| p.x_long.clone()).collect::<Vec<_>>(),
            &feats.iter().map(|p| p.mask_long.clone()).collect::<Vec<_>>(),
        )
        .map_err(err)?;
    for w in vec3(&g.w) {
        for j in 0..3 {
            let sum: f64 = (0..3).map(|i| w[i][j]).sum();
            ensure((sum - 1.0).abs() <= STOCHASTIC_TOL && w[j][j] == 0.0, || {
                format!("column {j} of W sums to {sum} with self weight {}", w[j][j])
            })?;
        }
    }
    for e in vec3(&g.e) {
        ensure((0..3).all(|i| e[i][i] == 0.0) && e.iter().flatten().all(|&v| v >= 0.0), || {
            format!("discrepancy matrix {e:?} is not a non-negative zero-diagonal matrix")
        })?;
    }
    let d = max_abs_diff(&vec1(&g.w), &vec1(&g_long.w));
    ensure(d <= PADDING_TOL, || format!("edge weights change under padding by {d:.2e}"))
}

/// Runs `cases` randomized cases from a fixed-seed runner. Returns the count on success.
pub fn invariant_suite(cases: u32) -> std::result::Result<u32, String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&case_strategy(), |case| check_case(&case).map_err(TestCaseError::fail))
        .map(|_| cases)
        .map_err(|e| e.to_string())
}
