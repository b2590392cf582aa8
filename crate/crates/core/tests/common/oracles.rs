//! Brute-force loop implementations checked against the tensor code.

use candle_core::Tensor;
use dhmd::crossmodal::{CrossLayer, CrossModalConfig, MultiHeadCross};
use dhmd::decoupler::{loss_margin, TemporalConv};
use dhmd::dictionary::{contrastive_loss, match_features, Dictionary, Space};
use dhmd::graph_distill::{distillation_loss, per_target_losses, GdUnit, GdUnitConfig};
use dhmd::nn::{ParamStore, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const TOL: f64 = 1e-6;

type M2 = Vec<Vec<f64>>;
type M3 = Vec<Vec<Vec<f64>>>;

/// Replaces every parameter in `store` with `scale * N(0, 1)` draws.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<(String, usize)> = store.iter().map(|(n, v)| (n.clone(), v.elem_count())).collect();
    for (name, n) in names {
        let v: Vec<f64> = normals(rng, n).into_iter().map(|x| x * scale).collect();
        store.set_values(&name, &v).unwrap();
    }
}

fn affine(w: &M2, b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(o, row)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b[o]))
        .collect()
}

fn param2(store: &ParamStore, name: &str) -> M2 {
    vec2(store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).as_tensor())
}

fn param1(store: &ParamStore, name: &str) -> Vec<f64> {
    vec1(store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).as_tensor())
}

fn softmax_valid(scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(valid)
        .map(|(s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[c] + shift[c])
        .collect()
}

fn flat3(x: &M3) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

fn mask_bools(mask: &Tensor) -> Vec<Vec<bool>> {
    vec2(mask).into_iter().map(|r| r.into_iter().map(|v| v != 0.0).collect()).collect()
}

/// Same-length zero-padded temporal convolution by explicit loops.
pub fn conv_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t) = (2, rng.random_range(1..=5));
    let (cin, cout) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let mut store = f64_store(seed);
    let conv = TemporalConv::new(&mut store, "conv", cin, cout, kernel).unwrap();
    let x = random_tensor(&mut rng, &[b, t, cin]);
    let lengths = random_lengths(&mut rng, b, t);
    let mask = prefix_mask(&lengths, t);
    let got = conv.forward(&x, &mask).map_err(|e| e.to_string())?;

    let w: M3 = vec3(&conv.weight);
    let bias = vec1(&conv.bias);
    let xv = vec3(&x);
    let pad = (kernel - 1) / 2;
    let mut want = vec![vec![vec![0.0; cout]; t]; b];
    for bi in 0..b {
        for ti in 0..lengths[bi] {
            for o in 0..cout {
                let mut acc = bias[o];
                for j in 0..kernel {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= lengths[bi] {
                        continue;
                    }
                    for c in 0..cin {
                        acc += w[o][c][j] * xv[bi][src as usize][c];
                    }
                }
                want[bi][ti][o] = acc;
            }
        }
    }
    close("temporal convolution", &vec1(&got), &flat3(&want), TOL)
}

struct HeadsOracle {
    out: M3,
    weights: Vec<Vec<M2>>,
}

/// Multi-head cross attention by loops: queries from `target`, keys and values from `source`.
fn attention_loops(store: &ParamStore, prefix: &str, heads: usize, target: &M3, source: &M3, valid: &[Vec<bool>]) -> HeadsOracle {
    let p = |n: &str| format!("{prefix}.{n}");
    let (wq, bq) = (param2(store, &p("query.weight")), param1(store, &p("query.bias")));
    let (wk, bk) = (param2(store, &p("key.weight")), param1(store, &p("key.bias")));
    let (wv, bv) = (param2(store, &p("value.weight")), param1(store, &p("value.bias")));
    let (wo, bo) = (param2(store, &p("output.weight")), param1(store, &p("output.bias")));
    let d = wq.len();
    let hd = d / heads;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for (bi, (tgt, src)) in target.iter().zip(source).enumerate() {
        let q: M2 = tgt.iter().map(|x| affine(&wq, Some(&bq), x)).collect();
        let k: M2 = src.iter().map(|x| affine(&wk, Some(&bk), x)).collect();
        let v: M2 = src.iter().map(|x| affine(&wv, Some(&bv), x)).collect();
        let mut ctx = vec![vec![0.0; d]; q.len()];
        let mut per_head = Vec::new();
        for h in 0..heads {
            let lanes = h * hd..(h + 1) * hd;
            let mut rows = Vec::new();
            for (tq, qrow) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|krow| lanes.clone().map(|e| qrow[e] * krow[e]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let a = softmax_valid(&scores, &valid[bi]);
                for e in lanes.clone() {
                    ctx[tq][e] = a.iter().zip(&v).map(|(w, vrow)| w * vrow[e]).sum();
                }
                rows.push(a);
            }
            per_head.push(rows);
        }
        out.push(ctx.iter().map(|c| affine(&wo, Some(&bo), c)).collect());
        weights.push(per_head);
    }
    HeadsOracle { out, weights }
}

/// Multi-head cross attention and the full pre-norm layer against loops.
pub fn attention_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, heads) = (2, 2);
    let d = 4;
    let (tt, ts) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let cfg = CrossModalConfig {
        input_dims: [d; 3],
        d_model: d,
        heads,
        layers: 1,
        ff_width: 5,
        max_len: 5,
    };
    let mut store = f64_store(seed);
    let mha = MultiHeadCross::new(&mut store, "mha", d, heads).unwrap();
    let layer = CrossLayer::new(&mut store, "layer", &cfg).unwrap();
    randomize(&store, &mut rng, 0.7);
    let target = random_tensor(&mut rng, &[b, tt, d]);
    let source = random_tensor(&mut rng, &[b, ts, d]);
    let t_len = random_lengths(&mut rng, b, tt);
    let s_len = random_lengths(&mut rng, b, ts);
    let (t_mask, s_mask) = (prefix_mask(&t_len, tt), prefix_mask(&s_len, ts));
    let valid = mask_bools(&s_mask);
    let (tv, sv) = (vec3(&target), vec3(&source));

    let (got, got_w) = mha.forward(&target, &source, &s_mask).map_err(|e| e.to_string())?;
    let want = attention_loops(&store, "mha", heads, &tv, &sv, &valid);
    close("cross attention output", &vec1(&got), &flat3(&want.out), TOL)?;
    let want_w: Vec<f64> = want.weights.iter().flatten().flatten().flatten().copied().collect();
    close("cross attention weights", &vec1(&got_w), &want_w, TOL)?;

    // Pre-norm layer: x + attn(LN(x), LN(src)), then x + FF(LN(x)), masked on the target.
    let (got_l, _) = layer.forward(&target, &source, &t_mask, &s_mask).map_err(|e| e.to_string())?;
    let ln = |name: &str, x: &[f64]| layer_norm(x, &param1(&store, &format!("layer.{name}.gain")), &param1(&store, &format!("layer.{name}.shift")));
    let nt: M3 = tv.iter().map(|s| s.iter().map(|x| ln("norm_target", x)).collect()).collect();
    let ns: M3 = sv.iter().map(|s| s.iter().map(|x| ln("norm_source", x)).collect()).collect();
    let att = attention_loops(&store, "layer.attn", heads, &nt, &ns, &valid);
    let (w1, b1) = (param2(&store, "layer.ff_in.weight"), param1(&store, "layer.ff_in.bias"));
    let (w2, b2) = (param2(&store, "layer.ff_out.weight"), param1(&store, "layer.ff_out.bias"));
    let mut want_l = vec![vec![vec![0.0; d]; tt]; b];
    for bi in 0..b {
        for ti in 0..t_len[bi] {
            let x: Vec<f64> = tv[bi][ti].iter().zip(&att.out[bi][ti]).map(|(a, c)| a + c).collect();
            let hidden: Vec<f64> = affine(&w1, Some(&b1), &ln("norm_ff", &x)).into_iter().map(|v| v.max(0.0)).collect();
            let ff = affine(&w2, Some(&b2), &hidden);
            want_l[bi][ti] = x.iter().zip(&ff).map(|(a, c)| a + c).collect();
        }
    }
    close("cross attention layer", &vec1(&got_l), &flat3(&want_l), TOL)
}

/// Dictionary matching: masked max over time, softmax, convex combination of atoms.
pub fn dictionary_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t) = (rng.random_range(1..=4), rng.random_range(1..=5));
    let (k, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let mut store = f64_store(seed);
    let dict = Dictionary::new(&mut store, "dictionary", Space::Heterogeneous, k, c).unwrap();
    let x = random_tensor(&mut rng, &[b, t, c]);
    let lengths = random_lengths(&mut rng, b, t);
    let mask = prefix_mask(&lengths, t);
    let got = match_features(&x, &mask, &dict).map_err(|e| e.to_string())?;

    let atoms = vec2(&dict.atoms);
    let xv = vec3(&x);
    let mut alpha_all = Vec::new();
    let mut z_all = Vec::new();
    for bi in 0..b {
        let pooled: Vec<f64> = (0..k)
            .map(|a| {
                (0..lengths[bi])
                    .map(|ti| (0..c).map(|ci| xv[bi][ti][ci] * atoms[a][ci]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let alpha = softmax_valid(&pooled, &vec![true; k]);
        let z: Vec<f64> = (0..c).map(|ci| (0..k).map(|a| alpha[a] * atoms[a][ci]).sum()).collect();
        alpha_all.extend(alpha);
        z_all.extend(z);
    }
    close("dictionary alpha", &vec1(&got.alpha), &alpha_all, TOL)?;
    close("dictionary reconstruction", &vec1(&got.z), &z_all, TOL)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + dhmd::nn::NORM_EPS).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + dhmd::nn::NORM_EPS).sqrt();
    dot / (na * nb)
}

/// Mean hinge over every (anchor, cross-modal positive, same-modal negative) triple.
pub fn triplet_enumeration(per_modality: &[M2], classes: &[usize], margin: f64) -> f64 {
    let mut items = Vec::new();
    for (m, rows) in per_modality.iter().enumerate() {
        for (b, row) in rows.iter().enumerate() {
            items.push((m, classes[b], row.clone()));
        }
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (mi, ci, xi) in &items {
        for (mj, cj, xj) in &items {
            if mj == mi || cj != ci {
                continue;
            }
            for (mk, ck, xk) in &items {
                if mk != mi || ck == ci {
                    continue;
                }
                total += (margin - cosine(xi, xj) + cosine(xi, xk)).max(0.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Both triplet losses (decoupling margin and dictionary contrastive) against enumeration.
pub fn triplet_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..=5);
    let c = rng.random_range(2..=5);
    let classes: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let margin = [0.1, 0.5, 1.0][rng.random_range(0..3)];
    let pooled: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[b, c])).collect();
    let rows: Vec<M2> = pooled.iter().map(vec2).collect();
    let want = triplet_enumeration(&rows, &classes, margin);
    let got = loss_margin(&pooled, &classes, margin).map_err(|e| e.to_string())?;
    close("margin triplet loss", &[scalar(&got.value)], &[want], TOL)?;
    let got = contrastive_loss(&pooled, &classes, margin).map_err(|e| e.to_string())?;
    close("dictionary contrastive loss", &[scalar(&got.value)], &[want], TOL)
}

/// GD-Unit end to end: logits, edge weights from concatenated pair
/// descriptors, discrepancies, and the per-target weighted losses summed over
/// targets against the elementwise `W * E` norm.
pub fn distillation_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, c) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    let outputs = rng.random_range(1..=2);
    let hidden = rng.random_range(1..=3);
    let mut store = f64_store(seed);
    let unit = GdUnit::new(
        &mut store,
        "gd",
        &GdUnitConfig {
            feature_dim: c,
            num_outputs: outputs,
            hidden,
        },
    )
    .unwrap();
    let feats: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[b, t, c])).collect();
    let lengths: Vec<Vec<usize>> = (0..3).map(|_| random_lengths(&mut rng, b, t)).collect();
    let masks: Vec<Tensor> = lengths.iter().map(|l| prefix_mask(l, t)).collect();
    let graph = unit.forward(&feats, &masks).map_err(|e| e.to_string())?;

    let (wf, bf) = (param2(&store, "gd.logit_head.weight"), param1(&store, "gd.logit_head.bias"));
    let wl = param2(&store, "gd.logit_proj.weight");
    let wr = param2(&store, "gd.repr_proj.weight");
    let g = param2(&store, "gd.edge.weight").remove(0);
    let fv: Vec<M3> = feats.iter().map(vec3).collect();

    let (mut w_all, mut e_all, mut logits_all) = (Vec::new(), Vec::new(), vec![Vec::new(); 3]);
    let mut zeta_sum = vec![0.0; 3];
    let mut loss = 0.0;
    for bi in 0..b {
        let mut logits = Vec::new();
        let mut desc = Vec::new();
        for m in 0..3 {
            let n = lengths[m][bi];
            let pooled: Vec<f64> = (0..c).map(|ci| (0..n).map(|ti| fv[m][bi][ti][ci]).sum::<f64>() / n as f64).collect();
            let logit = affine(&wf, Some(&bf), &pooled);
            let mut d = affine(&wl, None, &logit);
            d.extend(affine(&wr, None, &pooled));
            logits_all[m].extend(logit.clone());
            logits.push(logit);
            desc.push(d);
        }
        let mut raw = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let pair: Vec<f64> = desc[i].iter().chain(&desc[j]).copied().collect();
                raw[i][j] = pair.iter().zip(&g).map(|(a, b)| a * b).sum();
            }
        }
        let mut w = [[0.0; 3]; 3];
        let mut e = [[0.0; 3]; 3];
        for j in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| raw[i][j]).collect();
            let valid: Vec<bool> = (0..3).map(|i| i != j).collect();
            let s = softmax_valid(&col, &valid);
            for i in 0..3 {
                w[i][j] = s[i];
                if i != j {
                    e[i][j] = logits[i].iter().zip(&logits[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / outputs as f64;
                }
            }
            // weighted loss of target j over its in-neighbourhood
            let zeta: f64 = (0..3).filter(|&i| i != j).map(|i| w[i][j] * e[i][j]).sum();
            zeta_sum[j] += zeta / b as f64;
            loss += zeta / b as f64;
        }
        w_all.extend(w.iter().flatten());
        e_all.extend(e.iter().flatten());
    }
    for m in 0..3 {
        close("modality logits", &vec1(&graph.logits[m]), &logits_all[m], TOL)?;
    }
    close("edge weights", &vec1(&graph.w), &w_all, TOL)?;
    close("discrepancies", &vec1(&graph.e), &e_all, TOL)?;
    let got = scalar(&distillation_loss(&graph.w, &graph.e).map_err(|e| e.to_string())?);
    close("distillation loss", &[got], &[loss], TOL)?;
    let per_target = per_target_losses(&graph.w, &graph.e).map_err(|e| e.to_string())?;
    close("per-target losses", &per_target, &zeta_sum, TOL)
}

/// Every oracle over a handful of random toy problems.
pub fn oracle_suite(trials: u64) -> Vec<(&'static str, Check)> {
    let cases: [(&'static str, fn(u64) -> Check); 5] = [
        ("convolution", conv_case),
        ("cross-modal attention", attention_case),
        ("dictionary matching", dictionary_case),
        ("triplet losses", triplet_case),
        ("distillation", distillation_case),
    ];
    cases
        .iter()
        .map(|(name, f)| (*name, (0..trials).try_for_each(|s| f(1000 + s).map_err(|e| format!("seed {}: {e}", 1000 + s)))))
        .collect()
}
