//! Run directory layout and the export readers.
//!
//! ```text
//! config.json          run configuration
//! metrics.csv          per-epoch training loss components and validation metrics
//! edges.jsonl          {"epoch", "unit": "HoGD"|"HeGD", "W"} per epoch and unit
//! activations.jsonl    {"epoch", "space", "modality", "class", "alpha", "top"}
//! attention/*.json     {"sample_id", "pair": "L->V", "weights"}
//! checkpoint.bin       best-validation parameters
//! last.bin             final parameters with optimizer state, for resuming
//! report.json          test metrics, probes and final edges
//! *.svg                loss, accuracy and edge plots
//! ```
//!
//! The directory is assembled next to its destination and renamed into
//! place once complete.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{write_bytes_atomic, OracleReport};
use crate::graph_distill::outgoing_mass;
use crate::pipeline::config::RunConfig;
use crate::pipeline::metrics::Metrics;
use crate::pipeline::model::LossValues;
use crate::pipeline::plot::{heatmap, line_chart};
use crate::pipeline::probe::ProbeReport;
use crate::pipeline::train::{ActivationRecord, AttentionRecord, EdgeRecord, Session};
use crate::{DhmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub valid: Metrics,
    pub test: Metrics,
    pub probe: ProbeReport,
    pub oracle: Option<OracleReport>,
    /// Latest EMA edge matrix per unit.
    pub edges: BTreeMap<String, Vec<Vec<f64>>>,
    /// Outgoing edge mass per source modality, per unit.
    pub outgoing: BTreeMap<String, Vec<f64>>,
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| DhmdError::InvalidDataset(format!("serialization failed: {e}")))
}

fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| DhmdError::InvalidDataset(format!("serialization failed: {e}")))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&to_json(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

pub fn metrics_csv(session: &Session) -> String {
    let mut out = String::from("epoch");
    for n in LossValues::NAMES {
        out.push_str(&format!(",train_{n}"));
    }
    out.push_str(",valid_accuracy,valid_acc7,valid_acc2,valid_f1,valid_precision,valid_recall,valid_mae,valid_corr,seconds\n");
    for r in &session.state.history {
        out.push_str(&r.epoch.to_string());
        for v in r.train.as_array() {
            out.push_str(&format!(",{v}"));
        }
        let m = &r.valid;
        out.push_str(&format!(
            ",{},{},{},{},{},{},{},{},{}\n",
            m.accuracy,
            fmt_opt(m.acc7),
            m.acc2,
            m.f1,
            m.precision,
            m.recall,
            fmt_opt(m.mae),
            fmt_opt(m.corr),
            r.seconds
        ));
    }
    out
}

fn latest_edges(edges: &[EdgeRecord]) -> BTreeMap<String, Vec<Vec<f64>>> {
    let mut out = BTreeMap::new();
    for e in edges {
        out.insert(e.unit.clone(), e.w.clone());
    }
    out
}

/// Mean of a unit's edge matrices over its last `window` epochs.
pub fn edge_window_mean(edges: &[EdgeRecord], unit: &str, window: usize) -> Option<Vec<Vec<f64>>> {
    let rows: Vec<&EdgeRecord> = edges.iter().filter(|e| e.unit == unit).collect();
    let tail = &rows[rows.len().saturating_sub(window)..];
    let first = tail.first()?;
    let mut mean = vec![vec![0.0; first.w[0].len()]; first.w.len()];
    for r in tail {
        for (mrow, row) in mean.iter_mut().zip(&r.w) {
            for (m, v) in mrow.iter_mut().zip(row) {
                *m += v / tail.len() as f64;
            }
        }
    }
    Some(mean)
}

/// Test evaluation, probes and edge summaries of a finished session (best parameters).
pub fn build_report(session: &Session) -> Result<RunReport> {
    session.use_best()?;
    let test = session.evaluate(&session.data.test)?;
    let valid = session.evaluate(&session.data.valid)?;
    let probe = session.probe()?;
    let edges = latest_edges(&session.state.edges);
    let outgoing = edges.iter().map(|(k, w)| (k.clone(), outgoing_mass(w))).collect();
    Ok(RunReport {
        ablation: session.config.switches.to_string(),
        seed: session.config.seed,
        epochs: session.state.epochs_done,
        best_epoch: session.state.best.map_or(0, |b| b.0),
        valid: valid.metrics,
        test: test.metrics,
        probe,
        oracle: session.data.oracle.clone(),
        edges,
        outgoing,
    })
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    write_bytes_atomic(&dir.join(name), body.as_bytes())
}

pub fn attention_file_name(index: usize, pair: &str) -> String {
    format!("{index:03}_{}.json", pair.replace("->", "to"))
}

fn write_contents(session: &Session, report: &RunReport, dir: &Path) -> Result<()> {
    write(dir, "config.json", &to_json_pretty(&session.config)?)?;
    write(dir, "metrics.csv", &metrics_csv(session))?;
    write(dir, "edges.jsonl", &jsonl(&session.state.edges)?)?;
    write(dir, "activations.jsonl", &jsonl(&session.state.activations)?)?;
    session.last_checkpoint()?.save(&dir.join("last.bin"))?;
    session.best_checkpoint()?.save(&dir.join("checkpoint.bin"))?;
    if session.model.crossmodal.is_some() {
        let att_dir = dir.join("attention");
        fs::create_dir_all(&att_dir).map_err(|e| DhmdError::io(&att_dir, e))?;
        let maps = session.attention_maps(&session.data.test, session.config.attention_samples)?;
        let mut index = BTreeMap::new();
        for rec in &maps {
            let next = index.len();
            let i = *index.entry(rec.sample_id.clone()).or_insert(next);
            write(&att_dir, &attention_file_name(i, &rec.pair), &to_json(rec)?)?;
        }
    }
    write(dir, "report.json", &to_json_pretty(report)?)?;

    let hist = &session.state.history;
    let series = |name: &str, f: &dyn Fn(&crate::pipeline::train::EpochRecord) -> f64| {
        (name.to_string(), hist.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>())
    };
    write(
        dir,
        "loss.svg",
        &line_chart(
            "training loss",
            "epoch",
            &[
                series("total", &|r| r.train.total),
                series("task", &|r| r.train.task),
                series("dec", &|r| r.train.dec),
                series("dtl", &|r| r.train.dtl),
                series("dic", &|r| r.train.dic),
            ],
        ),
    )?;
    write(
        dir,
        "accuracy.svg",
        &line_chart("validation accuracy (%)", "epoch", &[series("accuracy", &|r| r.valid.accuracy)]),
    )?;
    for (unit, w) in &report.edges {
        write(dir, &format!("edges_{unit}.svg"), &heatmap(&format!("{unit} edge weights (source row, target column)"), &["L", "V", "A"], w))?;
    }
    Ok(())
}

/// Writes the run directory for `session` to `out`. When `replace` is set an
/// existing directory at `out` is swapped out; otherwise it is an error.
pub fn write_run(session: &Session, report: &RunReport, out: &Path, replace: bool) -> Result<()> {
    if out.exists() && !replace {
        return Err(DhmdError::Config(format!("output directory {} already exists", out.display())));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| DhmdError::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".dhmd-run-")
        .tempdir_in(&parent)
        .map_err(|e| DhmdError::io(&parent, e))?;
    write_contents(session, report, staging.path())?;
    let staged = staging.keep();
    if out.exists() {
        let old = tempfile::Builder::new()
            .prefix(".dhmd-old-")
            .tempdir_in(&parent)
            .map_err(|e| DhmdError::io(&parent, e))?;
        let old_path = old.path().join("run");
        fs::rename(out, &old_path).map_err(|e| DhmdError::io(out, e))?;
        fs::rename(&staged, out).map_err(|e| DhmdError::io(out, e))?;
    } else {
        fs::rename(&staged, out).map_err(|e| DhmdError::io(out, e))?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| DhmdError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DhmdError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn read_edges(run: &Path) -> Result<Vec<EdgeRecord>> {
    read_jsonl(&run.join("edges.jsonl"))
}

pub fn read_activations(run: &Path) -> Result<Vec<ActivationRecord>> {
    read_jsonl(&run.join("activations.jsonl"))
}

pub fn read_report(run: &Path) -> Result<RunReport> {
    let path = run.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| DhmdError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| DhmdError::Json { path, line: 0, source })
}

pub fn read_attention(run: &Path) -> Result<Vec<AttentionRecord>> {
    let dir = run.join("attention");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| DhmdError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| DhmdError::io(p, e))?;
            serde_json::from_str(&text).map_err(|source| DhmdError::Json {
                path: p.clone(),
                line: 1,
                source,
            })
        })
        .collect()
}

/// Plain JSON-lines rendering for stdout.
pub fn render_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    jsonl(rows)
}

/// Loads a run's configuration.
pub fn read_config(run: &Path) -> Result<RunConfig> {
    let path = run.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| DhmdError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| DhmdError::Json { path, line: 0, source })
}
