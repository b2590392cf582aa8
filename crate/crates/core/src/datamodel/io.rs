//! Dataset directories: `manifest.json` plus one record file per split.
//!
//! JSON-lines records look like
//! `{"id": "s0", "label": 1.5, "L": [[..], ..], "V": [[..], ..], "A": [[..], ..]}`.
//!
//! Packed records (`<split>.bin`) are little-endian:
//!
//! ```text
//! magic  b"DHMD1"
//! u32    record count
//! u32 x3 feature dims (L, V, A)
//! per record:
//!   u32 id length, id bytes (utf-8)
//!   f32 label
//!   per modality (L, V, A): u32 T, then T*dim f32 values
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Modality, ModalitySequence, MultimodalSample, TaskType, NUM_MODALITIES};
use crate::{DhmdError, Result};

const PACKED_MAGIC: &[u8; 5] = b"DHMD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DhmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(DhmdError::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    Packed,
}

impl DatasetFormat {
    fn extension(self) -> &'static str {
        match self {
            DatasetFormat::Jsonl => "jsonl",
            DatasetFormat::Packed => "bin",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = DhmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "packed" | "bin" => Ok(DatasetFormat::Packed),
            other => Err(DhmdError::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Feature dims keyed by modality short name ("L", "V", "A").
    pub dims: BTreeMap<Modality, usize>,
    pub splits: BTreeMap<Split, usize>,
    pub task: TaskType,
    pub label_range: [f32; 2],
    #[serde(default)]
    pub format: DatasetFormat,
}

impl Manifest {
    pub fn dims_array(&self) -> Result<[usize; NUM_MODALITIES]> {
        let mut out = [0; NUM_MODALITIES];
        for m in Modality::ALL {
            out[m.index()] = *self.dims.get(&m).ok_or_else(|| {
                DhmdError::InvalidDataset(format!("manifest has no feature dim for {m}"))
            })?;
        }
        Ok(out)
    }

    pub fn new(dims: [usize; NUM_MODALITIES], task: TaskType, format: DatasetFormat) -> Self {
        let label_range = match task {
            TaskType::Regression => [-3.0, 3.0],
            TaskType::Binary => [0.0, 1.0],
        };
        Manifest {
            dims: Modality::ALL.iter().map(|&m| (m, dims[m.index()])).collect(),
            splits: BTreeMap::new(),
            task,
            label_range,
            format,
        }
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| DhmdError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| DhmdError::Json {
        path,
        line: 1,
        source,
    })
}

fn split_path(dir: &Path, split: Split, format: DatasetFormat) -> PathBuf {
    dir.join(format!("{}.{}", split.name(), format.extension()))
}

/// Loads every sample of `split`, validating against the manifest.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<MultimodalSample>> {
    let manifest = load_manifest(dir)?;
    let dims = manifest.dims_array()?;
    let path = split_path(dir, split, manifest.format);
    let samples = match manifest.format {
        DatasetFormat::Jsonl => read_jsonl_split(&path, manifest.task)?,
        DatasetFormat::Packed => read_packed_split(&path, manifest.task)?,
    };
    for s in &samples {
        if s.dims() != dims {
            return Err(DhmdError::InvalidSample {
                sample_id: s.sample_id.clone(),
                reason: format!("feature dims {:?} differ from manifest {:?}", s.dims(), dims),
            });
        }
    }
    let expected = manifest.splits.get(&split).copied().unwrap_or(0);
    if samples.len() != expected {
        return Err(DhmdError::InvalidDataset(format!(
            "{} holds {} records, manifest declares {expected}",
            path.display(),
            samples.len()
        )));
    }
    Ok(samples)
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    label: Option<f32>,
    #[serde(rename = "L")]
    language: Vec<Vec<Option<f32>>>,
    #[serde(rename = "V")]
    visual: Vec<Vec<Option<f32>>>,
    #[serde(rename = "A")]
    acoustic: Vec<Vec<Option<f32>>>,
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    label: f32,
    #[serde(rename = "L")]
    language: Vec<&'a [f32]>,
    #[serde(rename = "V")]
    visual: Vec<&'a [f32]>,
    #[serde(rename = "A")]
    acoustic: Vec<&'a [f32]>,
}

/// Rewrites the non-standard `NaN` / `Infinity` tokens some JSON writers emit
/// into `null` so that the record still parses and validation can name it.
fn neutralize_nonfinite_tokens(line: &str) -> std::borrow::Cow<'_, str> {
    if !(line.contains("NaN") || line.contains("Infinity")) {
        return std::borrow::Cow::Borrowed(line);
    }
    let mut out = String::with_capacity(line.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
        } else {
            let token = ["-Infinity", "Infinity", "NaN"]
                .into_iter()
                .find(|t| rest.starts_with(t));
            if let Some(t) = token {
                out.push_str("null");
                rest = &rest[t.len()..];
                continue;
            }
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    std::borrow::Cow::Owned(out)
}

fn rows_to_sequence(
    id: &str,
    modality: Modality,
    rows: Vec<Vec<Option<f32>>>,
) -> Result<ModalitySequence> {
    let steps = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(steps * dim);
    for row in rows {
        if row.len() != dim {
            return Err(DhmdError::InvalidSample {
                sample_id: id.to_owned(),
                reason: format!("ragged rows in {modality} stream"),
            });
        }
        data.extend(row.into_iter().map(|v| v.unwrap_or(f32::NAN)));
    }
    Ok(ModalitySequence {
        modality,
        steps,
        dim,
        data,
        mask: vec![true; steps],
    })
}

pub fn read_jsonl_split(path: &Path, task: TaskType) -> Result<Vec<MultimodalSample>> {
    let file = File::open(path).map_err(|e| DhmdError::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DhmdError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord = serde_json::from_str(&neutralize_nonfinite_tokens(&line))
            .map_err(|source| DhmdError::Json {
                path: path.to_owned(),
                line: i + 1,
                source,
            })?;
        let id = record.id;
        let sample = MultimodalSample {
            language: rows_to_sequence(&id, Modality::Language, record.language)?,
            visual: rows_to_sequence(&id, Modality::Visual, record.visual)?,
            acoustic: rows_to_sequence(&id, Modality::Acoustic, record.acoustic)?,
            label: record.label.unwrap_or(f32::NAN),
            class_id: record.label.map_or(0, |l| task.class_of(l)),
            sample_id: id,
        };
        sample.validate(task)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| DhmdError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, path: &Path, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| DhmdError::io(path, e))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_packed_split(path: &Path, task: TaskType) -> Result<Vec<MultimodalSample>> {
    let file = File::open(path).map_err(|e| DhmdError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|e| DhmdError::io(path, e))?;
    if &magic != PACKED_MAGIC {
        return Err(DhmdError::InvalidDataset(format!(
            "{} is not a packed DHMD1 file",
            path.display()
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut dims = [0usize; NUM_MODALITIES];
    for d in &mut dims {
        *d = read_u32(&mut r, path)? as usize;
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r, path)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|e| DhmdError::io(path, e))?;
        let id = String::from_utf8(id)
            .map_err(|_| DhmdError::InvalidDataset(format!("non-utf8 id in {}", path.display())))?;
        let label = read_f32s(&mut r, path, 1)?[0];
        let mut seqs = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let steps = read_u32(&mut r, path)? as usize;
            let dim = dims[m.index()];
            let data = read_f32s(&mut r, path, steps * dim)?;
            seqs.push(ModalitySequence {
                modality: m,
                steps,
                dim,
                data,
                mask: vec![true; steps],
            });
        }
        let [language, visual, acoustic]: [ModalitySequence; NUM_MODALITIES] =
            seqs.try_into().expect("three modalities");
        let sample = MultimodalSample {
            sample_id: id,
            language,
            visual,
            acoustic,
            label,
            class_id: if label.is_finite() { task.class_of(label) } else { 0 },
        };
        sample.validate(task)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn write_jsonl(w: &mut impl Write, samples: &[MultimodalSample]) -> std::io::Result<()> {
    for s in samples {
        let rec = JsonRecordOut {
            id: &s.sample_id,
            label: s.label,
            language: s.language.rows().collect(),
            visual: s.visual.rows().collect(),
            acoustic: s.acoustic.rows().collect(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn write_packed(
    w: &mut impl Write,
    dims: [usize; NUM_MODALITIES],
    samples: &[MultimodalSample],
) -> std::io::Result<()> {
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in samples {
        w.write_all(&(s.sample_id.len() as u32).to_le_bytes())?;
        w.write_all(s.sample_id.as_bytes())?;
        w.write_all(&s.label.to_le_bytes())?;
        for m in Modality::ALL {
            let seq = s.modality(m);
            w.write_all(&(seq.steps as u32).to_le_bytes())?;
            for v in &seq.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Writes a dataset directory. Every file is written to a temporary sibling
/// first and renamed into place, so a failure leaves no partial file behind.
pub fn save_dataset(
    dir: &Path,
    task: TaskType,
    format: DatasetFormat,
    splits: &[(Split, &[MultimodalSample])],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| DhmdError::io(dir, e))?;
    let dims = splits
        .iter()
        .find_map(|(_, s)| s.first().map(MultimodalSample::dims))
        .ok_or_else(|| DhmdError::InvalidDataset("no samples to save".into()))?;
    let mut manifest = Manifest::new(dims, task, format);
    for &(split, samples) in splits {
        for s in samples {
            if s.dims() != dims {
                return Err(DhmdError::InvalidSample {
                    sample_id: s.sample_id.clone(),
                    reason: "feature dims differ within dataset".into(),
                });
            }
        }
        let path = split_path(dir, split, format);
        write_atomic(&path, |w| match format {
            DatasetFormat::Jsonl => write_jsonl(w, samples),
            DatasetFormat::Packed => write_packed(w, dims, samples),
        })?;
        manifest.splits.insert(split, samples.len());
    }
    let manifest_path = dir.join("manifest.json");
    write_atomic(&manifest_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        w.write_all(b"\n")
    })?;
    Ok(manifest)
}

pub(crate) fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| DhmdError::io(parent, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(|e| DhmdError::io(path, e))?;
        w.flush().map_err(|e| DhmdError::io(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| DhmdError::io(path, e.error))?;
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub(crate) fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |w| w.write_all(bytes))
}
