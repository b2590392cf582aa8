//! Run configuration, ablation switches and the flat `key = value` config format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SyntheticTaskSpec, NUM_MODALITIES};
use crate::nn::Activation;
use crate::{DhmdError, Result};

/// Which components are enabled. Cross-modal attention consumes the
/// heterogeneous features and therefore requires decoupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub fd: bool,
    pub ca: bool,
    pub gd: bool,
    pub dm: bool,
}

impl Switches {
    pub const FULL: Switches = Switches {
        fd: true,
        ca: true,
        gd: true,
        dm: true,
    };
    pub const NONE: Switches = Switches {
        fd: false,
        ca: false,
        gd: false,
        dm: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.ca && !self.fd {
            return Err(DhmdError::Config(
                "CA needs heterogeneous features; enable FD or drop CA".into(),
            ));
        }
        Ok(())
    }

    /// True when a heterogeneous path exists.
    pub fn has_heterogeneous(&self) -> bool {
        self.fd
    }
}

impl Default for Switches {
    fn default() -> Self {
        Switches::FULL
    }
}

impl fmt::Display for Switches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.fd, "FD"), (self.ca, "CA"), (self.gd, "GD"), (self.dm, "DM")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Parses the list of enabled components, e.g. `FD,CA,GD`, `all` or `none`.
impl FromStr for Switches {
    type Err = DhmdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => return Ok(Switches::NONE),
            "all" | "full" => return Ok(Switches::FULL),
            _ => {}
        }
        let mut out = Switches::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "FD" => out.fd = true,
                "CA" => out.ca = true,
                "GD" => out.gd = true,
                "DM" => out.dm = true,
                other => {
                    return Err(DhmdError::Config(format!(
                        "unknown component {other:?}; expected FD, CA, GD or DM"
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticTaskSpec),
    /// Directory holding `manifest.json` and the split files.
    Dir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the decoupling loss.
    pub lambda_dec: f64,
    /// Weight of the graph distillation loss (both spaces).
    pub lambda_dtl: f64,
    /// Weight of the dictionary contrastive loss (both spaces).
    pub lambda_dic: f64,
    /// Weight of the margin and orthogonality terms inside the decoupling loss.
    pub gamma: f64,
    /// Triplet margin, shared by the decoupling and dictionary losses.
    pub margin: f64,
    /// Shared channel width after the shallow convolutions.
    pub width: usize,
    pub kernels: [usize; NUM_MODALITIES],
    pub activation: Activation,
    pub dict_size: usize,
    pub gd_hidden: usize,
    pub ca_dim: usize,
    pub ca_heads: usize,
    pub ca_layers: usize,
    pub ca_ff: usize,
    /// Positional embedding length; 0 means the longest sequence in the training data.
    pub max_len: usize,
    pub switches: Switches,
    pub precision: Precision,
    pub edge_decay: f64,
    /// Number of top dictionary elements listed per activation row.
    pub top_k: usize,
    /// Exports attention maps for this many test samples.
    pub attention_samples: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic(SyntheticTaskSpec::default()),
            seed: 0,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda_dec: 0.1,
            lambda_dtl: 0.05,
            lambda_dic: 0.1,
            gamma: 0.1,
            margin: 0.1,
            width: 32,
            kernels: [5, 5, 5],
            activation: Activation::Tanh,
            dict_size: 512,
            gd_hidden: 32,
            ca_dim: 32,
            ca_heads: 8,
            ca_layers: 2,
            ca_ff: 64,
            max_len: 0,
            switches: Switches::FULL,
            precision: Precision::F32,
            edge_decay: 0.9,
            top_k: 5,
            attention_samples: 2,
            out: PathBuf::from("runs/dhmd"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DhmdError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; NUM_MODALITIES]> {
    let v = parse_list::<T>(key, value)?;
    v.try_into()
        .map_err(|_| DhmdError::Config(format!("{key} needs exactly {NUM_MODALITIES} comma-separated values")))
}

fn parse_ranges(key: &str, value: &str) -> Result<[(usize, usize); NUM_MODALITIES]> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let (lo, hi) = part
            .split_once('-')
            .ok_or_else(|| DhmdError::Config(format!("{key} entries look like min-max, got {part:?}")))?;
        out.push((parse(key, lo)?, parse(key, hi)?));
    }
    out.try_into()
        .map_err(|_| DhmdError::Config(format!("{key} needs exactly {NUM_MODALITIES} ranges")))
}

impl RunConfig {
    /// Mutable access to the synthetic spec, switching the data source to synthetic if needed.
    pub fn synthetic_mut(&mut self) -> &mut SyntheticTaskSpec {
        if !matches!(self.data, DataSource::Synthetic(_)) {
            self.data = DataSource::Synthetic(SyntheticTaskSpec::default());
        }
        match &mut self.data {
            DataSource::Synthetic(s) => s,
            DataSource::Dir(_) => unreachable!("replaced above"),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "data" => {
                self.data = if value == "synthetic" {
                    DataSource::Synthetic(SyntheticTaskSpec::default())
                } else {
                    DataSource::Dir(PathBuf::from(value))
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lambda_dec" => self.lambda_dec = parse(key, value)?,
            "lambda_dtl" => self.lambda_dtl = parse(key, value)?,
            "lambda_dic" => self.lambda_dic = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "kernels" => self.kernels = parse_triple(key, value)?,
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "linear" => Activation::Linear,
                    _ => return Err(DhmdError::Config(format!("unknown activation {value:?}"))),
                }
            }
            "dict_size" => self.dict_size = parse(key, value)?,
            "gd_hidden" => self.gd_hidden = parse(key, value)?,
            "ca_dim" => self.ca_dim = parse(key, value)?,
            "ca_heads" => self.ca_heads = parse(key, value)?,
            "ca_layers" => self.ca_layers = parse(key, value)?,
            "ca_ff" => self.ca_ff = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "ablation" => self.switches = value.parse()?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(DhmdError::Config(format!("unknown precision {value:?}"))),
                }
            }
            "edge_decay" => self.edge_decay = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "attention_samples" => self.attention_samples = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "synth.classes" => self.synthetic_mut().num_classes = parse(key, value)?,
            "synth.train_per_class" => self.synthetic_mut().samples_per_class = parse(key, value)?,
            "synth.eval_per_class" => self.synthetic_mut().eval_samples_per_class = parse(key, value)?,
            "synth.lengths" => self.synthetic_mut().seq_len = parse_ranges(key, value)?,
            "synth.dims" => self.synthetic_mut().feature_dims = parse_triple(key, value)?,
            "synth.strengths" => self.synthetic_mut().signal_strength = parse_triple(key, value)?,
            "synth.noise" => self.synthetic_mut().noise_sigma = parse(key, value)?,
            "synth.sparsity" => self.synthetic_mut().cue_sparsity = parse(key, value)?,
            "synth.seed" => self.synthetic_mut().seed = parse(key, value)?,
            _ => return Err(DhmdError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DhmdError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses the flat format: one `key = value` per line, `#` starts a comment.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DhmdError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| DhmdError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DhmdError::io(path, e))?;
        Self::from_flat_str(&text)
    }

    /// Rejects configurations that cannot be built or trained.
    pub fn validate(&self) -> Result<()> {
        self.switches.validate()?;
        if self.batch_size == 0 {
            return Err(DhmdError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DhmdError::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("lambda_dec", self.lambda_dec),
            ("lambda_dtl", self.lambda_dtl),
            ("lambda_dic", self.lambda_dic),
            ("gamma", self.gamma),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DhmdError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.width == 0 || self.gd_hidden == 0 {
            return Err(DhmdError::Config("width and gd_hidden must be positive".into()));
        }
        if self.switches.dm && self.dict_size == 0 {
            return Err(DhmdError::Config("DM enabled with dict_size = 0".into()));
        }
        if self.switches.ca && (self.ca_dim == 0 || self.ca_heads == 0 || !self.ca_dim.is_multiple_of(self.ca_heads)) {
            return Err(DhmdError::Config(format!(
                "ca_dim {} must be a positive multiple of ca_heads {}",
                self.ca_dim, self.ca_heads
            )));
        }
        if self.switches.ca && (self.ca_layers == 0 || self.ca_ff == 0) {
            return Err(DhmdError::Config("ca_layers and ca_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.edge_decay) {
            return Err(DhmdError::Config("edge_decay must lie in [0, 1)".into()));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(DhmdError::Config(format!("kernels {:?} must be odd", self.kernels)));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }
}
