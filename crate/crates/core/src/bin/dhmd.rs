use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dhmd::datamodel::{generate_synthetic, save_dataset, DatasetFormat, Split};
use dhmd::pipeline::checkpoint::Checkpoint;
use dhmd::pipeline::export::{read_activations, read_attention, read_edges, render_jsonl};
use dhmd::pipeline::{load_data, resume, train_to_dir, RunConfig, Session};
use dhmd::{DhmdError, Result};

#[derive(Parser)]
#[command(name = "dhmd", version, about = "Decoupled hierarchical multimodal distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enabled components, e.g. `FD,CA,GD,DM` or `none`.
    #[arg(long)]
    ablation: Option<String>,
    /// Signal strengths of the synthetic task (L,V,A).
    #[arg(long, value_name = "L,V,A")]
    synth_strengths: Option<String>,
    /// Dataset directory with `manifest.json`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.set("data", &d.to_string_lossy())?;
        }
        if let Some(s) = &self.synth_strengths {
            cfg.set("synth.strengths", s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = &self.ablation {
            cfg.set("ablation", a)?;
        }
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an existing run directory instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs when resuming.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a split and print the metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dataset directory; defaults to the data recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate the synthetic task and save it as a dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
    /// Print the per-epoch edge matrices of a run.
    ExportEdges {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the dictionary activation tables of a run.
    ExportActivations {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the exported attention maps of a run.
    ExportAttention {
        #[arg(long)]
        run: PathBuf,
    },
    /// Fit linear probes on a checkpoint's homogeneous features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| DhmdError::InvalidDataset(e.to_string()))
}

fn session_from(checkpoint: &Path, data: Option<&Path>) -> Result<Session> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg: RunConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(|e| DhmdError::Checkpoint {
        path: checkpoint.to_path_buf(),
        reason: format!("metadata: {e}"),
    })?;
    if let Some(d) = data {
        cfg.set("data", &d.to_string_lossy())?;
    }
    let loaded = load_data(&cfg.data)?;
    Session::from_checkpoint(&ck, loaded)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, resume: from, epochs } => {
            let report = match from {
                Some(run) => resume(&run, epochs)?,
                None => {
                    let mut config = cfg.resolve()?;
                    if let Some(o) = out {
                        config.out = o;
                    }
                    if let Some(e) = epochs {
                        config.epochs = e;
                    }
                    train_to_dir(config)?
                }
            };
            println!("{}", json(&report)?);
        }
        Command::Eval { checkpoint, split, data } => {
            let session = session_from(&checkpoint, data.as_deref())?;
            let eval = session.evaluate(session.data.split(split))?;
            println!("{}", json(&eval.metrics)?);
        }
        Command::Synth { cfg, out, format } => {
            let config = cfg.resolve()?;
            let spec = match config.data {
                dhmd::pipeline::DataSource::Synthetic(s) => s,
                dhmd::pipeline::DataSource::Dir(_) => {
                    return Err(DhmdError::Config("synth needs a synthetic data source".into()))
                }
            };
            let format = match format.as_str() {
                "jsonl" => DatasetFormat::Jsonl,
                "packed" => DatasetFormat::Packed,
                other => return Err(DhmdError::Config(format!("unknown format {other:?}"))),
            };
            let ds = generate_synthetic(&spec)?;
            let manifest = save_dataset(
                &out,
                ds.task(),
                format,
                &[(Split::Train, &ds.train[..]), (Split::Valid, &ds.valid[..]), (Split::Test, &ds.test[..])],
            )?;
            println!("{}", json(&manifest)?);
        }
        Command::ExportEdges { run } => print!("{}", render_jsonl(&read_edges(&run)?)?),
        Command::ExportActivations { run } => print!("{}", render_jsonl(&read_activations(&run)?)?),
        Command::ExportAttention { run } => print!("{}", render_jsonl(&read_attention(&run)?)?),
        Command::Probe { checkpoint, data } => {
            let session = session_from(&checkpoint, data.as_deref())?;
            println!("{}", json(&session.probe()?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
