//! Model assembly, training, evaluation and run-directory exports.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod probe;
pub mod train;

use std::path::Path;

pub use config::{DataSource, Precision, RunConfig, Switches};
pub use export::{build_report, write_run, RunReport};
pub use metrics::Metrics;
pub use model::{DataShape, DhmdModel, ForwardOutput, LossValues, LossWeights, Losses};
pub use train::{load_data, LoadedData, Session};

use crate::Result;

/// Trains from scratch and returns the finished session with its report.
pub fn train(config: RunConfig) -> Result<(Session, RunReport)> {
    let data = load_data(&config.data)?;
    let mut session = Session::new(config, data)?;
    session.fit()?;
    let report = build_report(&session)?;
    Ok((session, report))
}

/// Trains and writes the run directory to `config.out`.
pub fn train_to_dir(config: RunConfig) -> Result<RunReport> {
    let out = config.out.clone();
    if out.exists() {
        return Err(crate::DhmdError::Config(format!("output directory {} already exists", out.display())));
    }
    let (session, report) = train(config)?;
    write_run(&session, &report, &out, false)?;
    Ok(report)
}

/// Continues the run stored in `run` up to `epochs` total epochs and rewrites it.
pub fn resume(run: &Path, epochs: Option<usize>) -> Result<RunReport> {
    let ck = checkpoint::Checkpoint::load(&run.join("last.bin"))?;
    let config: RunConfig = export::read_config(run)?;
    let data = load_data(&config.data)?;
    let mut session = Session::from_checkpoint(&ck, data)?;
    if let Some(e) = epochs {
        session.config.epochs = e;
    }
    session.fit()?;
    let report = build_report(&session)?;
    write_run(&session, &report, run, true)?;
    Ok(report)
}
