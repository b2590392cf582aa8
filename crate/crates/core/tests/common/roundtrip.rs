//! Dataset format and checkpoint resumption round trips.

use dhmd::datamodel::{generate_synthetic, load_dataset, save_dataset, DatasetFormat, Split};
use dhmd::pipeline::checkpoint::Checkpoint;
use dhmd::pipeline::{load_data, Precision, Session};

use super::*;

/// Saves one synthetic dataset in both formats and compares what loads back.
pub fn formats_agree(classes: usize) -> std::result::Result<String, String> {
    let ds = generate_synthetic(&toy_spec(classes, 3)).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let splits = [(Split::Train, &ds.train[..]), (Split::Valid, &ds.valid[..]), (Split::Test, &ds.test[..])];
    let jsonl = tmp.path().join("jsonl");
    let packed = tmp.path().join("packed");
    save_dataset(&jsonl, ds.task(), DatasetFormat::Jsonl, &splits).map_err(|e| e.to_string())?;
    save_dataset(&packed, ds.task(), DatasetFormat::Packed, &splits).map_err(|e| e.to_string())?;
    let mut count = 0;
    for (split, original) in splits {
        let a = load_dataset(&jsonl, split).map_err(|e| e.to_string())?;
        let b = load_dataset(&packed, split).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{split}: JSON-lines and packed loaders disagree"));
        }
        if a != original {
            return Err(format!("{split}: loaded samples differ from the saved ones"));
        }
        count += a.len();
    }
    Ok(format!("{count} samples identical across formats"))
}

/// Trains one epoch, checkpoints through a file, and compares the next
/// optimizer steps of the resumed and the uninterrupted session.
pub fn resume_matches(steps: usize) -> std::result::Result<String, String> {
    let mut cfg = toy_config(3, 11);
    cfg.precision = Precision::F32;
    cfg.batch_size = 4;
    let data = load_data(&cfg.data).map_err(|e| e.to_string())?;
    let mut original = Session::new(cfg, data.clone()).map_err(|e| e.to_string())?;
    original.run_epoch().map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("last.bin");
    original.last_checkpoint().and_then(|c| c.save(&path)).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Session::from_checkpoint(&ck, data).map_err(|e| e.to_string())?;

    let batches = original.epoch_batches(2).map_err(|e| e.to_string())?;
    if batches != resumed.epoch_batches(2).map_err(|e| e.to_string())? {
        return Err("resumed session shuffles differently".into());
    }
    for (step, batch) in batches.iter().take(steps).enumerate() {
        let a = original.train_step(batch, 2, step).map_err(|e| e.to_string())?;
        let b = resumed.train_step(batch, 2, step).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("step {step}: loss {} after resume, {} uninterrupted", b.total, a.total));
        }
    }
    Ok(format!("{steps} post-resume steps bit-identical"))
}
