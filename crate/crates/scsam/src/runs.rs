//! Training run artifacts: checkpoints and JSON-lines logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use scsam_core::engine::{Checkpoint, EpochRecord, Model, StepRecord, TrainObserver};

use crate::error::{read, write_atomic, CliError, Result};

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const STEPS_NAME: &str = "steps.jsonl";
pub const EPOCHS_NAME: &str = "epochs.jsonl";

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Checkpoint::from_bytes(&read(path)?).map_err(|e| match e {
        scsam_core::Error::Format(m) => scsam_core::Error::Format(format!("{}: {m}", path.display())).into(),
        scsam_core::Error::Corrupt(m) => scsam_core::Error::Corrupt(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| scsam_core::Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

struct Jsonl {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Jsonl {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).expect("records serialise");
        self.out.write_all(b"\n").map_err(|e| CliError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Writes one record per step and per epoch, and keeps the most recent
/// steps for failure reports. Write errors are held until [`finish`].
///
/// [`finish`]: RunLogger::finish
pub struct RunLogger {
    steps: Jsonl,
    epochs: Jsonl,
    recent: Vec<StepRecord>,
    error: Option<CliError>,
}

impl RunLogger {
    pub fn create(dir: &Path) -> Result<Self> {
        crate::error::create_dir(dir)?;
        Ok(Self {
            steps: Jsonl::create(dir.join(STEPS_NAME))?,
            epochs: Jsonl::create(dir.join(EPOCHS_NAME))?,
            recent: Vec::new(),
            error: None,
        })
    }

    pub fn recent_steps(&self) -> &[StepRecord] {
        &self.recent
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.steps.flush()?;
        self.epochs.flush()
    }

    fn keep(&mut self, r: Result<()>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl TrainObserver for RunLogger {
    fn on_step(&mut self, record: &StepRecord) {
        let r = self.steps.push(record);
        self.keep(r);
        if self.recent.len() == 8 {
            self.recent.remove(0);
        }
        self.recent.push(record.clone());
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        let r = self.epochs.push(record).and_then(|_| self.epochs.flush());
        self.keep(r);
    }

    fn on_eval(&mut self, _epoch: u64, _model: &Model) {}
}
