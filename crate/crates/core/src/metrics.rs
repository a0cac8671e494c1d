//! JSONL metric streams: one JSON object per line, no timestamps, so a rerun
//! with the same seed produces a byte-identical file.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// One pretraining metric record (one JSONL line).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMetric {
    /// Optimizer step index (0-based).
    pub step: usize,
    /// Samples consumed after this step.
    pub samples_seen: usize,
    /// Input resolution used for this step.
    pub resolution: usize,
    /// Contrastive loss.
    pub clip_loss: f64,
    /// Mask-regularization loss (0 when the branch is disabled).
    pub mask_loss: f64,
    /// Current (exponentiated) logit scale.
    pub logit_scale: f64,
    /// Learning rate applied at this step.
    pub lr: f64,
}

/// Append-only JSONL writer. Lines flush on every write so partial runs leave
/// readable streams.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (truncates) the metric file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = BufWriter::new(File::create(path)?);
        Ok(Self { path: path.to_path_buf(), file })
    }

    /// Path of the underlying file.
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Serializes `record` as one JSON line.
    pub fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads a JSONL file into typed records.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a JSONL file as raw text lines (for byte-level comparisons).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}
