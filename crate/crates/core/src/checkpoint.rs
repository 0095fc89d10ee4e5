//! Checkpoint serialization: the expert bank with its dimensions, the
//! training class counts, and the config that produced it, as one JSON
//! document. `f64` values survive the round trip bit for bit.

use crate::config::TrainConfig;
use crate::expert::ExpertBank;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "come/checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unknown checkpoint format {0:?}")]
    Format(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Checkpoint {
    pub format: String,
    pub bank: ExpertBank,
    /// Training-split class counts; priors and group boundaries derive from
    /// these at evaluation time.
    pub train_counts: Vec<usize>,
    pub config: TrainConfig,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn new(
        bank: ExpertBank,
        train_counts: Vec<usize>,
        config: TrainConfig,
        best_epoch: usize,
    ) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            bank,
            train_counts,
            config,
            best_epoch,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let r = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.format != FORMAT_TAG {
            return Err(CheckpointError::Format(ckpt.format));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::NetDims;

    #[test]
    fn round_trip_is_bit_exact() {
        let dims = NetDims {
            input: 3,
            hidden: 8,
            z: 8,
            classes: 4,
            layers: 2,
        };
        let bank = ExpertBank::init(2, dims, 77);
        let ckpt = Checkpoint::new(bank, vec![9, 4, 2, 1], TrainConfig::default(), 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.bank, back.bank, "parameters must round-trip exactly");
        assert_eq!(ckpt.train_counts, back.train_counts);
        assert_eq!(ckpt.best_epoch, back.best_epoch);
    }

    #[test]
    fn rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"format":"other","bank":{"dims":{"input":1,"hidden":1,"z":1,"classes":1,"layers":1},"experts":[]},"train-counts":[],"config":{},"best-epoch":0}"#,
        )
        .unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
