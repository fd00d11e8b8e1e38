use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainLog {
    /// Appends a record; returns true when it sets a new best validation
    /// loss (ties keep the earlier epoch).
    pub fn push(&mut self, record: EpochRecord) -> bool {
        let improved = match (record.val_loss, self.best_val_loss) {
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(b)) => v < b,
            (None, _) => false,
        };
        if improved {
            self.best_epoch = Some(record.epoch);
            self.best_val_loss = record.val_loss;
        }
        self.records.push(record);
        improved
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            log.push(serde_json::from_str(line)?);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, val: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0,
            val_loss: val,
            wall_time: 0.0,
        }
    }

    #[test]
    fn best_is_minimum() {
        let mut log = TrainLog::default();
        for (e, v) in [0.5, 0.3, 0.4, 0.3, 0.35].into_iter().enumerate() {
            log.push(rec(e + 1, Some(v)));
        }
        assert_eq!(log.best_epoch, Some(2));
        assert_eq!(log.best_val_loss, Some(0.3));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = TrainLog::default();
        log.push(rec(1, None));
        log.push(rec(2, Some(0.2)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        log.write(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(TrainLog::read(&p).unwrap(), log);
    }
}
