//! Run checkpoints: per-stage counters plus enough state to resume a run
//! into byte-identical output files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::registry::ViolationHistory;

use super::PipelineError;

pub const CHECKPOINT_VERSION: &str = "sdsd-checkpoint.v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Setups fully processed (flushed to the output files).
    pub generated: u64,
    /// Records whose generation could not be parsed (terminal `truncated`).
    pub parse_failed: u64,
    /// Records excluded from critique by the anomaly filter.
    pub dropped_anomalous: u64,
    /// Records that terminated themselves with `DONE`.
    pub done_terminal: u64,
    /// Records that ran out without a `DONE` marker.
    pub no_done_terminal: u64,
    /// Critiques that confirmed a violation.
    pub confirmed: u64,
    /// Preference pairs written to the revisions split.
    pub pairs_emitted: u64,
}

impl Counters {
    /// Every processed setup lands in exactly one terminal bucket.
    pub fn conserved(&self) -> bool {
        self.generated
            == self.parse_failed + self.dropped_anomalous + self.done_terminal + self.no_done_terminal
    }

    pub fn confirmed_fraction(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.confirmed as f64 / self.generated as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub schema_version: String,
    pub run_id: String,
    pub master_seed: u64,
    pub target_count: usize,
    /// Length of the contiguous completed prefix; records are flushed in
    /// setup order, so this fully describes what is already on disk.
    pub completed: usize,
    /// Seeds of the completed setups, in order.
    pub completed_seeds: Vec<u64>,
    pub counters: Counters,
    /// Violation history accumulated from this run's emitted pairs.
    pub history: ViolationHistory,
}

impl CheckpointState {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let state: CheckpointState =
            serde_json::from_str(&raw).map_err(|e| PipelineError::Checkpoint {
                reason: format!("{}: {e}", path.display()),
            })?;
        if state.schema_version != CHECKPOINT_VERSION {
            return Err(PipelineError::Checkpoint {
                reason: format!(
                    "unsupported checkpoint version {:?} (expected {CHECKPOINT_VERSION:?})",
                    state.schema_version
                ),
            });
        }
        if state.completed_seeds.len() != state.completed {
            return Err(PipelineError::Checkpoint {
                reason: "completed seed list does not match completed count".into(),
            });
        }
        Ok(state)
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let body = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        let io_err = |source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::write(&tmp, body).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_conservation() {
        let c = Counters {
            generated: 10,
            parse_failed: 1,
            dropped_anomalous: 2,
            done_terminal: 5,
            no_done_terminal: 2,
            confirmed: 3,
            pairs_emitted: 3,
        };
        assert!(c.conserved());
        assert_eq!(c.confirmed_fraction(), 0.3);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let state = CheckpointState {
            schema_version: CHECKPOINT_VERSION.into(),
            run_id: "demo".into(),
            master_seed: 42,
            target_count: 10,
            completed: 2,
            completed_seeds: vec![11, 22],
            counters: Counters::default(),
            history: ViolationHistory::new(),
        };
        state.save(&path).unwrap();
        let loaded = CheckpointState::load(&path).unwrap();
        assert_eq!(loaded.run_id, "demo");
        assert_eq!(loaded.completed_seeds, vec![11, 22]);
    }

    #[test]
    fn inconsistent_seed_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let mut state = CheckpointState {
            schema_version: CHECKPOINT_VERSION.into(),
            run_id: "demo".into(),
            master_seed: 42,
            target_count: 10,
            completed: 3,
            completed_seeds: vec![11],
            counters: Counters::default(),
            history: ViolationHistory::new(),
        };
        state.save(&path).unwrap();
        assert!(CheckpointState::load(&path).is_err());
        state.completed = 1;
        state.save(&path).unwrap();
        assert!(CheckpointState::load(&path).is_ok());
    }
}
