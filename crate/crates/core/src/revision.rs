//! Revision step: parse the reviser's rewrite of the violating utterance and
//! assemble (context, chosen, rejected) preference pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::DialogueRecord;
use crate::registry::PrincipleId;
use crate::transcript::{AliasTable, Role, Turn};
use crate::CritiqueOutcome;

const REVISION_HEADER: &str = "REVISED UTTERANCE:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionDefect {
    MissingHeader,
    Empty,
    ContainsRoleMarker,
    ContainsDone,
    IdenticalToOriginal,
}

/// Parsed reviser output plus validity verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub revised_text: String,
    pub raw: String,
    pub defects: Vec<RevisionDefect>,
}

impl Revision {
    pub fn is_valid(&self) -> bool {
        self.defects.is_empty()
    }
}

/// Extract the rewritten utterance and flag every validity defect: it must
/// be non-empty, free of role markers and `DONE` lines, and differ from the
/// original violating utterance.
pub fn parse_revision(raw: &str, original: &str) -> Revision {
    let mut defects = Vec::new();
    let revised_text = match raw.find(REVISION_HEADER) {
        None => {
            defects.push(RevisionDefect::MissingHeader);
            String::new()
        }
        Some(at) => strip_trailing_done(raw[at + REVISION_HEADER.len()..].trim()).to_string(),
    };

    if !defects.contains(&RevisionDefect::MissingHeader) {
        if revised_text.is_empty() {
            defects.push(RevisionDefect::Empty);
        } else {
            // Reuse the parser's marker set so "no role markers" means
            // exactly what the parser would re-split on.
            let aliases = AliasTable::default();
            if revised_text.lines().any(|l| l.trim() == "DONE") {
                defects.push(RevisionDefect::ContainsDone);
            }
            if revised_text.lines().any(|l| aliases.matches_marker(l)) {
                defects.push(RevisionDefect::ContainsRoleMarker);
            }
            if revised_text == original {
                defects.push(RevisionDefect::IdenticalToOriginal);
            }
        }
    }

    Revision {
        revised_text,
        raw: raw.to_string(),
        defects,
    }
}

/// Remove one trailing `DONE` standing on its own line; inline occurrences
/// are content.
fn strip_trailing_done(seg: &str) -> &str {
    if seg == "DONE" {
        return "";
    }
    match seg.rfind('\n') {
        Some(pos) if seg[pos + 1..].trim() == "DONE" => seg[..pos].trim_end(),
        _ => seg,
    }
}

/// Provenance carried on every emitted pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub generator_model: String,
    pub critic_model: String,
    pub reviser_model: String,
    pub seed: u64,
}

/// One row of the revisions split: the conversation context, the original
/// violating utterance (rejected) and its revision (chosen).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Turns strictly before the violating agent turn; ends with a user turn.
    pub context: Vec<Turn>,
    pub chosen: String,
    pub rejected: String,
    pub violated_principles: Vec<PrincipleId>,
    pub provenance: PairProvenance,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairError {
    #[error("critique outcome is not confirmed")]
    NotConfirmed,
    #[error("revision is invalid: {0:?}")]
    InvalidRevision(Vec<RevisionDefect>),
    #[error("dialogue does not end with an agent turn")]
    NoViolatingTurn,
    #[error("no user turn precedes the violation; pair is unbuildable")]
    Unpairable,
}

/// Assemble a preference pair from a confirmed critique and a valid
/// revision. The source record is never mutated.
pub fn build_preference_pair(
    record: &DialogueRecord,
    revision: &Revision,
    outcome: &CritiqueOutcome,
    provenance: PairProvenance,
) -> Result<PreferencePair, PairError> {
    if outcome.status != crate::CritiqueStatus::Confirmed || outcome.violated_ids.is_empty() {
        return Err(PairError::NotConfirmed);
    }
    if !revision.is_valid() {
        return Err(PairError::InvalidRevision(revision.defects.clone()));
    }
    let Some((last, context)) = record.turns.split_last() else {
        return Err(PairError::NoViolatingTurn);
    };
    if last.role != Role::Agent {
        return Err(PairError::NoViolatingTurn);
    }
    if context.last().map(|t| t.role) != Some(Role::User) {
        return Err(PairError::Unpairable);
    }
    Ok(PreferencePair {
        context: context.to_vec(),
        chosen: revision.revised_text.clone(),
        rejected: last.text.clone(),
        violated_principles: outcome.violated_ids.clone(),
        provenance,
    })
}
