//! On-disk schemas for the dialogues and revisions splits.
//!
//! Both splits are newline-delimited JSON, UTF-8, one complete record per
//! line, with a mandatory `schema_version` tag. The appender validates every
//! row before writing and serializes whole lines under a lock, so concurrent
//! writers can never tear a record. Deduplication keys on the content hash,
//! which covers the setup and messages but not provenance.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::PrincipleId;
use crate::transcript::Role;

pub const SCHEMA_VERSION: &str = "sdsd.v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRow {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipleRef {
    pub id: PrincipleId,
    pub text: String,
}

/// One row of the dialogues split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRow {
    pub schema_version: String,
    /// Content hash over (setup, messages); the deduplication key.
    pub id: String,
    pub domain: String,
    pub topic: String,
    pub subtopic: String,
    pub goal: String,
    pub principles: Vec<PrincipleRef>,
    pub plan: Vec<String>,
    pub messages: Vec<MessageRow>,
    pub terminal: String,
    pub model: String,
    pub seed: u64,
    pub anomalies: Vec<String>,
    /// True when the run's filter policy excluded this record from critique.
    pub dropped_anomalous: bool,
}

/// One row of the revisions split. `id` is the content hash of the dialogue
/// the pair was mined from, which makes the subset relation checkable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionRow {
    pub schema_version: String,
    pub id: String,
    pub context: Vec<MessageRow>,
    pub chosen: String,
    pub rejected: String,
    pub violated: Vec<PrincipleRef>,
    pub critique: String,
    pub critic_model: String,
    pub reviser_model: String,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema violation at {field}: {reason}")]
    Schema { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: invalid JSON: {reason}")]
    BadLine {
        path: String,
        line: usize,
        reason: String,
    },
}

fn schema_err(field: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Stable digest over the dedup-relevant fields. Provenance (model, seed,
/// attempt counts) is deliberately excluded so reruns dedupe.
pub fn content_hash(
    domain: &str,
    topic: &str,
    subtopic: &str,
    principle_ids: &[PrincipleId],
    goal: &str,
    messages: &[MessageRow],
) -> String {
    fn feed(hasher: &mut Sha256, part: &str) {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let mut hasher = Sha256::new();
    feed(&mut hasher, domain);
    feed(&mut hasher, topic);
    feed(&mut hasher, subtopic);
    feed(&mut hasher, goal);
    for id in principle_ids {
        hasher.update(id.to_le_bytes());
    }
    for m in messages {
        feed(
            &mut hasher,
            match m.role {
                Role::User => "user",
                Role::Agent => "agent",
            },
        );
        feed(&mut hasher, &m.content);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// A row that knows how to validate itself before hitting disk.
pub trait SplitRow: Serialize {
    fn validate(&self) -> Result<(), DatasetError>;
    fn row_id(&self) -> &str;
}

impl SplitRow for DialogueRow {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(schema_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION:?}, found {:?}", self.schema_version),
            ));
        }
        if self.id.is_empty() {
            return Err(schema_err("id", "empty"));
        }
        if self.principles.is_empty() {
            return Err(schema_err("principles", "empty"));
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.content.is_empty() {
                return Err(schema_err(&format!("messages[{i}].content"), "empty"));
            }
        }
        // Alternation is required unless the row itself documents the
        // violation it carries.
        if !self.anomalies.iter().any(|a| a == "non_alternating") {
            for (i, pair) in self.messages.windows(2).enumerate() {
                if pair[0].role == pair[1].role {
                    return Err(schema_err(
                        &format!("messages[{}].role", i + 1),
                        "adjacent messages share a role",
                    ));
                }
            }
            if let Some(first) = self.messages.first() {
                if first.role != Role::User {
                    return Err(schema_err("messages[0].role", "must be user"));
                }
            }
        }
        match self.terminal.as_str() {
            "done" | "no_done" | "truncated" => Ok(()),
            other => Err(schema_err("terminal", format!("unknown value {other:?}"))),
        }
    }

    fn row_id(&self) -> &str {
        &self.id
    }
}

impl SplitRow for RevisionRow {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(schema_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION:?}, found {:?}", self.schema_version),
            ));
        }
        if self.id.is_empty() {
            return Err(schema_err("id", "empty"));
        }
        if self.chosen == self.rejected {
            return Err(schema_err("chosen", "chosen equals rejected"));
        }
        if self.chosen.is_empty() {
            return Err(schema_err("chosen", "empty"));
        }
        match self.context.last() {
            None => return Err(schema_err("context", "empty")),
            Some(last) if last.role != Role::User => {
                return Err(schema_err("context", "must end with a user message"))
            }
            _ => {}
        }
        if self.violated.is_empty() {
            return Err(schema_err("violated", "empty"));
        }
        Ok(())
    }

    fn row_id(&self) -> &str {
        &self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FsyncPolicy {
    /// Flush to the OS after every row (default).
    #[default]
    Flush,
    /// Flush and fsync after every row.
    EveryRow,
}

/// Append-only JSONL writer. Shareable across threads; each append writes
/// exactly one complete line.
pub struct JsonlAppender {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
    fsync: FsyncPolicy,
}

impl JsonlAppender {
    pub fn create(path: &Path, fsync: FsyncPolicy) -> Result<Self, DatasetError> {
        Self::open_inner(path, fsync, false)
    }

    /// Open for append, keeping existing rows (resume path).
    pub fn append_to(path: &Path, fsync: FsyncPolicy) -> Result<Self, DatasetError> {
        Self::open_inner(path, fsync, true)
    }

    fn open_inner(path: &Path, fsync: FsyncPolicy, append: bool) -> Result<Self, DatasetError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|source| DatasetError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(BufWriter::new(file)),
            fsync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validate and append one row as a single newline-delimited record.
    pub fn append_row<R: SplitRow>(&self, row: &R) -> Result<(), DatasetError> {
        row.validate()?;
        let mut line = serde_json::to_string(row).map_err(|e| DatasetError::Io {
            path: self.path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        line.push('\n');
        let io_err = |source| DatasetError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let mut writer = self.writer.lock().expect("appender poisoned");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        if self.fsync == FsyncPolicy::EveryRow {
            writer.get_ref().sync_data().map_err(io_err)?;
        }
        Ok(())
    }
}

/// Read and deserialize a whole split.
pub fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DatasetError::BadLine {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSchema {
    Dialogues,
    Revisions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineVerdict {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: String,
    pub schema: SplitSchema,
    pub total: usize,
    pub ok: usize,
    pub errors: Vec<LineVerdict>,
    /// (line, id) of rows whose content hash was already seen.
    pub duplicates: Vec<(usize, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.duplicates.is_empty()
    }
}

/// Validate every line of a split: JSON decode, schema check, duplicate
/// content hashes. Pure over the file content.
pub fn validate_split(path: &Path, schema: SplitSchema) -> Result<ValidationReport, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = ValidationReport {
        path: path.display().to_string(),
        schema,
        total: 0,
        ok: 0,
        errors: Vec::new(),
        duplicates: Vec::new(),
    };
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        report.total += 1;
        let verdict: Result<String, String> = match schema {
            SplitSchema::Dialogues => serde_json::from_str::<DialogueRow>(&line)
                .map_err(|e| e.to_string())
                .and_then(|row| {
                    row.validate().map_err(|e| e.to_string())?;
                    Ok(row.id)
                }),
            SplitSchema::Revisions => serde_json::from_str::<RevisionRow>(&line)
                .map_err(|e| e.to_string())
                .and_then(|row| {
                    row.validate().map_err(|e| e.to_string())?;
                    Ok(row.id)
                }),
        };
        match verdict {
            Ok(id) => {
                report.ok += 1;
                if seen.insert(id.clone(), line_no).is_some() {
                    report.duplicates.push((line_no, id));
                }
            }
            Err(error) => report.errors.push(LineVerdict {
                line: line_no,
                error,
            }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetReport {
    /// Revision ids with no ancestor dialogue row.
    pub orphans: Vec<String>,
    pub revisions: usize,
    pub dialogues: usize,
}

impl SubsetReport {
    pub fn holds(&self) -> bool {
        self.orphans.is_empty()
    }
}

/// Check that every revision row points at a dialogue row (subset by
/// content hash).
pub fn check_subset(revisions: &Path, dialogues: &Path) -> Result<SubsetReport, DatasetError> {
    let dialogue_rows: Vec<DialogueRow> = read_rows(dialogues)?;
    let ids: std::collections::BTreeSet<&str> =
        dialogue_rows.iter().map(|r| r.id.as_str()).collect();
    let revision_rows: Vec<RevisionRow> = read_rows(revisions)?;
    let orphans = revision_rows
        .iter()
        .filter(|r| !ids.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    Ok(SubsetReport {
        orphans,
        revisions: revision_rows.len(),
        dialogues: dialogue_rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dialogue_row(id: &str) -> DialogueRow {
        DialogueRow {
            schema_version: SCHEMA_VERSION.to_string(),
            id: id.to_string(),
            domain: "Music".into(),
            topic: "Pop".into(),
            subtopic: "New album reviews".into(),
            goal: "Have the agent entertain the user.".into(),
            principles: vec![PrincipleRef {
                id: 96,
                text: "Do not provide misinformation.".into(),
            }],
            plan: vec!["step one".into()],
            messages: vec![
                MessageRow {
                    role: Role::User,
                    content: "hi".into(),
                },
                MessageRow {
                    role: Role::Agent,
                    content: "yo".into(),
                },
            ],
            terminal: "done".into(),
            model: "scripted".into(),
            seed: 1,
            anomalies: vec![],
            dropped_anomalous: false,
        }
    }

    fn revision_row(id: &str) -> RevisionRow {
        RevisionRow {
            schema_version: SCHEMA_VERSION.to_string(),
            id: id.to_string(),
            context: vec![MessageRow {
                role: Role::User,
                content: "hi".into(),
            }],
            chosen: "fixed".into(),
            rejected: "broken".into(),
            violated: vec![PrincipleRef {
                id: 96,
                text: "Do not provide misinformation.".into(),
            }],
            critique: "explains why".into(),
            critic_model: "critic".into(),
            reviser_model: "reviser".into(),
            seed: 1,
        }
    }

    #[test]
    fn append_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dialogues.jsonl");
        let appender = JsonlAppender::create(&path, FsyncPolicy::Flush).unwrap();
        let row = dialogue_row("abc");
        appender.append_row(&row).unwrap();
        let rows: Vec<DialogueRow> = read_rows(&path).unwrap();
        assert_eq!(rows, vec![row]);
    }

    #[test]
    fn chosen_equal_rejected_is_rejected_naming_the_field() {
        let mut row = revision_row("abc");
        row.rejected = row.chosen.clone();
        let err = row.validate().unwrap_err();
        assert!(err.to_string().contains("chosen"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut row = dialogue_row("abc");
        row.schema_version = "other".into();
        assert!(row.validate().is_err());
    }

    #[test]
    fn non_alternating_rows_need_the_anomaly_tag() {
        let mut row = dialogue_row("abc");
        row.messages.push(MessageRow {
            role: Role::Agent,
            content: "again".into(),
        });
        assert!(row.validate().is_err());
        row.anomalies.push("non_alternating".into());
        assert!(row.validate().is_ok());
    }

    #[test]
    fn validation_report_counts_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dialogues.jsonl");
        let appender = JsonlAppender::create(&path, FsyncPolicy::Flush).unwrap();
        for i in 0..10 {
            appender.append_row(&dialogue_row(&format!("row{i}"))).unwrap();
        }
        let report = validate_split(&path, SplitSchema::Dialogues).unwrap();
        assert_eq!((report.total, report.ok), (10, 10));
        assert!(report.is_clean());

        appender.append_row(&dialogue_row("row3")).unwrap();
        let report = validate_split(&path, SplitSchema::Dialogues).unwrap();
        assert_eq!(report.duplicates.len(), 1);
        assert_eq!(report.duplicates[0].1, "row3");
    }

    #[test]
    fn reports_are_pure_over_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let appender = JsonlAppender::create(&path, FsyncPolicy::Flush).unwrap();
        appender.append_row(&dialogue_row("x")).unwrap();
        let a = validate_split(&path, SplitSchema::Dialogues).unwrap();
        let b = validate_split(&path, SplitSchema::Dialogues).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn subset_check_finds_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let d_path = dir.path().join("d.jsonl");
        let r_path = dir.path().join("r.jsonl");
        let d = JsonlAppender::create(&d_path, FsyncPolicy::Flush).unwrap();
        d.append_row(&dialogue_row("a")).unwrap();
        d.append_row(&dialogue_row("b")).unwrap();
        let r = JsonlAppender::create(&r_path, FsyncPolicy::Flush).unwrap();
        r.append_row(&revision_row("a")).unwrap();
        assert!(check_subset(&r_path, &d_path).unwrap().holds());

        r.append_row(&revision_row("zzz")).unwrap();
        let report = check_subset(&r_path, &d_path).unwrap();
        assert_eq!(report.orphans, vec!["zzz".to_string()]);
    }

    #[test]
    fn content_hash_ignores_nothing_it_covers() {
        let m1 = vec![MessageRow {
            role: Role::User,
            content: "hi".into(),
        }];
        let h1 = content_hash("d", "t", "s", &[1, 2], "g", &m1);
        let h2 = content_hash("d", "t", "s", &[1, 2], "g", &m1);
        assert_eq!(h1, h2);
        let h3 = content_hash("d", "t", "s", &[2, 1], "g", &m1);
        assert_ne!(h1, h3, "principle order is part of the identity");
    }
}
