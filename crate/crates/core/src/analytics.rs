//! Dataset statistics and the Boltzmann preference-probability utility.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_rows, DatasetError, DialogueRow, RevisionRow};
use crate::registry::PrincipleId;
use crate::transcript::{count_message_turns, Role};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Text → token count. The default implementation splits on whitespace; a
/// vocabulary file can be supplied to approximate a model tokenizer.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Greedy longest-match tokenizer over a plain vocabulary file (one token
/// per line). Whitespace separates match regions; an unmatched character
/// counts as one token.
pub struct VocabTokenizer {
    vocab: std::collections::BTreeSet<String>,
    max_len: usize,
}

impl VocabTokenizer {
    pub fn from_file(path: &Path) -> Result<Self, AnalyticsError> {
        let text = fs::read_to_string(path).map_err(|source| AnalyticsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let vocab: std::collections::BTreeSet<String> = text
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_string())
            .collect();
        if vocab.is_empty() {
            return Err(AnalyticsError::Domain("vocabulary file is empty".into()));
        }
        let max_len = vocab.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(Self { vocab, max_len })
    }
}

impl Tokenizer for VocabTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut count = 0;
        for word in text.split_whitespace() {
            let mut rest = word;
            while !rest.is_empty() {
                let limit = self.max_len.min(rest.len());
                let mut matched = 0;
                for end in (1..=limit).rev() {
                    if rest.is_char_boundary(end) && self.vocab.contains(&rest[..end]) {
                        matched = end;
                        break;
                    }
                }
                if matched == 0 {
                    matched = rest
                        .char_indices()
                        .nth(1)
                        .map_or(rest.len(), |(i, _)| i);
                }
                count += 1;
                rest = &rest[matched..];
            }
        }
        count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub num_examples: usize,
    pub avg_turns: f64,
    pub avg_prompt_tokens: f64,
    pub avg_response_tokens: f64,
    /// Set when the split had no rows; the averages are reported as 0.
    pub empty: bool,
}

struct StatsAccumulator {
    rows: usize,
    turns_sum: f64,
    prompt_tokens: u64,
    prompt_messages: u64,
    response_tokens: u64,
    response_messages: u64,
}

impl StatsAccumulator {
    fn new() -> Self {
        Self {
            rows: 0,
            turns_sum: 0.0,
            prompt_tokens: 0,
            prompt_messages: 0,
            response_tokens: 0,
            response_messages: 0,
        }
    }

    fn add(&mut self, roles_and_texts: &[(Role, &str)], tokenizer: &dyn Tokenizer) {
        self.rows += 1;
        let (_, turns) = count_message_turns(roles_and_texts.iter().map(|(r, _)| *r));
        self.turns_sum += turns as f64;
        for (role, text) in roles_and_texts {
            let tokens = tokenizer.count(text) as u64;
            match role {
                Role::User => {
                    self.prompt_tokens += tokens;
                    self.prompt_messages += 1;
                }
                Role::Agent => {
                    self.response_tokens += tokens;
                    self.response_messages += 1;
                }
            }
        }
    }

    fn finish(self) -> StatsSummary {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        StatsSummary {
            num_examples: self.rows,
            avg_turns: if self.rows == 0 {
                0.0
            } else {
                self.turns_sum / self.rows as f64
            },
            avg_prompt_tokens: ratio(self.prompt_tokens, self.prompt_messages),
            avg_response_tokens: ratio(self.response_tokens, self.response_messages),
            empty: self.rows == 0,
        }
    }
}

/// Summarize a dialogues split: per-conversation mean turn count (system
/// prompts never counted) and global mean token counts over user / agent
/// messages.
pub fn summarize(path: &Path, tokenizer: &dyn Tokenizer) -> Result<StatsSummary, AnalyticsError> {
    let rows: Vec<DialogueRow> = read_rows(path)?;
    let mut acc = StatsAccumulator::new();
    for row in &rows {
        let messages: Vec<(Role, &str)> = row
            .messages
            .iter()
            .map(|m| (m.role, m.content.as_str()))
            .collect();
        acc.add(&messages, tokenizer);
    }
    Ok(acc.finish())
}

/// Summarize a revisions split. Token counts are computed over the context
/// plus the rejected (pre-revision) utterance.
pub fn summarize_revisions(
    path: &Path,
    tokenizer: &dyn Tokenizer,
) -> Result<StatsSummary, AnalyticsError> {
    let rows: Vec<RevisionRow> = read_rows(path)?;
    let mut acc = StatsAccumulator::new();
    for row in &rows {
        let mut messages: Vec<(Role, &str)> = row
            .context
            .iter()
            .map(|m| (m.role, m.content.as_str()))
            .collect();
        messages.push((Role::Agent, row.rejected.as_str()));
        acc.add(&messages, tokenizer);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationHistogram {
    pub counts: BTreeMap<PrincipleId, u64>,
    pub percentages: BTreeMap<PrincipleId, f64>,
    /// Σ per-pair |violated principles|; can exceed the row count because
    /// one conversation may violate several principles.
    pub total: u64,
    pub texts: BTreeMap<PrincipleId, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub id: PrincipleId,
    pub text: String,
    pub count: u64,
    pub pct: f64,
}

/// Count how often each principle was violated across a revisions split.
pub fn violation_histogram(path: &Path) -> Result<ViolationHistogram, AnalyticsError> {
    let rows: Vec<RevisionRow> = read_rows(path)?;
    let mut counts: BTreeMap<PrincipleId, u64> = BTreeMap::new();
    let mut texts: BTreeMap<PrincipleId, String> = BTreeMap::new();
    for row in &rows {
        for principle in &row.violated {
            *counts.entry(principle.id).or_insert(0) += 1;
            texts.entry(principle.id).or_insert_with(|| principle.text.clone());
        }
    }
    let total: u64 = counts.values().sum();
    let percentages = counts
        .iter()
        .map(|(&id, &c)| {
            let pct = if total == 0 {
                0.0
            } else {
                c as f64 / total as f64 * 100.0
            };
            (id, pct)
        })
        .collect();
    Ok(ViolationHistogram {
        counts,
        percentages,
        total,
        texts,
    })
}

impl ViolationHistogram {
    fn rows(&self) -> Vec<HistogramRow> {
        self.counts
            .iter()
            .map(|(&id, &count)| HistogramRow {
                id,
                text: self.texts.get(&id).cloned().unwrap_or_default(),
                count,
                pct: self.percentages[&id],
            })
            .collect()
    }

    /// Most-violated first; ties break toward the smaller id.
    pub fn top(&self, k: usize) -> Vec<HistogramRow> {
        let mut rows = self.rows();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.id.cmp(&b.id)));
        rows.truncate(k);
        rows
    }

    /// Least-violated first; ties break toward the smaller id.
    pub fn bottom(&self, k: usize) -> Vec<HistogramRow> {
        let mut rows = self.rows();
        rows.sort_by(|a, b| a.count.cmp(&b.count).then(a.id.cmp(&b.id)));
        rows.truncate(k);
        rows
    }

    /// Plot data: `principle_id,count,pct`, ordered by id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("principle_id,count,pct\n");
        for row in self.rows() {
            out.push_str(&format!("{},{},{:.1}\n", row.id, row.count, row.pct));
        }
        out
    }
}

/// Render histogram rows as TSV with percentages to one decimal place.
pub fn histogram_tsv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("id\tcount\tpct\ttext\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.1}\t{}\n",
            row.id, row.count, row.pct, row.text
        ));
    }
    out
}

/// Render histogram rows as an aligned plain-text table.
pub fn histogram_text(rows: &[HistogramRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>5}  {:>7}  {:>5}  text\n", "id", "count", "%"));
    for row in rows {
        out.push_str(&format!(
            "{:>5}  {:>7}  {:>5.1}  {}\n",
            row.id, row.count, row.pct, row.text
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoalRow {
    pub goal: String,
    pub conversations: usize,
    pub avg_utterances: f64,
    pub avg_tokens_per_message: f64,
}

/// Per-goal means: utterances per conversation and tokens per message, both
/// averaged conversation-first. Goals absent from the split are omitted;
/// rows are ordered by goal text.
pub fn per_goal_table(
    path: &Path,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<GoalRow>, AnalyticsError> {
    let rows: Vec<DialogueRow> = read_rows(path)?;
    let mut groups: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in &rows {
        let utterances = row.messages.len();
        let tokens: usize = row
            .messages
            .iter()
            .map(|m| tokenizer.count(&m.content))
            .sum();
        let per_message = if utterances == 0 {
            0.0
        } else {
            tokens as f64 / utterances as f64
        };
        groups
            .entry(row.goal.clone())
            .or_default()
            .push((utterances, per_message));
    }
    Ok(groups
        .into_iter()
        .map(|(goal, samples)| {
            let n = samples.len() as f64;
            GoalRow {
                goal,
                conversations: samples.len(),
                avg_utterances: samples.iter().map(|(u, _)| *u as f64).sum::<f64>() / n,
                avg_tokens_per_message: samples.iter().map(|(_, t)| *t).sum::<f64>() / n,
            }
        })
        .collect())
}

/// Inputs of the Boltzmann preference probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceQuery {
    pub reward_0: f64,
    pub reward_1: f64,
    /// Inverse temperature; 0 means indifference.
    pub beta: f64,
}

impl PreferenceQuery {
    pub fn swap(self) -> Self {
        Self {
            reward_0: self.reward_1,
            reward_1: self.reward_0,
            beta: self.beta,
        }
    }
}

/// Probability that the first completion is preferred:
/// `e^(β·r0) / (e^(β·r0) + e^(β·r1))`, computed with the max exponent
/// subtracted so large rewards cannot overflow.
pub fn boltzmann_preference_probability(q: PreferenceQuery) -> Result<f64, AnalyticsError> {
    if q.beta < 0.0 {
        return Err(AnalyticsError::Domain(format!(
            "beta must be non-negative, got {}",
            q.beta
        )));
    }
    if !q.beta.is_finite() || !q.reward_0.is_finite() || !q.reward_1.is_finite() {
        return Err(AnalyticsError::Domain("inputs must be finite".into()));
    }
    let a = q.beta * q.reward_0;
    let b = q.beta * q.reward_1;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    Ok(ea / (ea + eb))
}
