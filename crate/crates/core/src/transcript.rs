//! Parser for raw self-dialogue completions.
//!
//! Grammar: an optional `Plan:` header with contiguously numbered steps, a
//! `---` separator, then utterance blocks introduced by a role marker at the
//! start of a line. A line equal to `DONE` terminates the transcript. Role
//! markers outside the canonical `USER:` / `AGENT:` pair are mapped through
//! an alias table and recorded as drift anomalies, so downstream filtering
//! stays a policy decision instead of a parser failure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Phrase that identifies a verbatim echo of the scaffold instruction line.
const SCAFFOLD_ECHO_PHRASE: &str = "statement that naturally violates";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn flip(self) -> Role {
        match self {
            Role::User => Role::Agent,
            Role::Agent => Role::User,
        }
    }

    pub fn marker(self) -> &'static str {
        match self {
            Role::User => "USER:",
            Role::Agent => "AGENT:",
        }
    }
}

/// One utterance. The marker is stripped and the body trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    /// The transcript ended with its own `DONE` line.
    Done,
    /// Input ran out without a `DONE` marker.
    NoDone,
    /// Generation was cut off (length stop, utterance cap, or retry
    /// exhaustion upstream).
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    RoleAliasDrift,
    MissingSeparator,
    NonAlternating,
    TemplateEcho,
    EmptyUtterance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    /// 1-based line number in the raw input.
    pub line: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTranscript {
    pub plan: Vec<String>,
    pub turns: Vec<Turn>,
    pub terminal: Terminal,
    pub anomalies: Vec<Anomaly>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no role markers found in input")]
    NoRoleMarkers,
    #[error("plan steps are not contiguous: expected step {expected}, found {found} (line {line})")]
    PlanGap {
        expected: usize,
        found: usize,
        line: usize,
    },
    #[error("plan text before the first numbered step (line {line})")]
    PlanTextBeforeStep { line: usize },
}

/// Maps drifted role markers back to canonical roles. Canonical markers match
/// without an anomaly; everything else records [`AnomalyKind::RoleAliasDrift`].
#[derive(Debug, Clone)]
pub struct AliasTable {
    entries: Vec<(String, Role, bool)>,
}

impl Default for AliasTable {
    fn default() -> Self {
        let mut t = AliasTable { entries: Vec::new() };
        t.push("USER:", Role::User, true);
        t.push("AGENT:", Role::Agent, true);
        // Drifted labelings observed in real generations.
        t.push("Assistant 1:", Role::User, false);
        t.push("Assistant 2:", Role::Agent, false);
        t.push("User:", Role::User, false);
        t.push("user:", Role::User, false);
        t.push("Assistant:", Role::Agent, false);
        t.push("assistant:", Role::Agent, false);
        t.push("ASSISTANT:", Role::Agent, false);
        t.push("Agent:", Role::Agent, false);
        t.push("agent:", Role::Agent, false);
        t
    }
}

impl AliasTable {
    pub fn empty() -> Self {
        let mut t = AliasTable { entries: Vec::new() };
        t.push("USER:", Role::User, true);
        t.push("AGENT:", Role::Agent, true);
        t
    }

    pub fn push(&mut self, marker: &str, role: Role, canonical: bool) {
        self.entries.push((marker.to_string(), role, canonical));
        // Longest-first so "Assistant 1:" wins over any shorter prefix.
        self.entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    }

    /// Whether `line` opens with any known role marker.
    pub fn matches_marker(&self, line: &str) -> bool {
        self.match_line(line).is_some()
    }

    /// Match a marker at the start of `line` (leading whitespace tolerated).
    /// Returns (marker, role, canonical, rest-of-line).
    fn match_line<'a>(&self, line: &'a str) -> Option<(&str, Role, bool, &'a str)> {
        let trimmed = line.trim_start();
        for (marker, role, canonical) in &self.entries {
            if let Some(rest) = trimmed.strip_prefix(marker.as_str()) {
                return Some((marker, *role, *canonical, rest));
            }
        }
        None
    }
}

/// Parse with the default alias table.
pub fn parse_transcript(raw: &str) -> Result<ParsedTranscript, ParseError> {
    parse_transcript_with(raw, &AliasTable::default())
}

/// Split a plan line of the form `N. text`.
fn plan_step(line: &str) -> Option<(usize, &str)> {
    let trimmed = line.trim_start();
    let dot = trimmed.find('.')?;
    let (num, rest) = trimmed.split_at(dot);
    if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((num.parse().ok()?, rest[1..].trim()))
}

struct BlockState<'t> {
    role: Role,
    marker_line: usize,
    fragments: Vec<&'t str>,
    first_fragment: String,
}

pub fn parse_transcript_with(
    raw: &str,
    aliases: &AliasTable,
) -> Result<ParsedTranscript, ParseError> {
    let mut plan: Vec<String> = Vec::new();
    let mut turns: Vec<Turn> = Vec::new();
    let mut anomalies: Vec<Anomaly> = Vec::new();
    let mut seen_aliases: Vec<String> = Vec::new();
    let mut terminal = Terminal::NoDone;
    let mut saw_marker = false;
    let mut last_block_was_echo = false;

    #[derive(PartialEq)]
    enum Phase {
        Preamble,
        Plan,
        Dialogue,
    }
    let mut phase = Phase::Preamble;
    let mut block: Option<BlockState> = None;

    let flush = |block: &mut Option<BlockState>,
                     turns: &mut Vec<Turn>,
                     anomalies: &mut Vec<Anomaly>,
                     last_block_was_echo: &mut bool| {
        let Some(state) = block.take() else { return };
        let mut text = state.first_fragment;
        for frag in state.fragments {
            text.push('\n');
            text.push_str(frag);
        }
        let text = text.trim().to_string();
        *last_block_was_echo = false;
        if text.is_empty() {
            anomalies.push(Anomaly {
                kind: AnomalyKind::EmptyUtterance,
                line: state.marker_line,
                detail: format!("{:?} block with empty body", state.role),
            });
            return;
        }
        if text.starts_with('[') && text.contains(SCAFFOLD_ECHO_PHRASE) {
            anomalies.push(Anomaly {
                kind: AnomalyKind::TemplateEcho,
                line: state.marker_line,
                detail: "scaffold instruction echoed verbatim; turn excluded".to_string(),
            });
            *last_block_was_echo = true;
            return;
        }
        let expected = turns.last().map_or(Role::User, |t: &Turn| t.role.flip());
        if state.role != expected {
            anomalies.push(Anomaly {
                kind: AnomalyKind::NonAlternating,
                line: state.marker_line,
                detail: format!("expected {expected:?} turn, found {:?}", state.role),
            });
        }
        turns.push(Turn {
            role: state.role,
            text,
        });
    };

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();

        if phase == Phase::Dialogue || saw_marker {
            if trimmed == "DONE" {
                terminal = Terminal::Done;
                flush(&mut block, &mut turns, &mut anomalies, &mut last_block_was_echo);
                break;
            }
        }

        match phase {
            Phase::Preamble => {
                if trimmed == "Plan:" {
                    phase = Phase::Plan;
                } else if trimmed == "---" {
                    phase = Phase::Dialogue;
                } else if let Some((marker, role, canonical, rest)) = aliases.match_line(line) {
                    phase = Phase::Dialogue;
                    saw_marker = true;
                    if !canonical && !seen_aliases.contains(&marker.to_string()) {
                        seen_aliases.push(marker.to_string());
                        anomalies.push(Anomaly {
                            kind: AnomalyKind::RoleAliasDrift,
                            line: line_no,
                            detail: format!("marker \"{marker}\" mapped to {role:?}"),
                        });
                    }
                    block = Some(BlockState {
                        role,
                        marker_line: line_no,
                        fragments: Vec::new(),
                        first_fragment: rest.trim_start().to_string(),
                    });
                }
                // Anything else before the structure starts is chatter.
            }
            Phase::Plan => {
                if trimmed == "---" {
                    phase = Phase::Dialogue;
                } else if let Some((marker, role, canonical, rest)) = aliases.match_line(line) {
                    anomalies.push(Anomaly {
                        kind: AnomalyKind::MissingSeparator,
                        line: line_no,
                        detail: "dialogue begins without --- separator".to_string(),
                    });
                    phase = Phase::Dialogue;
                    saw_marker = true;
                    if !canonical && !seen_aliases.contains(&marker.to_string()) {
                        seen_aliases.push(marker.to_string());
                        anomalies.push(Anomaly {
                            kind: AnomalyKind::RoleAliasDrift,
                            line: line_no,
                            detail: format!("marker \"{marker}\" mapped to {role:?}"),
                        });
                    }
                    block = Some(BlockState {
                        role,
                        marker_line: line_no,
                        fragments: Vec::new(),
                        first_fragment: rest.trim_start().to_string(),
                    });
                } else if trimmed.is_empty() {
                    // Blank lines inside the plan block are insignificant.
                } else if let Some((n, text)) = plan_step(line) {
                    let expected = plan.len() + 1;
                    if n != expected {
                        return Err(ParseError::PlanGap {
                            expected,
                            found: n,
                            line: line_no,
                        });
                    }
                    plan.push(text.to_string());
                } else if let Some(last) = plan.last_mut() {
                    // Wrapped plan step; fold into the open step.
                    last.push(' ');
                    last.push_str(trimmed);
                } else {
                    return Err(ParseError::PlanTextBeforeStep { line: line_no });
                }
            }
            Phase::Dialogue => {
                if let Some((marker, role, canonical, rest)) = aliases.match_line(line) {
                    flush(&mut block, &mut turns, &mut anomalies, &mut last_block_was_echo);
                    saw_marker = true;
                    if !canonical && !seen_aliases.contains(&marker.to_string()) {
                        seen_aliases.push(marker.to_string());
                        anomalies.push(Anomaly {
                            kind: AnomalyKind::RoleAliasDrift,
                            line: line_no,
                            detail: format!("marker \"{marker}\" mapped to {role:?}"),
                        });
                    }
                    block = Some(BlockState {
                        role,
                        marker_line: line_no,
                        fragments: Vec::new(),
                        first_fragment: rest.trim_start().to_string(),
                    });
                } else if let Some(state) = block.as_mut() {
                    state.fragments.push(line);
                }
                // Text after --- but before the first marker is chatter.
            }
        }
    }
    flush(&mut block, &mut turns, &mut anomalies, &mut last_block_was_echo);

    if !saw_marker {
        return Err(ParseError::NoRoleMarkers);
    }
    if terminal == Terminal::Done && last_block_was_echo {
        // The scaffold echo is a failed violation, not a violation.
        terminal = Terminal::NoDone;
    }

    Ok(ParsedTranscript {
        plan,
        turns,
        terminal,
        anomalies,
    })
}

impl ParsedTranscript {
    /// The utterance eligible for critique: the final agent turn, present
    /// only when the transcript terminated itself with `DONE`.
    pub fn violation_candidate(&self) -> Option<&Turn> {
        if self.terminal != Terminal::Done {
            return None;
        }
        match self.turns.last() {
            Some(turn) if turn.role == Role::Agent => Some(turn),
            _ => None,
        }
    }

    /// `(utterances, turns)` where a turn is one adjacent (user, agent) pair.
    /// The plan / system prompt is never counted.
    pub fn count_turns(&self) -> (usize, usize) {
        count_message_turns(self.turns.iter().map(|t| t.role))
    }

    /// Canonical serialized form: `Plan:` block, `---`, `USER:`/`AGENT:`
    /// blocks separated by blank lines, final `DONE` only for
    /// [`Terminal::Done`]. Re-parsing yields a structurally identical
    /// transcript with no anomalies.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        if !self.plan.is_empty() {
            out.push_str("Plan:\n");
            for (i, step) in self.plan.iter().enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, step));
            }
            out.push_str("---\n");
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(turn.role.marker());
            out.push(' ');
            out.push_str(&turn.text);
            out.push('\n');
        }
        if self.terminal == Terminal::Done {
            out.push_str("DONE\n");
        }
        out
    }

    /// Plan, turns, and terminal agree; anomaly lists may differ.
    pub fn structurally_eq(&self, other: &ParsedTranscript) -> bool {
        self.plan == other.plan && self.turns == other.turns && self.terminal == other.terminal
    }
}

/// Shared turn-counting rule: greedy left-to-right scan for adjacent
/// (user, agent) pairs.
pub fn count_message_turns(roles: impl Iterator<Item = Role>) -> (usize, usize) {
    let roles: Vec<Role> = roles.collect();
    let utterances = roles.len();
    let mut turns = 0;
    let mut i = 0;
    while i + 1 < roles.len() {
        if roles[i] == Role::User && roles[i + 1] == Role::Agent {
            turns += 1;
            i += 2;
        } else {
            i += 1;
        }
    }
    (utterances, turns)
}
