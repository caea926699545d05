//! Frozen prompt templates and their substitution rules.
//!
//! The three templates ship as data files (`dialogue.tmpl`, `critique.tmpl`,
//! `revision.tmpl`) so their provenance stays auditable; a checksum test
//! turns any drift into a failure. Rendering is a single pass: substituted
//! values are never re-scanned for placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{DialogueSetup, Principle};

const DIALOGUE_TEMPLATE: &str = include_str!("../data/templates/dialogue.tmpl");
const CRITIQUE_TEMPLATE: &str = include_str!("../data/templates/critique.tmpl");
const REVISION_TEMPLATE: &str = include_str!("../data/templates/revision.tmpl");

/// The scaffold step in the dialogue template carries one concrete goal
/// baked into the numbered outline. By default it is reproduced verbatim;
/// [`TemplateSet::substitute_goal_in_scaffold`] swaps in the sampled goal.
const SCAFFOLD_GOAL: &str = "(Have the agent analyze data and provide insights.)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Dialogue,
    Critique,
    Revision,
}

/// A fully substituted prompt plus the values that went into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub placeholders_filled: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    dialogue: String,
    critique: String,
    revision: String,
    substitute_goal_in_scaffold: bool,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Template files end with a final newline on disk; the prompt itself ends
/// at the last content line.
fn strip_final_newline(s: &str) -> String {
    s.strip_suffix('\n').unwrap_or(s).to_string()
}

/// Escape an utterance for the template's `\"{...}\"` framing so embedded
/// double quotes cannot terminate the frame.
fn escape_quoted(value: &str) -> String {
    value.replace('"', "\\\"")
}

/// Inverse of [`escape_quoted`], for scanners that pull the utterance back
/// out of a rendered prompt.
pub fn unescape_quoted(value: &str) -> String {
    value.replace("\\\"", "\"")
}

/// Single-pass `{name}` substitution over the known placeholder set.
fn substitute(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        for (name, value) in vars {
            let token_len = name.len() + 2;
            if after.len() >= token_len
                && after.as_bytes()[token_len - 1] == b'}'
                && &after[1..token_len - 1] == name
            {
                out.push_str(value);
                rest = &after[token_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}

/// Number the sampled principles one per line: `1. <text>`.
pub fn numbered_principles(principles: &[Principle]) -> String {
    principles
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl TemplateSet {
    /// The templates compiled into the crate.
    pub fn bundled() -> Self {
        Self {
            dialogue: strip_final_newline(DIALOGUE_TEMPLATE),
            critique: strip_final_newline(CRITIQUE_TEMPLATE),
            revision: strip_final_newline(REVISION_TEMPLATE),
            substitute_goal_in_scaffold: false,
        }
    }

    /// Load `dialogue.tmpl`, `critique.tmpl`, `revision.tmpl` from a
    /// directory.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| -> Result<String, TemplateError> {
            let path = dir.join(name);
            fs::read_to_string(&path)
                .map(|s| strip_final_newline(&s))
                .map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })
        };
        Ok(Self {
            dialogue: read("dialogue.tmpl")?,
            critique: read("critique.tmpl")?,
            revision: read("revision.tmpl")?,
            substitute_goal_in_scaffold: false,
        })
    }

    /// Replace the concrete goal baked into the dialogue scaffold with the
    /// sampled goal instead of reproducing it verbatim.
    pub fn substitute_goal_in_scaffold(mut self, yes: bool) -> Self {
        self.substitute_goal_in_scaffold = yes;
        self
    }

    /// Render the planning/system prompt for one setup. `{topic}` receives
    /// `topic (subtopic)`; `{principles}` receives the numbered listing in
    /// both the header slot and the scaffold slot.
    pub fn render_dialogue_prompt(&self, setup: &DialogueSetup) -> RenderedPrompt {
        let mut vars = BTreeMap::new();
        vars.insert("domain".to_string(), setup.topic_entry.domain.clone());
        vars.insert(
            "topic".to_string(),
            format!("{} ({})", setup.topic_entry.topic, setup.topic_entry.subtopic),
        );
        vars.insert("goal".to_string(), setup.goal.text.clone());
        vars.insert(
            "principles".to_string(),
            numbered_principles(&setup.principles),
        );
        let mut text = substitute(&self.dialogue, &vars);
        if self.substitute_goal_in_scaffold {
            text = text.replace(SCAFFOLD_GOAL, &format!("({})", setup.goal.text));
        }
        RenderedPrompt {
            kind: PromptKind::Dialogue,
            text,
            placeholders_filled: vars,
        }
    }

    /// Render the critique prompt for the final agent utterance against the
    /// sampled principle subset.
    pub fn render_critique_prompt(
        &self,
        last_agent_utterance: &str,
        principles: &[Principle],
    ) -> Result<RenderedPrompt, TemplateError> {
        if last_agent_utterance.trim().is_empty() {
            return Err(TemplateError::EmptyInput("last_agent_utterance"));
        }
        let mut vars = BTreeMap::new();
        vars.insert(
            "last_agent_utterance".to_string(),
            escape_quoted(last_agent_utterance),
        );
        vars.insert(
            "concatted_principles".to_string(),
            numbered_principles(principles),
        );
        let text = substitute(&self.critique, &vars);
        Ok(RenderedPrompt {
            kind: PromptKind::Critique,
            text,
            placeholders_filled: vars,
        })
    }

    /// Render the revision prompt: the violated principles, the utterance to
    /// fix, and the critique findings.
    pub fn render_revision_prompt(
        &self,
        last_agent_utterance: &str,
        principles: &[Principle],
        critique: &str,
    ) -> Result<RenderedPrompt, TemplateError> {
        if critique.trim().is_empty() {
            return Err(TemplateError::EmptyInput("critique"));
        }
        if last_agent_utterance.trim().is_empty() {
            return Err(TemplateError::EmptyInput("last_agent_utterance"));
        }
        let mut vars = BTreeMap::new();
        vars.insert(
            "last_agent_utterance".to_string(),
            escape_quoted(last_agent_utterance),
        );
        vars.insert(
            "concatted_principles".to_string(),
            numbered_principles(principles),
        );
        vars.insert("critique".to_string(), critique.to_string());
        let text = substitute(&self.revision, &vars);
        Ok(RenderedPrompt {
            kind: PromptKind::Revision,
            text,
            placeholders_filled: vars,
        })
    }
}

/// Pull the quoted utterance back out of a rendered critique prompt.
/// Test-facing counterpart of the quoting contract.
pub fn scan_critique_utterance(rendered: &str) -> Option<String> {
    let start = rendered.find(": \\\"")? + 4;
    let end = rendered[start..].find("\\\" for severe violations")? + start;
    Some(unescape_quoted(&rendered[start..end]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Goal, TopicEntry};

    fn principle(id: u32, text: &str) -> Principle {
        Principle {
            id,
            source: "test".into(),
            text: text.into(),
        }
    }

    fn setup() -> DialogueSetup {
        DialogueSetup {
            topic_entry: TopicEntry {
                domain: "Music".into(),
                topic: "Pop".into(),
                subtopic: "New album reviews".into(),
            },
            principles: vec![principle(96, "Do not provide misinformation.")],
            goal: Goal {
                id: 11,
                text: "Have the agent steelman the user's argument.".into(),
            },
            seed: 42,
        }
    }

    #[test]
    fn dialogue_prompt_substitutes_setup_fields() {
        let rendered = TemplateSet::bundled().render_dialogue_prompt(&setup());
        assert!(rendered
            .text
            .contains("Have the agent steelman the user's argument."));
        assert!(rendered.text.contains("the domain of Music"));
        assert!(rendered.text.contains("the topic of Pop (New album reviews)"));
        assert!(rendered.text.contains("1. Do not provide misinformation."));
    }

    #[test]
    fn dialogue_prompt_keeps_marker_conventions() {
        let rendered = TemplateSet::bundled().render_dialogue_prompt(&setup());
        assert!(rendered.text.contains("marking this moment with 'DONE'"));
        assert!(rendered
            .text
            .contains("construct a dialogue consisting of AT LEAST three exchanges"));
        assert!(rendered.text.ends_with("DONE"));
    }

    #[test]
    fn scaffold_goal_is_verbatim_by_default_and_swappable() {
        let s = setup();
        let verbatim = TemplateSet::bundled().render_dialogue_prompt(&s);
        assert!(verbatim.text.contains(SCAFFOLD_GOAL));
        let swapped = TemplateSet::bundled()
            .substitute_goal_in_scaffold(true)
            .render_dialogue_prompt(&s);
        assert!(!swapped.text.contains(SCAFFOLD_GOAL));
        assert!(swapped
            .text
            .contains("(Have the agent steelman the user's argument.)"));
    }

    #[test]
    fn critique_prompt_keeps_format_lines() {
        let rendered = TemplateSet::bundled()
            .render_critique_prompt("You should cheat.", &[principle(9, "Do not cheat.")])
            .unwrap();
        assert!(rendered
            .text
            .contains("Format: CRITIQUE: ... PRINCIPLES VIOLATED: [x,y]"));
        assert!(rendered.text.contains("Write 'NONE' if no rules are violated"));
        assert!(rendered.text.ends_with("DONE"));
    }

    #[test]
    fn critique_prompt_escapes_embedded_quotes() {
        let utterance = r#"She said "trust me" and walked off."#;
        let rendered = TemplateSet::bundled()
            .render_critique_prompt(utterance, &[principle(1, "Do not mislead.")])
            .unwrap();
        let recovered = scan_critique_utterance(&rendered.text).unwrap();
        assert_eq!(recovered, utterance);
    }

    #[test]
    fn revision_prompt_carries_critique_under_header() {
        let rendered = TemplateSet::bundled()
            .render_revision_prompt(
                "Bad utterance.",
                &[principle(1, "Do not mislead.")],
                "C1",
            )
            .unwrap();
        let header_at = rendered.text.find("\"Critique Findings:\"").unwrap();
        let critique_at = rendered.text[header_at..].find("C1").unwrap();
        assert!(critique_at > 0);
        assert!(rendered.text.contains("Format: REVISED UTTERANCE: ..."));
        assert!(rendered.text.ends_with("DONE"));
    }

    #[test]
    fn empty_critique_is_rejected() {
        let err = TemplateSet::bundled()
            .render_revision_prompt("x", &[principle(1, "p")], "  ")
            .unwrap_err();
        assert!(err.to_string().contains("critique"));
    }

    #[test]
    fn no_residual_placeholders_survive_rendering() {
        let known = [
            "{domain}",
            "{topic}",
            "{goal}",
            "{principles}",
            "{last_agent_utterance}",
            "{concatted_principles}",
            "{critique}",
        ];
        let set = TemplateSet::bundled();
        let s = setup();
        let outputs = [
            set.render_dialogue_prompt(&s).text,
            set.render_critique_prompt("u", &s.principles).unwrap().text,
            set.render_revision_prompt("u", &s.principles, "c").unwrap().text,
        ];
        for text in &outputs {
            for token in &known {
                assert!(!text.contains(token), "residual {token} in output");
            }
        }
    }

    #[test]
    fn substitution_is_single_pass() {
        // A value containing a placeholder token must come through verbatim.
        let rendered = TemplateSet::bundled()
            .render_critique_prompt("see {concatted_principles}", &[principle(1, "p")])
            .unwrap();
        assert!(rendered.text.contains("see {concatted_principles}"));
    }

    #[test]
    fn two_principles_number_on_their_own_lines() {
        let listing = numbered_principles(&[
            principle(1, "Do not be unhelpful."),
            principle(2, "Do not be unkind."),
        ]);
        assert_eq!(listing, "1. Do not be unhelpful.\n2. Do not be unkind.");
    }
}
