//! Constant sets that seed every conversation: topics, principles, and goals.
//!
//! The registry is loaded once, validated, and then shared immutably across
//! workers. Sampling is a pure function of `(registry, seed, weights)` so a
//! run can be replayed or resumed without drift. A [`ViolationHistory`] feeds
//! the inverse-count rebalancing that flattens the violation distribution in
//! follow-up runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable identifier of a principle: its 1-based position in the source file.
pub type PrincipleId = u32;
/// Stable identifier of a goal: its 1-based position in the source file.
pub type GoalId = u32;

const BUNDLED_PRINCIPLES: &str = include_str!("../data/principles.tsv");
const BUNDLED_GOALS: &str = include_str!("../data/goals.tsv");
const BUNDLED_TOPICS: &str = include_str!("../data/topics.tsv");

/// One imperative behavioral rule the generated dialogue is steered to break.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principle {
    pub id: PrincipleId,
    /// Provenance label of the collection the rule was sourced from.
    pub source: String,
    pub text: String,
}

/// A conversational task, always phrased "Have the agent ...".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: GoalId,
    pub text: String,
}

/// One (domain, topic, subtopic) leaf of the topic tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub domain: String,
    pub topic: String,
    pub subtopic: String,
}

/// Everything one conversation is seeded with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSetup {
    pub topic_entry: TopicEntry,
    /// One or two distinct principles, in the order they were drawn. Critique
    /// indices are 1-based positions into this list.
    pub principles: Vec<Principle>,
    pub goal: Goal,
    /// The RNG seed this setup was sampled with.
    pub seed: u64,
}

/// Per-principle violation counts accumulated from emitted preference pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationHistory {
    counts: BTreeMap<PrincipleId, u64>,
}

impl ViolationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &BTreeMap<PrincipleId, u64> {
        &self.counts
    }

    pub fn count(&self, id: PrincipleId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Increment the counter of every listed principle by one. A conversation
    /// that violates several principles bumps several counters.
    pub fn record(
        &mut self,
        violated: &[PrincipleId],
        registry: &Registry,
    ) -> Result<(), RegistryError> {
        for &id in violated {
            if registry.principle(id).is_none() {
                return Err(RegistryError::UnknownPrinciple(id));
            }
        }
        for &id in violated {
            *self.counts.entry(id).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Seed counters directly, e.g. from a previous run's histogram.
    pub fn with_counts(counts: BTreeMap<PrincipleId, u64>) -> Self {
        Self { counts }
    }

    /// Counters only ever grow; this is the one sanctioned way down.
    pub fn reset(&mut self) {
        self.counts.clear();
    }
}

/// Immutable bundle of topics, principles, and goals.
#[derive(Debug, Clone)]
pub struct Registry {
    principles: Vec<Principle>,
    goals: Vec<Goal>,
    topics: Vec<TopicEntry>,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{file}: line {line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}: line {line}: id {id} does not match its position {position}")]
    IdOutOfOrder {
        file: String,
        line: usize,
        id: u32,
        position: u32,
    },
    #[error("{file}: no {what} entries")]
    Empty { file: String, what: &'static str },
    #[error("{file}: line {line}: duplicate (topic, subtopic) pair \"{topic} / {subtopic}\"")]
    DuplicateTopic {
        file: String,
        line: usize,
        topic: String,
        subtopic: String,
    },
    #[error("unknown principle id {0}")]
    UnknownPrinciple(PrincipleId),
    #[error("cannot sample: {0}")]
    Sampling(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lines starting with `#` and blank lines are skipped; everything else must
/// have exactly `arity` tab-separated fields.
fn parse_tsv<'a>(
    text: &'a str,
    file: &str,
    arity: usize,
) -> Result<Vec<(usize, Vec<&'a str>)>, RegistryError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != arity {
            return Err(RegistryError::Malformed {
                file: file.to_string(),
                line: line_no,
                reason: format!("expected {} tab-separated fields, found {}", arity, fields.len()),
            });
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(RegistryError::Malformed {
                file: file.to_string(),
                line: line_no,
                reason: "empty field".to_string(),
            });
        }
        rows.push((line_no, fields));
    }
    Ok(rows)
}

fn parse_id(raw: &str, file: &str, line: usize) -> Result<u32, RegistryError> {
    raw.trim().parse::<u32>().map_err(|_| RegistryError::Malformed {
        file: file.to_string(),
        line,
        reason: format!("invalid id \"{raw}\""),
    })
}

impl Registry {
    /// Parse the three constant sets from in-memory text.
    pub fn from_sources(
        principles: &str,
        goals: &str,
        topics: &str,
    ) -> Result<Self, RegistryError> {
        let principles = Self::parse_principles(principles, "principles")?;
        let goals = Self::parse_goals(goals, "goals")?;
        let topics = Self::parse_topics(topics, "topics")?;
        Ok(Self {
            principles,
            goals,
            topics,
        })
    }

    /// The sets shipped with the crate: 127 principles, 35 goals, and a small
    /// demonstration topic tree.
    pub fn bundled() -> Self {
        Self::from_sources(BUNDLED_PRINCIPLES, BUNDLED_GOALS, BUNDLED_TOPICS)
            .expect("bundled registry data is valid")
    }

    /// Load from files, falling back to the bundled set wherever a path is
    /// absent.
    pub fn from_paths(
        principles: Option<&Path>,
        goals: Option<&Path>,
        topics: Option<&Path>,
    ) -> Result<Self, RegistryError> {
        let read = |p: &Path| -> Result<String, RegistryError> {
            fs::read_to_string(p).map_err(|source| RegistryError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let p = match principles {
            Some(p) => read(p)?,
            None => BUNDLED_PRINCIPLES.to_string(),
        };
        let g = match goals {
            Some(p) => read(p)?,
            None => BUNDLED_GOALS.to_string(),
        };
        let t = match topics {
            Some(p) => read(p)?,
            None => BUNDLED_TOPICS.to_string(),
        };
        Self::from_sources(&p, &g, &t)
    }

    fn parse_principles(text: &str, file: &str) -> Result<Vec<Principle>, RegistryError> {
        let rows = parse_tsv(text, file, 3)?;
        if rows.is_empty() {
            return Err(RegistryError::Empty {
                file: file.to_string(),
                what: "principle",
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for (position, (line, fields)) in rows.iter().enumerate() {
            let id = parse_id(fields[0], file, *line)?;
            let expected = position as u32 + 1;
            if id != expected {
                return Err(RegistryError::IdOutOfOrder {
                    file: file.to_string(),
                    line: *line,
                    id,
                    position: expected,
                });
            }
            out.push(Principle {
                id,
                source: fields[1].to_string(),
                text: fields[2].to_string(),
            });
        }
        Ok(out)
    }

    fn parse_goals(text: &str, file: &str) -> Result<Vec<Goal>, RegistryError> {
        let rows = parse_tsv(text, file, 2)?;
        if rows.is_empty() {
            return Err(RegistryError::Empty {
                file: file.to_string(),
                what: "goal",
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for (position, (line, fields)) in rows.iter().enumerate() {
            let id = parse_id(fields[0], file, *line)?;
            let expected = position as u32 + 1;
            if id != expected {
                return Err(RegistryError::IdOutOfOrder {
                    file: file.to_string(),
                    line: *line,
                    id,
                    position: expected,
                });
            }
            out.push(Goal {
                id,
                text: fields[1].to_string(),
            });
        }
        Ok(out)
    }

    fn parse_topics(text: &str, file: &str) -> Result<Vec<TopicEntry>, RegistryError> {
        let rows = parse_tsv(text, file, 3)?;
        if rows.is_empty() {
            return Err(RegistryError::Empty {
                file: file.to_string(),
                what: "topic",
            });
        }
        let mut seen: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(rows.len());
        for (line, fields) in &rows {
            if seen.insert((fields[1], fields[2]), *line).is_some() {
                return Err(RegistryError::DuplicateTopic {
                    file: file.to_string(),
                    line: *line,
                    topic: fields[1].to_string(),
                    subtopic: fields[2].to_string(),
                });
            }
            out.push(TopicEntry {
                domain: fields[0].to_string(),
                topic: fields[1].to_string(),
                subtopic: fields[2].to_string(),
            });
        }
        Ok(out)
    }

    pub fn principles(&self) -> &[Principle] {
        &self.principles
    }

    pub fn goals(&self) -> &[Goal] {
        &self.goals
    }

    pub fn topics(&self) -> &[TopicEntry] {
        &self.topics
    }

    pub fn principle(&self, id: PrincipleId) -> Option<&Principle> {
        // Ids are dense 1-based positions by construction.
        if id == 0 {
            return None;
        }
        self.principles.get(id as usize - 1)
    }

    /// Equal weight for every principle, normalized to sum to 1.
    pub fn uniform_weights(&self) -> BTreeMap<PrincipleId, f64> {
        let w = 1.0 / self.principles.len() as f64;
        self.principles.iter().map(|p| (p.id, w)).collect()
    }

    /// Inverse-count weights: `1 / (1 + violations)` per principle, then
    /// normalized. Strictly decreasing in the count, strictly positive, and
    /// uniform when the history is empty.
    pub fn rebalanced_weights(&self, history: &ViolationHistory) -> BTreeMap<PrincipleId, f64> {
        let raw: BTreeMap<PrincipleId, f64> = self
            .principles
            .iter()
            .map(|p| (p.id, 1.0 / (1.0 + history.count(p.id) as f64)))
            .collect();
        let total: f64 = raw.values().sum();
        raw.into_iter().map(|(id, w)| (id, w / total)).collect()
    }

    /// Draw one setup. Deterministic: the same `(registry, seed, weights)`
    /// always yields the same setup. Draw order is topic, principle count,
    /// principles (without replacement, proportional to `weights`), goal.
    pub fn sample_setup(
        &self,
        seed: u64,
        weights: &BTreeMap<PrincipleId, f64>,
    ) -> Result<DialogueSetup, RegistryError> {
        if self.topics.is_empty() || self.principles.is_empty() || self.goals.is_empty() {
            return Err(RegistryError::Sampling("registry has an empty dimension".into()));
        }
        for p in &self.principles {
            match weights.get(&p.id) {
                Some(w) if *w > 0.0 && w.is_finite() => {}
                Some(w) => {
                    return Err(RegistryError::Sampling(format!(
                        "weight for principle {} must be positive and finite, got {w}",
                        p.id
                    )))
                }
                None => {
                    return Err(RegistryError::Sampling(format!(
                        "weights missing principle {}",
                        p.id
                    )))
                }
            }
        }

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let topic_entry = self.topics[rng.gen_range(0..self.topics.len())].clone();
        let count = if self.principles.len() == 1 {
            1
        } else {
            rng.gen_range(1..=2usize)
        };

        let mut pool: Vec<(PrincipleId, f64)> = self
            .principles
            .iter()
            .map(|p| (p.id, weights[&p.id]))
            .collect();
        let mut principles = Vec::with_capacity(count);
        for _ in 0..count {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut x = rng.gen::<f64>() * total;
            let mut chosen = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if x < *w {
                    chosen = i;
                    break;
                }
                x -= w;
            }
            let (id, _) = pool.remove(chosen);
            principles.push(self.principle(id).expect("pool ids are valid").clone());
        }

        let goal = self.goals[rng.gen_range(0..self.goals.len())].clone();
        Ok(DialogueSetup {
            topic_entry,
            principles,
            goal,
            seed,
        })
    }
}

impl fmt::Display for TopicEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {} / {}", self.domain, self.topic, self.subtopic)
    }
}
