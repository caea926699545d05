//! End-to-end orchestration: sample → generate → parse → filter → critique →
//! revise → emit, with bounded concurrency, checkpointing, and resume.
//!
//! Workers process setups independently; the aggregator is the single owner
//! of the output appenders, the counters, and the violation history. Results
//! are flushed in setup order through a reorder buffer, so a run is
//! byte-deterministic under any worker interleaving and a resumed run
//! produces files identical to an uninterrupted one.

mod checkpoint;

pub use checkpoint::{CheckpointState, Counters, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critique::{run_critique, CritiqueOptions, CritiqueStatus};
use crate::dataset::{
    content_hash, DatasetError, DialogueRow, FsyncPolicy, JsonlAppender, MessageRow, PrincipleRef,
    RevisionRow, SCHEMA_VERSION,
};
use crate::gateway::{
    ChatMessage, ChatRole, CompletionRequest, FinishReason, Gateway, HttpBackend,
    HttpBackendConfig, RetryPolicy, RoleBinding, RoleLimiter, ScriptedBackend, WorkerRole,
};
use crate::registry::{DialogueSetup, PrincipleId, Registry, RegistryError, ViolationHistory};
use crate::revision::{build_preference_pair, parse_revision, PairProvenance, PreferencePair};
use crate::templates::{TemplateError, TemplateSet};
use crate::transcript::{parse_transcript, Anomaly, ParsedTranscript, Role, Terminal, Turn};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("checkpoint refused: {reason}")]
    Checkpoint { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// OpenAI-compatible chat-completions endpoint.
    Openai(HttpBackendConfig),
    /// Fixture replay from a directory, keyed by request tag.
    Scripted { fixtures_dir: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub generator: BackendConfig,
    /// Defaults to the generator backend.
    #[serde(default)]
    pub critic: Option<BackendConfig>,
    /// Defaults to the generator backend.
    #[serde(default)]
    pub reviser: Option<BackendConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concurrency {
    #[serde(default = "default_role_concurrency")]
    pub generator: usize,
    #[serde(default = "default_role_concurrency")]
    pub critic: usize,
    #[serde(default = "default_role_concurrency")]
    pub reviser: usize,
    /// Worker pool size; defaults to the largest role bound.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_role_concurrency() -> usize {
    4
}

impl Default for Concurrency {
    fn default() -> Self {
        Self {
            generator: 4,
            critic: 4,
            reviser: 4,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryConfig {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_backoff_ms")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
}

fn default_max_attempts() -> u32 {
    3
}
fn default_base_backoff_ms() -> u64 {
    250
}
fn default_backoff_multiplier() -> f64 {
    2.0
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: default_max_attempts(),
            base_backoff_ms: default_base_backoff_ms(),
            backoff_multiplier: default_backoff_multiplier(),
        }
    }
}

impl RetryConfig {
    pub fn to_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            base_backoff: std::time::Duration::from_millis(self.base_backoff_ms),
            backoff_multiplier: self.backoff_multiplier,
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// One completion yields the plan and the whole dialogue.
    #[default]
    SingleShot,
    /// Experimental: plan first, then one completion per exchange.
    Iterative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub mode: GenerationMode,
    /// Ask backends for schema-validated JSON transcripts.
    #[serde(default)]
    pub structured_output: bool,
    /// Replace the concrete goal baked into the prompt scaffold with the
    /// sampled goal.
    #[serde(default)]
    pub substitute_goal_in_scaffold: bool,
    /// Transcripts longer than this are marked truncated.
    #[serde(default = "default_utterance_cap")]
    pub utterance_cap: usize,
}

fn default_max_tokens() -> u32 {
    2048
}
fn default_temperature() -> f64 {
    1.0
}
fn default_utterance_cap() -> usize {
    40
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_tokens: default_max_tokens(),
            temperature: default_temperature(),
            stop_sequences: Vec::new(),
            mode: GenerationMode::default(),
            structured_output: false,
            substitute_goal_in_scaffold: false,
            utterance_cap: default_utterance_cap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    /// Records with any anomaly are kept in the dialogues split but excluded
    /// from critique (mirrors the removals the recipe applies).
    #[default]
    DropAnomalous,
    /// Keep anomalous records in the normal flow, flagged.
    KeepFlagged,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RebalancingConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Violation history JSON from previous data; absent means uniform.
    #[serde(default)]
    pub history_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegistrySources {
    #[serde(default)]
    pub principles: Option<PathBuf>,
    #[serde(default)]
    pub goals: Option<PathBuf>,
    #[serde(default)]
    pub topics: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Names the output files; defaults to the master seed in hex.
    #[serde(default)]
    pub run_id: Option<String>,
    pub target_count: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub backends: BackendsConfig,
    #[serde(default)]
    pub concurrency: Concurrency,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub filter_policy: FilterPolicy,
    #[serde(default)]
    pub rebalancing: RebalancingConfig,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub registry: RegistrySources,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    /// Gracefully stop after flushing this many completions in this
    /// invocation (staged runs, tests); resume finishes the rest.
    #[serde(default)]
    pub max_completions: Option<usize>,
    #[serde(default)]
    pub fsync: FsyncPolicy,
}

fn default_checkpoint_interval() -> usize {
    50
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{:016x}", self.master_seed))
    }

    pub fn dialogues_path(&self) -> PathBuf {
        self.output_dir
            .join(format!("dialogues-{}.jsonl", self.run_id()))
    }

    pub fn revisions_path(&self) -> PathBuf {
        self.output_dir
            .join(format!("revisions-{}.jsonl", self.run_id()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir
            .join(format!("checkpoint-{}.json", self.run_id()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.target_count == 0 {
            return Err(PipelineError::Config("target_count must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(PipelineError::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordProvenance {
    pub generator_model: String,
    pub generate_attempts: u32,
    pub critique_attempts: u32,
}

/// One fully processed dialogue: parsed content plus provenance and the
/// content hash the dataset dedupes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub setup: DialogueSetup,
    pub plan: Vec<String>,
    pub turns: Vec<Turn>,
    pub terminal: Terminal,
    pub anomalies: Vec<Anomaly>,
    pub provenance: RecordProvenance,
    pub content_hash: String,
    pub dropped_anomalous: bool,
}

impl DialogueRecord {
    pub fn new(
        setup: DialogueSetup,
        plan: Vec<String>,
        turns: Vec<Turn>,
        terminal: Terminal,
        anomalies: Vec<Anomaly>,
        provenance: RecordProvenance,
    ) -> Self {
        let mut record = Self {
            setup,
            plan,
            turns,
            terminal,
            anomalies,
            provenance,
            content_hash: String::new(),
            dropped_anomalous: false,
        };
        record.content_hash = record.compute_hash();
        record
    }

    /// Hash over (setup, messages); provenance excluded so reruns dedupe.
    pub fn compute_hash(&self) -> String {
        let ids: Vec<PrincipleId> = self.setup.principles.iter().map(|p| p.id).collect();
        let messages: Vec<MessageRow> = self
            .turns
            .iter()
            .map(|t| MessageRow {
                role: t.role,
                content: t.text.clone(),
            })
            .collect();
        content_hash(
            &self.setup.topic_entry.domain,
            &self.setup.topic_entry.topic,
            &self.setup.topic_entry.subtopic,
            &ids,
            &self.setup.goal.text,
            &messages,
        )
    }

    pub fn violation_candidate(&self) -> Option<&Turn> {
        if self.terminal != Terminal::Done {
            return None;
        }
        match self.turns.last() {
            Some(turn) if turn.role == Role::Agent => Some(turn),
            _ => None,
        }
    }

    pub fn terminal_str(&self) -> &'static str {
        match self.terminal {
            Terminal::Done => "done",
            Terminal::NoDone => "no_done",
            Terminal::Truncated => "truncated",
        }
    }

    pub fn to_row(&self) -> DialogueRow {
        DialogueRow {
            schema_version: SCHEMA_VERSION.to_string(),
            id: self.content_hash.clone(),
            domain: self.setup.topic_entry.domain.clone(),
            topic: self.setup.topic_entry.topic.clone(),
            subtopic: self.setup.topic_entry.subtopic.clone(),
            goal: self.setup.goal.text.clone(),
            principles: self
                .setup
                .principles
                .iter()
                .map(|p| PrincipleRef {
                    id: p.id,
                    text: p.text.clone(),
                })
                .collect(),
            plan: self.plan.clone(),
            messages: self
                .turns
                .iter()
                .map(|t| MessageRow {
                    role: t.role,
                    content: t.text.clone(),
                })
                .collect(),
            terminal: self.terminal_str().to_string(),
            model: self.provenance.generator_model.clone(),
            seed: self.setup.seed,
            anomalies: self
                .anomalies
                .iter()
                .map(|a| anomaly_tag(a).to_string())
                .collect(),
            dropped_anomalous: self.dropped_anomalous,
        }
    }
}

fn anomaly_tag(a: &Anomaly) -> &'static str {
    use crate::transcript::AnomalyKind::*;
    match a.kind {
        RoleAliasDrift => "role_alias_drift",
        MissingSeparator => "missing_separator",
        NonAlternating => "non_alternating",
        TemplateEcho => "template_echo",
        EmptyUtterance => "empty_utterance",
    }
}

/// Everything the aggregator needs about one processed setup.
#[derive(Debug, Clone)]
pub struct ProcessedItem {
    pub index: usize,
    pub record: DialogueRecord,
    pub critique_status: Option<CritiqueStatus>,
    pub pair: Option<PairBundle>,
}

#[derive(Debug, Clone)]
pub struct PairBundle {
    pub pair: PreferencePair,
    pub critique_text: String,
}

impl PairBundle {
    pub fn to_row(&self, dialogue_hash: &str, principle_texts: &BTreeMap<PrincipleId, String>) -> RevisionRow {
        RevisionRow {
            schema_version: SCHEMA_VERSION.to_string(),
            id: dialogue_hash.to_string(),
            context: self
                .pair
                .context
                .iter()
                .map(|t| MessageRow {
                    role: t.role,
                    content: t.text.clone(),
                })
                .collect(),
            chosen: self.pair.chosen.clone(),
            rejected: self.pair.rejected.clone(),
            violated: self
                .pair
                .violated_principles
                .iter()
                .map(|id| PrincipleRef {
                    id: *id,
                    text: principle_texts.get(id).cloned().unwrap_or_default(),
                })
                .collect(),
            critique: self.critique_text.clone(),
            critic_model: self.pair.provenance.critic_model.clone(),
            reviser_model: self.pair.provenance.reviser_model.clone(),
            seed: self.pair.provenance.seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Single-setup processing
// ---------------------------------------------------------------------------

/// Deterministic per-index seed derivation (splitmix64 over the master seed).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct ProcessOptions<'a> {
    pub templates: &'a TemplateSet,
    pub generation: &'a GenerationConfig,
    pub filter_policy: FilterPolicy,
}

fn stage_tag(index: usize, stage: &str) -> String {
    format!("{index:05}-{stage}")
}

/// Structured-output transcripts arrive as JSON and are normalized through
/// the canonical text form so the same grammar checks apply.
#[derive(Deserialize)]
struct StructuredTranscript {
    #[serde(default)]
    plan: Vec<String>,
    turns: Vec<StructuredTurn>,
    #[serde(default)]
    done: bool,
}

#[derive(Deserialize)]
struct StructuredTurn {
    role: Role,
    text: String,
}

fn structured_to_text(raw: &str) -> Option<String> {
    let parsed: StructuredTranscript = serde_json::from_str(raw).ok()?;
    let mut text = String::new();
    if !parsed.plan.is_empty() {
        text.push_str("Plan:\n");
        for (i, step) in parsed.plan.iter().enumerate() {
            text.push_str(&format!("{}. {}\n", i + 1, step));
        }
        text.push_str("---\n");
    }
    for turn in &parsed.turns {
        text.push_str(turn.role.marker());
        text.push(' ');
        text.push_str(&turn.text);
        text.push('\n');
    }
    if parsed.done {
        text.push_str("DONE\n");
    }
    Some(text)
}

fn generation_request(
    prompt_text: String,
    tag: String,
    generation: &GenerationConfig,
    messages: Vec<ChatMessage>,
) -> CompletionRequest {
    CompletionRequest {
        model: String::new(),
        system_prompt: Some(prompt_text),
        messages,
        max_tokens: generation.max_tokens,
        temperature: generation.temperature,
        stop_sequences: generation.stop_sequences.clone(),
        request_tag: tag,
        json_mode: generation.structured_output,
    }
}

/// Generate the raw transcript for one setup. Single-shot asks for the whole
/// dialogue at once; iterative mode requests the plan and then one exchange
/// per call until the model emits `DONE` or the utterance cap is hit.
fn generate_raw(
    index: usize,
    setup: &DialogueSetup,
    gateway: &Gateway,
    opts: &ProcessOptions,
) -> Result<(String, u32, FinishReason), (u32, String)> {
    let prompt = opts.templates.render_dialogue_prompt(setup);
    match opts.generation.mode {
        GenerationMode::SingleShot => {
            let request = generation_request(
                prompt.text,
                stage_tag(index, "dialogue"),
                opts.generation,
                Vec::new(),
            );
            match gateway.complete(WorkerRole::Generator, &request) {
                Ok(result) => Ok((result.text, result.attempt_count, result.finish_reason)),
                Err(e) => Err((attempts_of(&e), e.to_string())),
            }
        }
        GenerationMode::Iterative => {
            let mut attempts = 0u32;
            let mut assembled = String::new();
            let mut history: Vec<ChatMessage> = Vec::new();
            let mut finish = FinishReason::Stop;
            for step in 0..=opts.generation.utterance_cap {
                let tag = stage_tag(index, &format!("iter-{step}"));
                let mut messages = history.clone();
                messages.push(ChatMessage {
                    role: ChatRole::User,
                    content: if step == 0 { "Plan:".into() } else { "Continue.".into() },
                });
                let request = generation_request(
                    prompt.text.clone(),
                    tag,
                    opts.generation,
                    messages.clone(),
                );
                let result = match gateway.complete(WorkerRole::Generator, &request) {
                    Ok(r) => r,
                    Err(e) => return Err((attempts + attempts_of(&e), e.to_string())),
                };
                attempts += result.attempt_count;
                finish = result.finish_reason;
                if !assembled.is_empty() {
                    assembled.push('\n');
                }
                assembled.push_str(result.text.trim_end());
                history = messages;
                history.push(ChatMessage {
                    role: ChatRole::Assistant,
                    content: result.text.clone(),
                });
                if result.text.lines().any(|l| l.trim() == "DONE") {
                    break;
                }
            }
            Ok((assembled, attempts, finish))
        }
    }
}

fn attempts_of(e: &crate::gateway::GatewayError) -> u32 {
    match e {
        crate::gateway::GatewayError::Terminal { attempts, .. }
        | crate::gateway::GatewayError::Exhausted { attempts, .. } => *attempts,
        _ => 0,
    }
}

/// Run the full per-setup flow. Every failure becomes data on the record;
/// this function never errors.
pub fn process_one(
    index: usize,
    setup: DialogueSetup,
    gateway: &Gateway,
    opts: &ProcessOptions,
) -> ProcessedItem {
    let generator_model = gateway.model_id(WorkerRole::Generator);
    let started = Instant::now();

    let (raw, generate_attempts, finish) =
        match generate_raw(index, &setup, gateway, opts) {
            Ok(ok) => ok,
            Err((attempts, cause)) => {
                log_stage(index, "generate", setup.seed, &format!("error: {cause}"), started);
                let record = DialogueRecord::new(
                    setup,
                    Vec::new(),
                    Vec::new(),
                    Terminal::Truncated,
                    Vec::new(),
                    RecordProvenance {
                        generator_model,
                        generate_attempts: attempts,
                        critique_attempts: 0,
                    },
                );
                return ProcessedItem {
                    index,
                    record,
                    critique_status: None,
                    pair: None,
                };
            }
        };
    log_stage(index, "generate", setup.seed, "ok", started);

    let parse_input = if opts.generation.structured_output {
        structured_to_text(&raw).unwrap_or(raw)
    } else {
        raw
    };

    let parse_started = Instant::now();
    let parsed = match parse_transcript(&parse_input) {
        Ok(p) => p,
        Err(e) => {
            log_stage(index, "parse", setup.seed, &format!("error: {e}"), parse_started);
            let record = DialogueRecord::new(
                setup,
                Vec::new(),
                Vec::new(),
                Terminal::Truncated,
                Vec::new(),
                RecordProvenance {
                    generator_model,
                    generate_attempts,
                    critique_attempts: 0,
                },
            );
            return ProcessedItem {
                index,
                record,
                critique_status: None,
                pair: None,
            };
        }
    };
    log_stage(index, "parse", setup.seed, "ok", parse_started);

    let ParsedTranscript {
        plan,
        turns,
        mut terminal,
        anomalies,
    } = parsed;
    if finish == FinishReason::Length || turns.len() > opts.generation.utterance_cap {
        terminal = Terminal::Truncated;
    }

    let mut record = DialogueRecord::new(
        setup,
        plan,
        turns,
        terminal,
        anomalies,
        RecordProvenance {
            generator_model: generator_model.clone(),
            generate_attempts,
            critique_attempts: 0,
        },
    );

    if opts.filter_policy == FilterPolicy::DropAnomalous && !record.anomalies.is_empty() {
        record.dropped_anomalous = true;
        log_stage(index, "filter", record.setup.seed, "dropped_anomalous", Instant::now());
        return ProcessedItem {
            index,
            record,
            critique_status: None,
            pair: None,
        };
    }

    let Some(candidate) = record.violation_candidate().cloned() else {
        return ProcessedItem {
            index,
            record,
            critique_status: None,
            pair: None,
        };
    };

    let critique_started = Instant::now();
    let outcome = run_critique(
        &candidate,
        &record.setup,
        gateway,
        &CritiqueOptions {
            templates: opts.templates,
            request_tag: stage_tag(index, "critique"),
            max_tokens: opts.generation.max_tokens,
            temperature: opts.generation.temperature,
        },
    );
    record.provenance.critique_attempts = outcome.attempts;
    log_stage(
        index,
        "critique",
        record.setup.seed,
        &format!("{:?}", outcome.status),
        critique_started,
    );
    if outcome.status != CritiqueStatus::Confirmed {
        return ProcessedItem {
            index,
            record,
            critique_status: Some(outcome.status),
            pair: None,
        };
    }

    // Revision over the violated principles only, numbered in prompt order.
    let violated: Vec<_> = record
        .setup
        .principles
        .iter()
        .filter(|p| outcome.violated_ids.contains(&p.id))
        .cloned()
        .collect();
    let critique_text = outcome
        .result
        .as_ref()
        .map(|r| r.critique_text.clone())
        .unwrap_or_default();
    let revision_started = Instant::now();
    let revision_prompt = match opts
        .templates
        .render_revision_prompt(&candidate.text, &violated, &critique_text)
    {
        Ok(p) => p,
        Err(e) => {
            log_stage(index, "revise", record.setup.seed, &format!("error: {e}"), revision_started);
            return ProcessedItem {
                index,
                record,
                critique_status: Some(CritiqueStatus::Confirmed),
                pair: None,
            };
        }
    };
    let request = CompletionRequest {
        model: String::new(),
        system_prompt: None,
        messages: vec![ChatMessage {
            role: ChatRole::User,
            content: revision_prompt.text,
        }],
        max_tokens: opts.generation.max_tokens,
        temperature: opts.generation.temperature,
        stop_sequences: Vec::new(),
        request_tag: stage_tag(index, "revision"),
        json_mode: false,
    };
    let reply = match gateway.complete(WorkerRole::Reviser, &request) {
        Ok(r) => r,
        Err(e) => {
            log_stage(index, "revise", record.setup.seed, &format!("error: {e}"), revision_started);
            return ProcessedItem {
                index,
                record,
                critique_status: Some(CritiqueStatus::Confirmed),
                pair: None,
            };
        }
    };
    let revision = parse_revision(&reply.text, &candidate.text);
    if !revision.is_valid() {
        log_stage(
            index,
            "revise",
            record.setup.seed,
            &format!("invalid: {:?}", revision.defects),
            revision_started,
        );
        return ProcessedItem {
            index,
            record,
            critique_status: Some(CritiqueStatus::Confirmed),
            pair: None,
        };
    }
    let provenance = PairProvenance {
        generator_model,
        critic_model: gateway.model_id(WorkerRole::Critic),
        reviser_model: gateway.model_id(WorkerRole::Reviser),
        seed: record.setup.seed,
    };
    match build_preference_pair(&record, &revision, &outcome, provenance) {
        Ok(pair) => {
            log_stage(index, "revise", record.setup.seed, "pair_emitted", revision_started);
            ProcessedItem {
                index,
                record,
                critique_status: Some(CritiqueStatus::Confirmed),
                pair: Some(PairBundle {
                    pair,
                    critique_text,
                }),
            }
        }
        Err(e) => {
            log_stage(index, "pair", record.setup.seed, &format!("error: {e}"), revision_started);
            ProcessedItem {
                index,
                record,
                critique_status: Some(CritiqueStatus::Confirmed),
                pair: None,
            }
        }
    }
}

fn log_stage(index: usize, stage: &str, seed: u64, outcome: &str, started: Instant) {
    log::info!(
        target: "sdsd::pipeline",
        "stage={stage} index={index} seed={seed} outcome=\"{outcome}\" latency_ms={}",
        started.elapsed().as_millis()
    );
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub completed: usize,
    pub target_count: usize,
    pub counters: Counters,
    pub confirmed_fraction: f64,
    pub dialogues_path: PathBuf,
    pub revisions_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub history: ViolationHistory,
}

pub fn run(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    execute(config, None)
}

pub fn resume(checkpoint_path: &Path, config: &RunConfig) -> Result<RunSummary, PipelineError> {
    let checkpoint = CheckpointState::load(checkpoint_path)?;
    if checkpoint.master_seed != config.master_seed {
        return Err(PipelineError::Checkpoint {
            reason: format!(
                "master seed mismatch: checkpoint has {}, config has {}; resuming would \
                 sample different setups",
                checkpoint.master_seed, config.master_seed
            ),
        });
    }
    if checkpoint.run_id != config.run_id() {
        return Err(PipelineError::Checkpoint {
            reason: format!(
                "run id mismatch: checkpoint {:?}, config {:?}",
                checkpoint.run_id,
                config.run_id()
            ),
        });
    }
    if checkpoint.target_count != config.target_count {
        return Err(PipelineError::Checkpoint {
            reason: format!(
                "target count mismatch: checkpoint {}, config {}",
                checkpoint.target_count, config.target_count
            ),
        });
    }
    execute(config, Some(checkpoint))
}

fn build_backend(
    config: &BackendConfig,
    role: WorkerRole,
) -> Result<Arc<dyn crate::gateway::CompletionBackend>, PipelineError> {
    match config {
        BackendConfig::Openai(http) => Ok(Arc::new(HttpBackend::new(http, role))),
        BackendConfig::Scripted { fixtures_dir } => {
            let backend =
                ScriptedBackend::from_dir(fixtures_dir).map_err(|source| PipelineError::Io {
                    path: fixtures_dir.display().to_string(),
                    source,
                })?;
            Ok(Arc::new(backend))
        }
    }
}

/// Construct the role-bound gateway a config describes (used by the CLI's
/// single-stage subcommands as well as full runs).
pub fn build_gateway(config: &RunConfig) -> Result<Gateway, PipelineError> {
    let policy = config.retry.to_policy();
    let generator = RoleBinding::new(
        build_backend(&config.backends.generator, WorkerRole::Generator)?,
        policy.clone(),
    );
    let critic = match &config.backends.critic {
        Some(c) => Some(RoleBinding::new(
            build_backend(c, WorkerRole::Critic)?,
            policy.clone(),
        )),
        None => None,
    };
    let reviser = match &config.backends.reviser {
        Some(c) => Some(RoleBinding::new(
            build_backend(c, WorkerRole::Reviser)?,
            policy.clone(),
        )),
        None => None,
    };
    let limiter = RoleLimiter::new(
        config.concurrency.generator,
        config.concurrency.critic,
        config.concurrency.reviser,
    );
    Ok(Gateway::new(generator, critic, reviser, limiter))
}

fn initial_weights(
    config: &RunConfig,
    registry: &Registry,
) -> Result<BTreeMap<PrincipleId, f64>, PipelineError> {
    if !config.rebalancing.enabled {
        return Ok(registry.uniform_weights());
    }
    // Weights are frozen at run start from previous data, so setup sampling
    // stays a pure function of the master seed and the run can be resumed.
    let history = match &config.rebalancing.history_path {
        None => ViolationHistory::new(),
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            serde_json::from_str(&raw)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
    };
    Ok(registry.rebalanced_weights(&history))
}

fn execute(config: &RunConfig, checkpoint: Option<CheckpointState>) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let run_id = config.run_id();
    let registry = Registry::from_paths(
        config.registry.principles.as_deref(),
        config.registry.goals.as_deref(),
        config.registry.topics.as_deref(),
    )?;
    let templates = match &config.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::bundled(),
    }
    .substitute_goal_in_scaffold(config.generation.substitute_goal_in_scaffold);
    let weights = initial_weights(config, &registry)?;
    let gateway = build_gateway(config)?;
    let principle_texts: BTreeMap<PrincipleId, String> = registry
        .principles()
        .iter()
        .map(|p| (p.id, p.text.clone()))
        .collect();

    fs::create_dir_all(&config.output_dir).map_err(|source| PipelineError::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;

    let resuming = checkpoint.is_some();
    let mut state = checkpoint.unwrap_or_else(|| CheckpointState {
        schema_version: CHECKPOINT_VERSION.to_string(),
        run_id: run_id.clone(),
        master_seed: config.master_seed,
        target_count: config.target_count,
        completed: 0,
        completed_seeds: Vec::new(),
        counters: Counters::default(),
        history: ViolationHistory::new(),
    });

    let dialogues = if resuming {
        JsonlAppender::append_to(&config.dialogues_path(), config.fsync)?
    } else {
        JsonlAppender::create(&config.dialogues_path(), config.fsync)?
    };
    let revisions = if resuming {
        JsonlAppender::append_to(&config.revisions_path(), config.fsync)?
    } else {
        JsonlAppender::create(&config.revisions_path(), config.fsync)?
    };

    let opts = ProcessOptions {
        templates: &templates,
        generation: &config.generation,
        filter_policy: config.filter_policy,
    };

    let start_index = state.completed;
    let remaining = config.target_count - start_index;
    let workers = config
        .concurrency
        .workers
        .unwrap_or(
            config
                .concurrency
                .generator
                .max(config.concurrency.critic)
                .max(config.concurrency.reviser),
        )
        .max(1)
        .min(remaining.max(1));
    let stop = AtomicBool::new(false);
    let stop_after = config.max_completions.unwrap_or(usize::MAX).max(1);

    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let (idx_tx, idx_rx) = crossbeam_channel::unbounded::<usize>();
        let (res_tx, res_rx) = crossbeam_channel::unbounded::<ProcessedItem>();
        for index in start_index..config.target_count {
            idx_tx.send(index).expect("receiver alive");
        }
        drop(idx_tx);

        for _ in 0..workers {
            let idx_rx = idx_rx.clone();
            let res_tx = res_tx.clone();
            let registry = &registry;
            let weights = &weights;
            let gateway = &gateway;
            let opts = &opts;
            let stop = &stop;
            let master_seed = config.master_seed;
            scope.spawn(move || {
                while let Ok(index) = idx_rx.recv() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let seed = derive_seed(master_seed, index as u64);
                    let setup = registry
                        .sample_setup(seed, weights)
                        .expect("registry and weights validated at startup");
                    let item = process_one(index, setup, gateway, opts);
                    if res_tx.send(item).is_err() {
                        break;
                    }
                }
            });
        }
        drop(res_tx);

        let mut pending: BTreeMap<usize, ProcessedItem> = BTreeMap::new();
        let mut flushed_this_invocation = 0usize;
        while state.completed < config.target_count {
            let Ok(item) = res_rx.recv() else {
                break; // workers stopped early
            };
            pending.insert(item.index, item);
            while flushed_this_invocation < stop_after {
                let Some(item) = pending.remove(&state.completed) else {
                    break;
                };
                flush_item(
                    &item,
                    &mut state,
                    &registry,
                    &principle_texts,
                    &dialogues,
                    &revisions,
                )?;
                flushed_this_invocation += 1;
                if state.completed % config.checkpoint_interval == 0 {
                    state.save(&config.checkpoint_path())?;
                }
            }
            if flushed_this_invocation >= stop_after && state.completed < config.target_count {
                stop.store(true, Ordering::SeqCst);
                break;
            }
        }
        Ok(())
    })?;

    state.save(&config.checkpoint_path())?;
    Ok(RunSummary {
        run_id,
        completed: state.completed,
        target_count: config.target_count,
        confirmed_fraction: state.counters.confirmed_fraction(),
        counters: state.counters,
        dialogues_path: config.dialogues_path(),
        revisions_path: config.revisions_path(),
        checkpoint_path: config.checkpoint_path(),
        history: state.history,
    })
}

fn flush_item(
    item: &ProcessedItem,
    state: &mut CheckpointState,
    registry: &Registry,
    principle_texts: &BTreeMap<PrincipleId, String>,
    dialogues: &JsonlAppender,
    revisions: &JsonlAppender,
) -> Result<(), PipelineError> {
    let record = &item.record;
    state.counters.generated += 1;
    if record.dropped_anomalous {
        state.counters.dropped_anomalous += 1;
    } else {
        match record.terminal {
            Terminal::Truncated => state.counters.parse_failed += 1,
            Terminal::Done => state.counters.done_terminal += 1,
            Terminal::NoDone => state.counters.no_done_terminal += 1,
        }
    }
    if item.critique_status == Some(CritiqueStatus::Confirmed) {
        state.counters.confirmed += 1;
    }
    dialogues.append_row(&record.to_row())?;
    if let Some(bundle) = &item.pair {
        revisions.append_row(&bundle.to_row(&record.content_hash, principle_texts))?;
        state.counters.pairs_emitted += 1;
        state
            .history
            .record(&bundle.pair.violated_principles, registry)?;
    }
    state.completed += 1;
    state.completed_seeds.push(record.setup.seed);
    Ok(())
}
