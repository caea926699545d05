//! `sdsd` — batch generation of guided self-dialogues and the analytics
//! over the emitted datasets.
//!
//! Exit codes: 0 success, 1 domain error (validation failures, refusals),
//! 2 usage error. Reports go to stdout, diagnostics to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdsd_core::analytics::{
    boltzmann_preference_probability, histogram_text, histogram_tsv, per_goal_table, summarize,
    summarize_revisions, violation_histogram, PreferenceQuery, Tokenizer, VocabTokenizer,
    WhitespaceTokenizer,
};
use sdsd_core::critique::{run_critique, CritiqueOptions};
use sdsd_core::dataset::{check_subset, validate_split, DialogueRow, SplitSchema};
use sdsd_core::gateway::{ChatMessage, ChatRole, CompletionRequest, WorkerRole};
use sdsd_core::pipeline::{self, RunConfig, RunSummary};
use sdsd_core::registry::{DialogueSetup, Goal, Principle, Registry, TopicEntry, ViolationHistory};
use sdsd_core::revision::parse_revision;
use sdsd_core::templates::TemplateSet;
use sdsd_core::transcript::{parse_transcript, Role, Turn};

#[derive(Parser)]
#[command(
    name = "sdsd",
    version,
    about = "Generate guided self-dialogues and mine them into preference data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full generation pipeline from a config file.
    Generate(GenerateArgs),
    /// Resume an interrupted run from its checkpoint.
    Resume(ResumeArgs),
    /// Summarize a split: example count, turns, token averages.
    Stats(StatsArgs),
    /// Per-principle violation histogram over a revisions split.
    Histogram(HistogramArgs),
    /// Inverse-count sampling weights from accumulated violations.
    Rebalance(RebalanceArgs),
    /// Validate a split file against its schema.
    Validate(ValidateArgs),
    /// Run the critique stage against a single dialogue record.
    Critique(CritiqueArgs),
    /// Run the revision stage against a single dialogue record.
    Revise(ReviseArgs),
    /// Parse one raw transcript and print its structure.
    Parse(ParseArgs),
    /// Evaluate the preference probability for a reward pair.
    Preference(PreferenceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override target_count.
    #[arg(long)]
    count: Option<usize>,
    /// Override master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint file written by a previous run.
    #[arg(long)]
    resume: PathBuf,
    /// Run config (JSON); must match the checkpoint.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemaArg {
    Dialogues,
    Revisions,
}

#[derive(Args)]
struct StatsArgs {
    /// Split file (JSONL).
    #[arg(long)]
    split: PathBuf,
    /// Vocabulary file for token counting; whitespace splitting by default.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Schema of the split; inferred from the file name by default.
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
    /// Also print the per-goal table.
    #[arg(long)]
    per_goal: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct HistogramArgs {
    /// Revisions split file (JSONL).
    #[arg(long)]
    split: PathBuf,
    /// Show the K most-violated principles.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Also show the K least-violated principles.
    #[arg(long, default_value_t = 0)]
    bottom: usize,
    /// Write plot data (principle_id, count, pct) as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct RebalanceArgs {
    /// Derive violation counts from a revisions split.
    #[arg(long, conflicts_with = "history")]
    split: Option<PathBuf>,
    /// Violation history JSON (as written by --save-history or a checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Principles file; bundled constitution by default.
    #[arg(long)]
    principles: Option<PathBuf>,
    /// Write the derived history JSON here (usable as rebalancing.history_path).
    #[arg(long)]
    save_history: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct ValidateArgs {
    /// Split file (JSONL).
    #[arg(long)]
    split: PathBuf,
    /// Schema of the split; inferred from the file name by default.
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
    /// Dialogues split to check the revisions-subset relation against.
    #[arg(long)]
    dialogues: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct CritiqueArgs {
    /// File holding one dialogue row (JSON).
    #[arg(long)]
    record: PathBuf,
    /// Run config supplying the critic backend.
    #[arg(long)]
    config: PathBuf,
    /// Correlation tag for the request (fixture key for scripted backends).
    #[arg(long, default_value = "cli-critique")]
    tag: String,
}

#[derive(Args)]
struct ReviseArgs {
    /// File holding one dialogue row (JSON).
    #[arg(long)]
    record: PathBuf,
    /// File holding the critique text.
    #[arg(long)]
    critique: PathBuf,
    /// Run config supplying the reviser backend.
    #[arg(long)]
    config: PathBuf,
    /// Correlation tag for the request (fixture key for scripted backends).
    #[arg(long, default_value = "cli-revision")]
    tag: String,
}

#[derive(Args)]
struct ParseArgs {
    /// Raw transcript file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct PreferenceArgs {
    /// Reward of the first completion.
    #[arg(long)]
    reward0: f64,
    /// Reward of the second completion.
    #[arg(long)]
    reward1: f64,
    /// Inverse temperature (>= 0).
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

/// Ok(true) = success, Ok(false) = domain failure already reported on stdout.
fn dispatch(command: Command) -> Result<bool, String> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Histogram(args) => cmd_histogram(args),
        Command::Rebalance(args) => cmd_rebalance(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Critique(args) => cmd_critique(args),
        Command::Revise(args) => cmd_revise(args),
        Command::Parse(args) => cmd_parse(args),
        Command::Preference(args) => cmd_preference(args),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, String> {
    RunConfig::from_json_file(path).map_err(|e| e.to_string())
}

fn print_summary(summary: &RunSummary, format: Format) {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(summary).expect("serializable"))
        }
        Format::Tsv => {
            println!("run_id\tcompleted\tgenerated\tparse_failed\tdropped_anomalous\tdone_terminal\tno_done_terminal\tconfirmed\tpairs_emitted\tconfirmed_fraction");
            let c = &summary.counters;
            println!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
                summary.run_id,
                summary.completed,
                c.generated,
                c.parse_failed,
                c.dropped_anomalous,
                c.done_terminal,
                c.no_done_terminal,
                c.confirmed,
                c.pairs_emitted,
                summary.confirmed_fraction
            );
        }
        Format::Text => {
            let c = &summary.counters;
            println!(
                "run {} completed {}/{}",
                summary.run_id, summary.completed, summary.target_count
            );
            println!("  generated          {}", c.generated);
            println!("  parse_failed       {}", c.parse_failed);
            println!("  dropped_anomalous  {}", c.dropped_anomalous);
            println!("  done_terminal      {}", c.done_terminal);
            println!("  no_done_terminal   {}", c.no_done_terminal);
            println!("  confirmed          {}", c.confirmed);
            println!("  pairs_emitted      {}", c.pairs_emitted);
            println!("  confirmed_fraction {:.4}", summary.confirmed_fraction);
            println!("  dialogues          {}", summary.dialogues_path.display());
            println!("  revisions          {}", summary.revisions_path.display());
            println!("  checkpoint         {}", summary.checkpoint_path.display());
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<bool, String> {
    let mut config = load_config(&args.config)?;
    if let Some(count) = args.count {
        config.target_count = count;
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let summary = pipeline::run(&config).map_err(|e| e.to_string())?;
    print_summary(&summary, args.format);
    Ok(true)
}

fn cmd_resume(args: ResumeArgs) -> Result<bool, String> {
    let config = load_config(&args.config)?;
    let summary = pipeline::resume(&args.resume, &config).map_err(|e| e.to_string())?;
    print_summary(&summary, args.format);
    Ok(true)
}

fn tokenizer_from(path: Option<&Path>) -> Result<Box<dyn Tokenizer>, String> {
    match path {
        None => Ok(Box::new(WhitespaceTokenizer)),
        Some(p) => Ok(Box::new(
            VocabTokenizer::from_file(p).map_err(|e| e.to_string())?,
        )),
    }
}

fn infer_schema(path: &Path, explicit: Option<SchemaArg>) -> SplitSchema {
    match explicit {
        Some(SchemaArg::Dialogues) => SplitSchema::Dialogues,
        Some(SchemaArg::Revisions) => SplitSchema::Revisions,
        None => {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.contains("revision") {
                SplitSchema::Revisions
            } else {
                SplitSchema::Dialogues
            }
        }
    }
}

fn cmd_stats(args: StatsArgs) -> Result<bool, String> {
    let tokenizer = tokenizer_from(args.tokenizer.as_deref())?;
    let schema = infer_schema(&args.split, args.schema);
    let summary = match schema {
        SplitSchema::Dialogues => summarize(&args.split, tokenizer.as_ref()),
        SplitSchema::Revisions => summarize_revisions(&args.split, tokenizer.as_ref()),
    }
    .map_err(|e| e.to_string())?;
    match args.format {
        Format::Json => {
            if args.per_goal && schema == SplitSchema::Dialogues {
                let table =
                    per_goal_table(&args.split, tokenizer.as_ref()).map_err(|e| e.to_string())?;
                let combined = serde_json::json!({"summary": summary, "per_goal": table});
                println!("{}", serde_json::to_string_pretty(&combined).expect("serializable"));
            } else {
                println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            }
        }
        Format::Tsv => {
            println!("num_examples\tavg_turns\tavg_prompt_tokens\tavg_response_tokens\tempty");
            println!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{}",
                summary.num_examples,
                summary.avg_turns,
                summary.avg_prompt_tokens,
                summary.avg_response_tokens,
                summary.empty
            );
            if args.per_goal && schema == SplitSchema::Dialogues {
                let table =
                    per_goal_table(&args.split, tokenizer.as_ref()).map_err(|e| e.to_string())?;
                println!("goal\tconversations\tavg_utterances\tavg_tokens_per_message");
                for row in table {
                    println!(
                        "{}\t{}\t{:.4}\t{:.4}",
                        row.goal, row.conversations, row.avg_utterances, row.avg_tokens_per_message
                    );
                }
            }
        }
        Format::Text => {
            println!("num_examples        {}", summary.num_examples);
            println!("avg_turns           {:.1}", summary.avg_turns);
            println!("avg_prompt_tokens   {:.1}", summary.avg_prompt_tokens);
            println!("avg_response_tokens {:.1}", summary.avg_response_tokens);
            if summary.empty {
                println!("note: split is empty");
            }
            if args.per_goal && schema == SplitSchema::Dialogues {
                let table =
                    per_goal_table(&args.split, tokenizer.as_ref()).map_err(|e| e.to_string())?;
                println!();
                println!(
                    "{:<70} {:>6} {:>12} {:>10}",
                    "goal", "convs", "utterances", "tok/msg"
                );
                for row in table {
                    println!(
                        "{:<70} {:>6} {:>12.1} {:>10.1}",
                        row.goal, row.conversations, row.avg_utterances, row.avg_tokens_per_message
                    );
                }
            }
        }
    }
    Ok(true)
}

fn cmd_histogram(args: HistogramArgs) -> Result<bool, String> {
    let histogram = violation_histogram(&args.split).map_err(|e| e.to_string())?;
    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, histogram.to_csv())
            .map_err(|e| format!("{}: {e}", csv_path.display()))?;
    }
    match args.format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&histogram).expect("serializable"))
        }
        Format::Tsv => {
            print!("{}", histogram_tsv(&histogram.top(args.top)));
            if args.bottom > 0 {
                print!("{}", histogram_tsv(&histogram.bottom(args.bottom)));
            }
        }
        Format::Text => {
            println!("total violations: {}", histogram.total);
            println!("top {}:", args.top);
            print!("{}", histogram_text(&histogram.top(args.top)));
            if args.bottom > 0 {
                println!("bottom {}:", args.bottom);
                print!("{}", histogram_text(&histogram.bottom(args.bottom)));
            }
        }
    }
    Ok(true)
}

fn cmd_rebalance(args: RebalanceArgs) -> Result<bool, String> {
    let registry =
        Registry::from_paths(args.principles.as_deref(), None, None).map_err(|e| e.to_string())?;
    let history: ViolationHistory = if let Some(split) = &args.split {
        let histogram = violation_histogram(split).map_err(|e| e.to_string())?;
        ViolationHistory::with_counts(histogram.counts)
    } else if let Some(path) = &args.history {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?
    } else {
        return Err("provide --split or --history".into());
    };
    if let Some(path) = &args.save_history {
        let body = serde_json::to_string_pretty(&history).expect("serializable");
        std::fs::write(path, body).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let weights = registry.rebalanced_weights(&history);
    match args.format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&weights).expect("serializable"))
        }
        Format::Tsv => {
            println!("principle_id\tviolations\tweight");
            for (id, w) in &weights {
                println!("{id}\t{}\t{:.8}", history.count(*id), w);
            }
        }
        Format::Text => {
            println!("{:>5} {:>10} {:>12}", "id", "violations", "weight");
            for (id, w) in &weights {
                println!("{id:>5} {:>10} {:>12.8}", history.count(*id), w);
            }
        }
    }
    Ok(true)
}

fn cmd_validate(args: ValidateArgs) -> Result<bool, String> {
    let schema = infer_schema(&args.split, args.schema);
    let report = validate_split(&args.split, schema).map_err(|e| e.to_string())?;
    let subset = match &args.dialogues {
        Some(dialogues) => Some(check_subset(&args.split, dialogues).map_err(|e| e.to_string())?),
        None => None,
    };
    let clean = report.is_clean() && subset.as_ref().is_none_or(|s| s.holds());
    match args.format {
        Format::Json => {
            let combined = serde_json::json!({"report": report, "subset": subset});
            println!("{}", serde_json::to_string_pretty(&combined).expect("serializable"));
        }
        Format::Tsv => {
            println!("total\tok\terrors\tduplicates");
            println!(
                "{}\t{}\t{}\t{}",
                report.total,
                report.ok,
                report.errors.len(),
                report.duplicates.len()
            );
            for e in &report.errors {
                println!("error\tline {}\t{}", e.line, e.error);
            }
            for (line, id) in &report.duplicates {
                println!("duplicate\tline {line}\t{id}");
            }
        }
        Format::Text => {
            println!(
                "{}: {} rows, {} ok, {} errors, {} duplicates",
                report.path,
                report.total,
                report.ok,
                report.errors.len(),
                report.duplicates.len()
            );
            for e in &report.errors {
                println!("  line {}: {}", e.line, e.error);
            }
            for (line, id) in &report.duplicates {
                println!("  line {line}: duplicate id {id}");
            }
            if let Some(s) = &subset {
                if s.holds() {
                    println!("subset check: every revision has a dialogue ancestor");
                } else {
                    println!("subset check FAILED: {} orphan revision id(s)", s.orphans.len());
                    for id in &s.orphans {
                        println!("  orphan {id}");
                    }
                }
            }
        }
    }
    Ok(clean)
}

fn read_record(path: &Path) -> Result<DialogueRow, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let first_line = raw.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    serde_json::from_str(first_line).map_err(|e| format!("{}: {e}", path.display()))
}

fn setup_from_row(row: &DialogueRow) -> DialogueSetup {
    DialogueSetup {
        topic_entry: TopicEntry {
            domain: row.domain.clone(),
            topic: row.topic.clone(),
            subtopic: row.subtopic.clone(),
        },
        principles: row
            .principles
            .iter()
            .map(|p| Principle {
                id: p.id,
                source: "record".into(),
                text: p.text.clone(),
            })
            .collect(),
        goal: Goal {
            id: 0,
            text: row.goal.clone(),
        },
        seed: row.seed,
    }
}

fn last_agent_turn(row: &DialogueRow) -> Result<Turn, String> {
    let last = row
        .messages
        .last()
        .ok_or_else(|| "record has no messages".to_string())?;
    if last.role != Role::Agent {
        return Err("record does not end with an agent message".into());
    }
    Ok(Turn::new(Role::Agent, last.content.clone()))
}

fn cmd_critique(args: CritiqueArgs) -> Result<bool, String> {
    let row = read_record(&args.record)?;
    let config = load_config(&args.config)?;
    let gateway = pipeline::build_gateway(&config).map_err(|e| e.to_string())?;
    let setup = setup_from_row(&row);
    let candidate = last_agent_turn(&row)?;
    let templates = TemplateSet::bundled();
    let outcome = run_critique(
        &candidate,
        &setup,
        &gateway,
        &CritiqueOptions {
            templates: &templates,
            request_tag: args.tag,
            max_tokens: config.generation.max_tokens,
            temperature: config.generation.temperature,
        },
    );
    println!("{}", serde_json::to_string_pretty(&outcome).expect("serializable"));
    Ok(true)
}

fn cmd_revise(args: ReviseArgs) -> Result<bool, String> {
    let row = read_record(&args.record)?;
    let critique_text = std::fs::read_to_string(&args.critique)
        .map_err(|e| format!("{}: {e}", args.critique.display()))?;
    let config = load_config(&args.config)?;
    let gateway = pipeline::build_gateway(&config).map_err(|e| e.to_string())?;
    let setup = setup_from_row(&row);
    let candidate = last_agent_turn(&row)?;
    let templates = TemplateSet::bundled();
    let prompt = templates
        .render_revision_prompt(&candidate.text, &setup.principles, critique_text.trim())
        .map_err(|e| e.to_string())?;
    let request = CompletionRequest {
        model: String::new(),
        system_prompt: None,
        messages: vec![ChatMessage {
            role: ChatRole::User,
            content: prompt.text,
        }],
        max_tokens: config.generation.max_tokens,
        temperature: config.generation.temperature,
        stop_sequences: vec![],
        request_tag: args.tag,
        json_mode: false,
    };
    let reply = gateway
        .complete(WorkerRole::Reviser, &request)
        .map_err(|e| e.to_string())?;
    let revision = parse_revision(&reply.text, &candidate.text);
    println!("{}", serde_json::to_string_pretty(&revision).expect("serializable"));
    Ok(revision.is_valid())
}

fn cmd_parse(args: ParseArgs) -> Result<bool, String> {
    let raw = std::fs::read_to_string(&args.input)
        .map_err(|e| format!("{}: {e}", args.input.display()))?;
    let parsed = parse_transcript(&raw).map_err(|e| e.to_string())?;
    match args.format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&parsed).expect("serializable"))
        }
        Format::Tsv => {
            let (utterances, turns) = parsed.count_turns();
            println!("plan_steps\tutterances\tturns\tterminal\tanomalies");
            println!(
                "{}\t{}\t{}\t{}\t{}",
                parsed.plan.len(),
                utterances,
                turns,
                terminal_label(&parsed),
                parsed.anomalies.len()
            );
        }
        Format::Text => {
            let (utterances, turns) = parsed.count_turns();
            println!("plan: {} step(s)", parsed.plan.len());
            for (i, step) in parsed.plan.iter().enumerate() {
                println!("  {}. {}", i + 1, step);
            }
            println!(
                "utterances: {utterances} ({turns} turns), terminal {}",
                terminal_label(&parsed)
            );
            for turn in &parsed.turns {
                let label = match turn.role {
                    Role::User => "USER",
                    Role::Agent => "AGENT",
                };
                println!("  {label}: {}", turn.text.replace('\n', " "));
            }
            if parsed.anomalies.is_empty() {
                println!("anomalies: none");
            } else {
                println!("anomalies:");
                for a in &parsed.anomalies {
                    println!("  line {}: {:?}: {}", a.line, a.kind, a.detail);
                }
            }
        }
    }
    Ok(true)
}

fn terminal_label(parsed: &sdsd_core::ParsedTranscript) -> &'static str {
    match parsed.terminal {
        sdsd_core::Terminal::Done => "done",
        sdsd_core::Terminal::NoDone => "no_done",
        sdsd_core::Terminal::Truncated => "truncated",
    }
}

fn cmd_preference(args: PreferenceArgs) -> Result<bool, String> {
    let p = boltzmann_preference_probability(PreferenceQuery {
        reward_0: args.reward0,
        reward_1: args.reward1,
        beta: args.beta,
    })
    .map_err(|e| e.to_string())?;
    println!("{p:.10}");
    Ok(true)
}
