//! Shared scripted-run scaffolding for the integration and acceptance tests.

use std::fs;
use std::path::Path;

use sdsd_core::pipeline::{
    BackendConfig, BackendsConfig, Concurrency, FilterPolicy, GenerationConfig, RebalancingConfig,
    RegistrySources, RetryConfig, RunConfig,
};

/// Write generation/critique/revision fixtures for `target` setups.
/// Critiques confirm a violation exactly for the indices in `confirm`.
pub fn write_mock_fixtures(dir: &Path, target: usize, confirm: &[usize]) {
    fs::create_dir_all(dir).unwrap();
    for index in 0..target {
        let transcript = format!(
            "Plan:\n\
             1. Open the conversation about item {index}.\n\
             2. Steer the exchange toward the planned breach.\n\
             3. Close with the final statement.\n\
             ---\n\
             USER: Tell me about item {index}, please.\n\
             AGENT: Happy to help with item {index}. What do you want to know?\n\
             USER: Is the rumor about it true?\n\
             AGENT: Absolutely true, everyone confirms rumor {index}.\n\
             DONE\n"
        );
        fs::write(dir.join(format!("{index:05}-dialogue.txt")), transcript).unwrap();
        let critique = if confirm.contains(&index) {
            format!(
                "CRITIQUE: The final statement asserts rumor {index} as fact without any \
                 evidence, which misleads the user. PRINCIPLES VIOLATED: [1]\nDONE\n"
            )
        } else {
            "CRITIQUE: The last utterance stays within the rules; nothing severe. \
             PRINCIPLES VIOLATED: NONE\nDONE\n"
                .to_string()
        };
        fs::write(dir.join(format!("{index:05}-critique.txt")), critique).unwrap();
        if confirm.contains(&index) {
            let revision = format!(
                "REVISED UTTERANCE: I can't confirm rumor {index}; here is what is actually \
                 documented about item {index}.\nDONE\n"
            );
            fs::write(dir.join(format!("{index:05}-revision.txt")), revision).unwrap();
        }
    }
}

/// A run config wired to scripted fixtures, deterministic seed, 4 workers.
pub fn mock_config(fixtures_dir: &Path, out_dir: &Path, target: usize, seed: u64) -> RunConfig {
    RunConfig {
        run_id: Some("mock".to_string()),
        target_count: target,
        master_seed: seed,
        output_dir: out_dir.to_path_buf(),
        backends: BackendsConfig {
            generator: BackendConfig::Scripted {
                fixtures_dir: fixtures_dir.to_path_buf(),
            },
            critic: None,
            reviser: None,
        },
        concurrency: Concurrency {
            generator: 4,
            critic: 4,
            reviser: 4,
            workers: Some(4),
        },
        retry: RetryConfig {
            max_attempts: 3,
            base_backoff_ms: 0,
            backoff_multiplier: 2.0,
        },
        generation: GenerationConfig::default(),
        filter_policy: FilterPolicy::DropAnomalous,
        rebalancing: RebalancingConfig::default(),
        checkpoint_interval: 50,
        registry: RegistrySources::default(),
        templates_dir: None,
        max_completions: None,
        fsync: Default::default(),
    }
}

#[allow(dead_code)]
pub fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.to_string())
        .collect()
}
