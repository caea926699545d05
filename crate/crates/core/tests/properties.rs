//! Property tests for the module invariants: parser totality and round-trip,
//! sampling determinism, rebalancing shape, preference-probability algebra,
//! and dataset row round-trips.

use std::collections::BTreeMap;

use proptest::prelude::*;

use sdsd_core::analytics::{
    boltzmann_preference_probability, PreferenceQuery, Tokenizer, WhitespaceTokenizer,
};
use sdsd_core::dataset::{
    read_rows, DialogueRow, FsyncPolicy, JsonlAppender, MessageRow, PrincipleRef, SCHEMA_VERSION,
};
use sdsd_core::registry::{Registry, ViolationHistory};
use sdsd_core::transcript::{parse_transcript, ParsedTranscript, Role, Terminal, Turn};

fn safe_line() -> impl Strategy<Value = String> {
    // Lowercase first character so a line can never collide with a role
    // marker, DONE, or the --- separator.
    proptest::string::string_regex("[a-z][a-z0-9 ,.!?']{0,38}")
        .unwrap()
        .prop_map(|s| s.trim_end().to_string())
        .prop_filter("non-empty", |s| !s.is_empty())
}

fn utterance() -> impl Strategy<Value = String> {
    proptest::collection::vec(safe_line(), 1..3).prop_map(|lines| lines.join("\n"))
}

fn transcript() -> impl Strategy<Value = ParsedTranscript> {
    (
        proptest::collection::vec(safe_line(), 0..4),
        proptest::collection::vec(utterance(), 1..9),
        proptest::bool::ANY,
    )
        .prop_map(|(plan, texts, done)| {
            let turns: Vec<Turn> = texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| Turn {
                    role: if i % 2 == 0 { Role::User } else { Role::Agent },
                    text,
                })
                .collect();
            ParsedTranscript {
                plan,
                turns,
                terminal: if done { Terminal::Done } else { Terminal::NoDone },
                anomalies: vec![],
            }
        })
}

proptest! {
    #[test]
    fn parser_is_total_over_arbitrary_text(raw in ".{0,400}") {
        // Classified result or error, never a panic.
        let _ = parse_transcript(&raw);
    }

    #[test]
    fn parser_is_total_over_marker_shaped_text(
        raw in "(USER:|AGENT:|Plan:|DONE|---|[a-z ]{0,12}\n){0,24}"
    ) {
        let _ = parse_transcript(&raw);
    }

    #[test]
    fn canonical_round_trip(t in transcript()) {
        let text = t.to_canonical_text();
        let reparsed = parse_transcript(&text).unwrap();
        prop_assert!(t.structurally_eq(&reparsed));
        prop_assert!(reparsed.anomalies.is_empty());
    }

    #[test]
    fn violation_candidate_implies_done(t in transcript()) {
        if t.violation_candidate().is_some() {
            prop_assert_eq!(t.terminal, Terminal::Done);
        }
    }

    #[test]
    fn rebalanced_weights_shape(counts in proptest::collection::vec(0u64..2000, 127)) {
        let registry = Registry::bundled();
        let map: BTreeMap<u32, u64> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32 + 1, c))
            .collect();
        let history = ViolationHistory::with_counts(map.clone());
        let weights = registry.rebalanced_weights(&history);

        let sum: f64 = weights.values().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(weights.values().all(|w| *w > 0.0));

        // Ordering: ascending count (ties by id) equals descending weight
        // (ties by id).
        let mut by_count: Vec<u32> = map.keys().copied().collect();
        by_count.sort_by(|a, b| map[a].cmp(&map[b]).then(a.cmp(b)));
        let mut by_weight: Vec<u32> = map.keys().copied().collect();
        by_weight.sort_by(|a, b| {
            weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(b))
        });
        prop_assert_eq!(by_count, by_weight);
    }

    #[test]
    fn update_history_is_associative(
        a in proptest::collection::vec(1u32..=127, 0..12),
        b in proptest::collection::vec(1u32..=127, 0..12),
    ) {
        let registry = Registry::bundled();
        let mut split = ViolationHistory::new();
        split.record(&a, &registry).unwrap();
        split.record(&b, &registry).unwrap();

        let mut joined = ViolationHistory::new();
        let concat: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
        joined.record(&concat, &registry).unwrap();

        prop_assert_eq!(split.counts(), joined.counts());
    }

    #[test]
    fn sampling_is_pure(seed in any::<u64>()) {
        let registry = Registry::bundled();
        let weights = registry.uniform_weights();
        let a = registry.sample_setup(seed, &weights).unwrap();
        let b = registry.sample_setup(seed, &weights).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn boltzmann_complement_and_shift(
        r0 in -50.0f64..50.0,
        r1 in -50.0f64..50.0,
        beta in 0.0f64..10.0,
        shift in -25.0f64..25.0,
    ) {
        let q = PreferenceQuery { reward_0: r0, reward_1: r1, beta };
        let p = boltzmann_preference_probability(q).unwrap();
        let p_swapped = boltzmann_preference_probability(q.swap()).unwrap();
        prop_assert!((p + p_swapped - 1.0).abs() < 1e-12);

        let shifted = boltzmann_preference_probability(PreferenceQuery {
            reward_0: r0 + shift,
            reward_1: r1 + shift,
            beta,
        })
        .unwrap();
        prop_assert!((p - shifted).abs() < 1e-12);
    }

    // Strictness claims only hold where f64 can still tell the odds apart;
    // beyond beta*|r0-r1| of roughly 36 the probability rounds to 0 or 1.
    #[test]
    fn boltzmann_monotonic_in_rewards(
        r0 in -3.0f64..3.0,
        r1 in -3.0f64..3.0,
        beta in 0.01f64..3.0,
        bump in 0.01f64..2.0,
    ) {
        let base = boltzmann_preference_probability(PreferenceQuery {
            reward_0: r0,
            reward_1: r1,
            beta,
        })
        .unwrap();
        let better = boltzmann_preference_probability(PreferenceQuery {
            reward_0: r0 + bump,
            reward_1: r1,
            beta,
        })
        .unwrap();
        let worse = boltzmann_preference_probability(PreferenceQuery {
            reward_0: r0,
            reward_1: r1 + bump,
            beta,
        })
        .unwrap();
        prop_assert!(better > base);
        prop_assert!(worse < base);
        prop_assert!(base > 0.0 && base < 1.0);
    }

    #[test]
    fn whitespace_token_counts_are_subadditive(a in ".{0,60}", b in ".{0,60}") {
        let t = WhitespaceTokenizer;
        let joined = format!("{a}{b}");
        prop_assert!(t.count(&joined) <= t.count(&a) + t.count(&b) + 1);
    }

    #[test]
    fn dialogue_rows_round_trip_through_disk(
        texts in proptest::collection::vec(utterance(), 1..7),
        seed in any::<u64>(),
    ) {
        let messages: Vec<MessageRow> = texts
            .into_iter()
            .enumerate()
            .map(|(i, content)| MessageRow {
                role: if i % 2 == 0 { Role::User } else { Role::Agent },
                content,
            })
            .collect();
        let row = DialogueRow {
            schema_version: SCHEMA_VERSION.into(),
            id: format!("{seed:016x}"),
            domain: "d".into(),
            topic: "t".into(),
            subtopic: "s".into(),
            goal: "Have the agent entertain the user.".into(),
            principles: vec![PrincipleRef { id: 1, text: "Do not be unhelpful.".into() }],
            plan: vec!["step".into()],
            messages,
            terminal: "no_done".into(),
            model: "m".into(),
            seed,
            anomalies: vec![],
            dropped_anomalous: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let appender = JsonlAppender::create(&path, FsyncPolicy::Flush).unwrap();
        appender.append_row(&row).unwrap();
        let rows: Vec<DialogueRow> = read_rows(&path).unwrap();
        prop_assert_eq!(rows, vec![row]);
    }
}
