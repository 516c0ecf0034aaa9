mod common;

use std::collections::BTreeMap;

use common::{brute_force_top_k, WORDS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segrename::candidates::{build_prompt, validate_response, Provenance, MAX_CANDIDATES, MIN_CANDIDATES, SYSTEM_MESSAGE, SYSTEM_MESSAGE_NO_CONTEXT};
use segrename::context::{rank_context_names, CaptionCorpus, ContextNames, ExtractOptions, RuleTagger};
use segrename::names::{embed_name_ensembled, vild_templates, HashingEncoder};
use segrename::renovation::{build_upgraded_class_table, name_distribution};
use segrename::store::{ClassTable, NameAssignment, Verification};


fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" ")), 0..12)
}

proptest! {
    #[test]
    fn context_ranking_matches_brute_force(captions in corpus_strategy(), k in 1usize..12, adjectives: bool) {
        let options = ExtractOptions { adjective_pass_through: adjectives };
        let corpus = CaptionCorpus { class_id: 7, captions: captions.clone() };
        let ranked = rank_context_names(&corpus, k, &RuleTagger, &options).unwrap();
        prop_assert!(ranked.entries.len() <= k);
        prop_assert!(ranked.entries.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(ranked.entries, brute_force_top_k(&captions, k, &options));
    }

    #[test]
    fn prompts_are_pure(original in "[a-z]{1,8}( [a-z]{1,8})?", nouns in prop::collection::vec(("[a-z]{1,8}", 1u32..50), 0..10)) {
        let mut classes = ClassTable::default();
        classes.insert(3, &[original.as_str()], false);
        let class = classes.get(3).unwrap();
        let context = ContextNames { class_id: 3, entries: nouns.clone() };
        let a = build_prompt(class, &context, true);
        let b = build_prompt(class, &context.clone(), true);
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(&a.system_message, SYSTEM_MESSAGE);
        let prefix = format!("Original name: {original}, context names (with frequencies) are ");
        prop_assert!(a.user_message.starts_with(&prefix));
        let plain = build_prompt(class, &context, false);
        prop_assert_eq!(&plain.system_message, SYSTEM_MESSAGE_NO_CONTEXT);
        prop_assert!(!plain.user_message.contains("context names"));
        prop_assert_eq!(plain, build_prompt(class, &ContextNames { class_id: 3, entries: Vec::new() }, false));
    }

    #[test]
    fn fuzzed_responses_give_a_valid_pool_or_an_error(
        items in prop::collection::vec("[ \\-*•0-9.)\"'“A-Za-z]{0,14}", 0..16),
        seps in prop::collection::vec(prop::sample::select(vec![",", "\n", ";", ", ", "\n\n"]), 16),
    ) {
        let raw: String = items.iter().zip(&seps).map(|(i, s)| format!("{i}{s}")).collect();
        match validate_response(1, &raw, Provenance::Llm) {
            Err(_) => {}
            Ok(pool) => {
                prop_assert!((MIN_CANDIDATES..=MAX_CANDIDATES).contains(&pool.candidates.len()));
                let mut seen = std::collections::BTreeSet::new();
                for c in &pool.candidates {
                    prop_assert!(!c.is_empty());
                    prop_assert_eq!(c.trim(), c.as_str());
                    prop_assert_eq!(&c.to_lowercase(), c);
                    prop_assert!(!c.contains("  "));
                    prop_assert!(seen.insert(c.clone()));
                }
            }
        }
    }

    #[test]
    fn template_order_does_not_change_the_embedding(name in "[a-z]{1,10}( [a-z]{1,10})?", seed in any::<u64>()) {
        let encoder = HashingEncoder::new(32, 5);
        let mut templates = vild_templates();
        let a = embed_name_ensembled(&name, &templates, &encoder).unwrap();
        templates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = embed_name_ensembled(&name, &templates, &encoder).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn upgraded_table_ignores_order_and_is_idempotent(
        picks in prop::collection::vec((1u32..5, 0usize..4), 1..40),
        seed in any::<u64>(),
    ) {
        let mut original = ClassTable::default();
        for c in 1..5u32 {
            original.insert(c, &[format!("class{c}").as_str()], c % 2 == 0);
        }
        // Names are shared across classes on purpose.
        let pool = ["lawn", "meadow", "pasture", "sky"];
        let assignments: Vec<NameAssignment> = picks
            .iter()
            .enumerate()
            .map(|(i, &(class_id, n))| NameAssignment {
                segment_id: i as u64,
                class_id,
                ranked: vec![(pool[n].to_string(), 0.5)],
                chosen: pool[n].to_string(),
                verification: Verification::Unverified,
                replacement_class: None,
                cross_class_suggestion: None,
            })
            .collect();
        let up = build_upgraded_class_table(&assignments, &original);
        let mut shuffled = assignments.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&up, &build_upgraded_class_table(&shuffled, &original));

        let again: Vec<NameAssignment> = assignments
            .iter()
            .map(|a| NameAssignment { class_id: up.id_of(&a.chosen).unwrap(), ..a.clone() })
            .collect();
        prop_assert_eq!(&up.table, &build_upgraded_class_table(&again, &up.table).table);

        let mut total = 0;
        for c in original.ids() {
            let rows = name_distribution(&assignments, &original, c).unwrap();
            let n: usize = rows.iter().map(|r| r.1).sum();
            prop_assert_eq!(n, assignments.iter().filter(|a| a.class_id == c).count());
            prop_assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
            total += n;
        }
        prop_assert_eq!(total, assignments.len());
    }
}

#[test]
fn field_context_golden() {
    let corpus: Vec<(&str, usize)> = vec![
        ("A lush field with grass under the sky", 11),
        ("Green hillside next to a road", 4),
        ("Lush green field", 8),
        ("A grassy road", 3),
        ("View of the lush sky", 11),
        ("A tree near the field", 10),
        ("A rural road", 2),
        ("A cow", 1),
    ];
    let captions = corpus
        .iter()
        .flat_map(|(c, n)| std::iter::repeat_n(c.to_string(), *n))
        .collect();
    let options = ExtractOptions { adjective_pass_through: true };
    let ranked = rank_context_names(&CaptionCorpus { class_id: 1, captions }, 10, &RuleTagger, &options).unwrap();
    assert_eq!(
        ranked.nouns(),
        ["lush", "field", "sky", "green", "grass", "tree", "road", "hillside", "grassy", "rural"]
    );
    let counts: BTreeMap<&str, u32> = ranked.entries.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    assert_eq!(counts["lush"], 30);
    assert_eq!(counts["field"], 29);
}
