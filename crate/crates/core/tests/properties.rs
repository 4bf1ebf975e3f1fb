use std::collections::BTreeSet;

use copydst::autodiff::softmax_values;
use copydst::data::{generate_synthetic, make_unseen_split, GrammarConfig, Ontology};
use copydst::embeddings::{EmbeddingConfig, EmbeddingTable};
use copydst::eval::{accumulate_goal, evaluate_predictions};
use copydst::train::TrainConfig;
use copydst::{Goal, Tracker};
use proptest::prelude::*;

const WORDS: [&str; 12] = [
    "i", "want", "thai", "food", "north", "indian", "cheap", "no", "korean", "area", "the", "please",
];
const VALUES: [&str; 7] = ["thai", "north indian", "indian", "cheap", "korean", "north", "modern european"];

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_size: 3,
        word_dim: 4,
        ngram_dim: 3,
        seed,
        ..Default::default()
    }
}

fn tracker_with(values: &[&str], seed: u64) -> Tracker {
    let cfg = small_config(seed);
    let mut ont = Ontology::new();
    ont.add_slot("food", values).unwrap();
    Tracker::new(&cfg, EmbeddingTable::hashed(cfg.embedding_config()), &ont).unwrap()
}

fn utterance() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..7)
        .prop_map(|ws| vec![ws.join(" ")])
}

fn food_scores(tracker: &Tracker, utt: &[String]) -> copydst::decoder::SlotScores {
    let turn = tracker.prepare(&[], utt);
    tracker.score_turn(&turn).unwrap().into_iter().find(|s| s.slot == "food").unwrap()
}

fn goal(value: Option<&str>) -> Goal {
    value.map(|v| [("food".to_owned(), v.to_owned())].into()).unwrap_or_default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax_values(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn every_string_embeds(token in "\\PC{0,12}", seed in any::<u64>()) {
        let table = EmbeddingTable::hashed(EmbeddingConfig { word_dim: 5, ngram_dim: 3, hash_seed: seed });
        let a = table.embed_token(&token);
        prop_assert_eq!(a.len(), 8);
        prop_assert!(a.iter().all(|x| x.is_finite()));
        prop_assert_eq!(a, table.embed_token(&token));
    }

    #[test]
    fn extension_leaves_existing_scores_bit_identical(
        seed in any::<u64>(),
        k in 1usize..4,
        utt in utterance(),
        extra in "[a-z]{3,8}( [a-z]{3,8})?",
    ) {
        let mut tracker = tracker_with(&VALUES[..k], seed);
        prop_assume!(tracker.decoder("food").unwrap().index_of(&extra).is_none());
        let before = food_scores(&tracker, &utt);
        let hash = copydst::checkpoint::payload_hash(&tracker);
        tracker.extend_candidates("food", &extra).unwrap();
        let after = food_scores(&tracker, &utt);
        prop_assert_eq!(&after.probability[..k], &before.probability[..]);
        prop_assert_eq!(&after.attention, &before.attention);
        prop_assert_eq!(copydst::checkpoint::payload_hash(&tracker), hash);
    }

    #[test]
    fn candidate_order_is_equivariant(seed in any::<u64>(), perm in Just((0..VALUES.len()).collect::<Vec<_>>()).prop_shuffle(), utt in utterance()) {
        let base = food_scores(&tracker_with(&VALUES, seed), &utt);
        let shuffled: Vec<&str> = perm.iter().map(|&i| VALUES[i]).collect();
        let permuted = food_scores(&tracker_with(&shuffled, seed), &utt);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.probability[j].to_bits(), base.probability[i].to_bits());
        }
    }

    #[test]
    fn copy_is_local_and_probabilities_are_open(seed in any::<u64>(), utt in utterance()) {
        let tracker = tracker_with(&VALUES, seed);
        let scores = food_scores(&tracker, &utt);
        let tokens = tracker.prepare(&[], &utt).tokens;
        for (i, value) in scores.values.iter().enumerate() {
            if !value.split(' ').any(|t| tokens.iter().any(|x| x == t)) {
                prop_assert_eq!(scores.copy[i], 0.0);
            }
            let p = scores.probability[i];
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn accumulation_overwrites_or_carries(prev in prop::option::of(prop::sample::select(VALUES.to_vec())), turn in prop::option::of(prop::sample::select(VALUES.to_vec()))) {
        let next = accumulate_goal(&goal(prev), &goal(turn));
        prop_assert_eq!(next, goal(turn.or(prev)));
    }

    #[test]
    fn joint_goal_never_exceeds_slot_accuracy(seed in 0u64..1000, noise in prop::collection::vec(0u8..4, 200)) {
        let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 6, seed).unwrap();
        let slots: Vec<String> = ont.slots().map(str::to_owned).collect();
        let mut n = noise.iter().cycle();
        let predicted: Vec<Vec<Goal>> = corpus
            .dialogues
            .iter()
            .map(|d| {
                d.turns
                    .iter()
                    .map(|t| {
                        let mut g = t.goal.clone();
                        for s in &slots {
                            if *n.next().unwrap() == 0 {
                                g.insert(s.clone(), "italian".into());
                            }
                        }
                        g
                    })
                    .collect()
            })
            .collect();
        let report = evaluate_predictions(&corpus, &predicted, &slots, None).unwrap();
        for s in &report.slots {
            prop_assert!(report.joint_goal <= s.overall.accuracy);
        }
    }

    #[test]
    fn split_removes_every_heldout_value(seed in any::<u64>(), fraction in 0.1f64..0.6) {
        let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 40, 5).unwrap();
        let (train, held) = make_unseen_split(&corpus, &ont, "food", fraction, seed).unwrap();
        let held: BTreeSet<String> = held.into_iter().collect();
        for t in train.turns() {
            prop_assert!(t.goal.get("food").is_none_or(|v| !held.contains(v)));
            prop_assert!(t.turn_label.get("food").is_none_or(|v| !held.contains(v)));
        }
    }

    #[test]
    fn synthetic_labels_are_spoken(seed in any::<u64>()) {
        let (corpus, _) = generate_synthetic(&GrammarConfig::restaurant(), 5, seed).unwrap();
        for t in corpus.turns() {
            let padded = format!(" {} ", t.tokens.join(" "));
            for v in t.turn_label.values() {
                prop_assert!(padded.contains(&format!(" {v} ")), "{v:?} not in {padded:?}");
            }
        }
    }
}
