mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use persona_core::dataset::{split_pairs, Example, ExampleRecord};
use persona_core::eval::{build_candidate_sets, gold_rank, hits_at_k, tfidf_rank, IdfTable};
use persona_core::ingest::ContextResponsePair;
use persona_core::model::{batch_loss, Arch, EncoderConfig, Model, PersonaMode};
use persona_core::tensor::{Graph, Tensor};
use persona_core::text::{tokenize, TokenSeq};

use common::random_corpus;

fn pair(i: usize) -> ContextResponsePair {
    ContextResponsePair {
        context_text: format!("context {i}"),
        response_text: format!("response {i}"),
        responder: format!("user{}", i % 7),
        response_id: format!("t1_{i:05}"),
    }
}

fn record(i: usize, response: &str) -> ExampleRecord {
    ExampleRecord {
        persona: Vec::new(),
        context: tokenize(&format!("context {i}")),
        response: tokenize(response),
        responder: format!("user{i}"),
        id: format!("e{i}"),
    }
}

fn ids(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(2u32..20, 1..=max_len)
}

fn example() -> impl Strategy<Value = Example> {
    (proptest::collection::vec(ids(5), 0..4), ids(6), ids(6)).prop_map(|(persona, context, response)| Example {
        persona,
        context,
        response,
        responder: "u".into(),
        id: "e".into(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batch_loss_is_finite_and_non_negative(
        b in 1usize..6,
        d in 1usize..5,
        seed in any::<u64>(),
        scale in 0.1f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let j = g.constant(Tensor::uniform(&[b, d], scale, &mut rng));
        let r = g.constant(Tensor::uniform(&[b, d], scale, &mut rng));
        let loss = batch_loss(&mut g, j, r).unwrap();
        let value = g.value(loss).item();
        prop_assert!(value.is_finite() && value >= 0.0, "loss {value}");
    }

    #[test]
    fn hits_are_monotone_in_k(scores in proptest::collection::vec(-3i32..3, 1..30), gold in any::<prop::sample::Index>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let gold = gold.index(scores.len());
        let rank = gold_rank(&scores, gold);
        let mut previous = false;
        for k in 1..=scores.len() {
            let hit = hits_at_k(&scores, gold, k);
            prop_assert!(!previous || hit);
            prop_assert_eq!(hit, rank < k);
            previous = hit;
        }
        prop_assert!(hits_at_k(&scores, gold, scores.len()));
    }

    #[test]
    fn candidate_sets_hold_gold_once_among_distinct_responses(
        n in 3usize..40,
        k in 2usize..10,
        seed in any::<u64>(),
        vocabulary in 2usize..15,
    ) {
        let records: Vec<ExampleRecord> =
            (0..n).map(|i| record(i, &format!("reply {}", i % vocabulary))).collect();
        let distinct: BTreeSet<&TokenSeq> = records.iter().map(|r| &r.response).collect();
        match build_candidate_sets(&records, k, seed) {
            Ok(sets) => {
                prop_assert!(distinct.len() >= k);
                prop_assert_eq!(sets.len(), records.len());
                for (set, rec) in sets.iter().zip(&records) {
                    prop_assert_eq!(&set.id, &rec.id);
                    prop_assert_eq!(set.candidates.len(), k);
                    prop_assert_eq!(&set.candidates[set.gold_index], &rec.response);
                    let unique: BTreeSet<&TokenSeq> = set.candidates.iter().collect();
                    prop_assert_eq!(unique.len(), k);
                }
                prop_assert_eq!(build_candidate_sets(&records, k, seed).unwrap(), sets);
            }
            Err(_) => prop_assert!(distinct.len() < k),
        }
    }

    #[test]
    fn tfidf_ranking_ignores_idf_scale(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = random_corpus(&mut rng, 10);
        let context = random_corpus(&mut rng, 1).remove(0);
        let candidates = random_corpus(&mut rng, 10);
        let idf = IdfTable::build(docs.iter());
        prop_assert_eq!(
            tfidf_rank(&context, &candidates, &idf),
            tfidf_rank(&context, &candidates, &idf.scaled(factor))
        );
    }

    #[test]
    fn split_partitions_every_pair(n in 3usize..80, valid in 0usize..10, test in 0usize..10, seed in any::<u64>()) {
        prop_assume!(valid + test < n);
        let pairs: Vec<ContextResponsePair> = (0..n).map(pair).collect();
        let split = split_pairs(pairs.clone(), valid, test, seed).unwrap();
        prop_assert_eq!((split.valid.len(), split.test.len()), (valid, test));
        let mut seen: Vec<&str> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .map(|p| p.response_id.as_str())
            .collect();
        seen.sort_unstable();
        let expected: Vec<String> = (0..n).map(|i| format!("t1_{i:05}")).collect();
        prop_assert_eq!(seen, expected.iter().map(String::as_str).collect::<Vec<_>>());

        let mut reversed = pairs;
        reversed.reverse();
        let again = split_pairs(reversed, valid, test, seed).unwrap();
        prop_assert_eq!(again.fingerprint(), split.fingerprint());
    }

    #[test]
    fn empty_personas_match_persona_free_scoring(
        examples in proptest::collection::vec(example(), 1..5),
        seed in any::<u64>(),
        transformer in any::<bool>(),
    ) {
        let arch = if transformer { Arch::Transformer } else { Arch::Bow };
        let model = Model::new(EncoderConfig::desk(arch), 20, "prop", seed).unwrap();
        let emptied: Vec<Example> =
            examples.iter().cloned().map(|e| Example { persona: Vec::new(), ..e }).collect();
        let a: Vec<&Example> = examples.iter().collect();
        let b: Vec<&Example> = emptied.iter().collect();
        let off = model.encode_joint_frozen(&a, PersonaMode::Without).unwrap();
        let empty = model.encode_joint_frozen(&b, PersonaMode::With).unwrap();
        prop_assert_eq!(off, empty);
    }

    #[test]
    fn joint_encoding_does_not_depend_on_batch_company(
        examples in proptest::collection::vec(example(), 2..5),
        seed in any::<u64>(),
    ) {
        let model = Model::new(EncoderConfig::desk(Arch::Bow), 20, "prop", seed).unwrap();
        let batch: Vec<&Example> = examples.iter().collect();
        let together = model.encode_joint_frozen(&batch, PersonaMode::With).unwrap();
        for (e, row) in examples.iter().zip(&together) {
            let alone = model.encode_joint_frozen(&[e], PersonaMode::With).unwrap();
            for (x, y) in alone[0].iter().zip(row) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..6, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[rows, cols], 3.0, &mut rng);
        let shifted = Tensor::new(vec![rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (sa, sb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
