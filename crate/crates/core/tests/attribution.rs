mod common;

use std::sync::Arc;

use atlas_core::attribution::{attribute_slices, default_alpha_grid, scarcity_curve, CaptionIndex, Scarcity};
use atlas_core::corpus::Corpus;
use atlas_core::node::Node;
use atlas_core::oracle::{LandscapeParams, PlantedLandscape, SimulatedOracle};
use atlas_core::search::{run_search, EvaluationRecord, FrontierOrdering, RecordStatus, SearchConfig, SearchContext, Verdict};
use atlas_core::synthetic::{random_captions, random_corpus, CaptionParams, SyntheticCorpusParams};
use proptest::prelude::*;

use common::{caption_contains, words, BruteForce};

fn searched(seed: u64) -> (Arc<Corpus>, Vec<EvaluationRecord>) {
    let corpus = Arc::new(random_corpus(&SyntheticCorpusParams {
        seed,
        entities: 10,
        attributes: 14,
        entity_subcategories: 3,
        attribute_subcategories: 5,
        validity_density: 0.6,
    }));
    let landscape = PlantedLandscape::generate(&corpus, &LandscapeParams { seed, weak_pair_rate: 0.5, ..Default::default() });
    let oracle = SimulatedOracle::new(landscape, corpus.clone());
    let config = SearchConfig { seed, images_per_node: 10, ordering: FrontierOrdering::Canonical, ..Default::default() };
    let out = run_search(&SearchContext::new(&corpus, &config, &oracle).unwrap(), None).unwrap();
    (corpus, out.records)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn index_matches_per_caption_scan(seed in 0u64..1000, captions in 50usize..400) {
        let (corpus, records) = searched(seed);
        let text = random_captions(&corpus, &CaptionParams { seed, captions, ..Default::default() });
        let index = CaptionIndex::build(text.join("\n").as_bytes(), &corpus).unwrap();
        let brute = BruteForce::new(&corpus, &text);
        for t in corpus.entities().iter().chain(corpus.attributes()) {
            let expected: Vec<u32> = (0..text.len() as u32)
                .filter(|&i| caption_contains(&brute.captions[i as usize], &words(&t.term), &brute.vocabulary))
                .collect();
            prop_assert_eq!(index.postings(&t.id), &expected[..]);
        }
        for r in &records {
            let node = Node::parse(&r.node).unwrap();
            prop_assert_eq!(index.slice_count(&node), brute.count(&corpus, &r.node));
            // frequency is antitone in attribute addition
            for sub in node.immediate_sub_nodes() {
                prop_assert!(index.slice_frequency(&node) <= index.slice_frequency(&sub));
            }
        }
    }
}

#[test]
fn verdicts_match_brute_force_on_1000_captions() {
    for seed in 0..3 {
        let (corpus, records) = searched(seed);
        let text = random_captions(&corpus, &CaptionParams { seed, captions: 1000, ..Default::default() });
        let index = CaptionIndex::build(text.join("\n").as_bytes(), &corpus).unwrap();
        let brute = BruteForce::new(&corpus, &text);
        let n = text.len() as f64;

        let explored: Vec<&EvaluationRecord> = records.iter().filter(|r| r.status == RecordStatus::Ok).collect();
        let mut previous: Vec<f64> = Vec::new();
        for alpha in default_alpha_grid() {
            let got = attribute_slices(&index, &records, alpha, None).unwrap();
            let mut fractions = Vec::new();
            for layer in 1..=3 {
                let in_layer: Vec<&&EvaluationRecord> = explored.iter().filter(|r| r.layer == layer).collect();
                if in_layer.is_empty() {
                    continue;
                }
                let total: u64 = in_layer.iter().map(|r| u64::from(brute.count(&corpus, &r.node))).sum();
                let avg = total as f64 / (in_layer.len() as f64 * n);
                let errors: Vec<&&&EvaluationRecord> = in_layer.iter().filter(|r| r.verdict == Some(Verdict::Error)).collect();
                let mut scarce = 0;
                for r in &errors {
                    let count = brute.count(&corpus, &r.node);
                    let f = f64::from(count) / n;
                    let expected = if f < alpha * avg { Scarcity::DataScarce } else { Scarcity::NotScarce };
                    let rec = got.records.iter().find(|a| a.node == r.node).unwrap();
                    assert_eq!((rec.caption_count, rec.frequency, rec.verdict), (count, f, expected), "{} at alpha {alpha}", r.node);
                    assert_eq!(rec.layer_average, avg);
                    scarce += usize::from(expected == Scarcity::DataScarce);
                }
                if !errors.is_empty() {
                    fractions.push(scarce as f64 / errors.len() as f64);
                }
            }
            if !previous.is_empty() {
                assert!(fractions.iter().zip(&previous).all(|(now, before)| now >= before));
            }
            previous = fractions;
        }
        let curve = scarcity_curve(&index, &records, &default_alpha_grid(), None).unwrap();
        assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.scarce_fraction)));
    }
}

#[test]
fn failures_on_rare_terms_are_attributed_to_scarcity() {
    let corpus = random_corpus(&SyntheticCorpusParams { seed: 4, entities: 40, attributes: 10, ..Default::default() });
    let text = random_captions(&corpus, &CaptionParams { seed: 4, captions: 1000, zipf: 1.3, ..Default::default() });
    let index = CaptionIndex::build(text.join("\n").as_bytes(), &corpus).unwrap();
    let brute = BruteForce::new(&corpus, &text);

    let mut ranked: Vec<(u32, String)> = corpus.entities().iter().map(|e| (brute.count(&corpus, &e.id), e.id.clone())).collect();
    ranked.sort();
    let record = |id: &str, error: bool| EvaluationRecord {
        seq: 0,
        node: id.to_string(),
        layer: 1,
        prompt: String::new(),
        n_checks: 1,
        n_correct: u32::from(!error),
        success_rate: Some(if error { 0.0 } else { 1.0 }),
        verdict: Some(if error { Verdict::Error } else { Verdict::Success }),
        per_question: vec![],
        status: RecordStatus::Ok,
        grammar_fallback: false,
        error: None,
    };
    let planted = |is_error: &dyn Fn(usize, &str) -> bool| -> Vec<EvaluationRecord> {
        ranked.iter().enumerate().map(|(rank, (_, id))| record(id, is_error(rank, id))).collect()
    };
    // Rarest quarter fails vs. every fourth entity by id fails.
    let rare = planted(&|rank, _| rank < 10);
    let independent = planted(&|_, id| id[1..].parse::<u32>().unwrap() % 4 == 0);

    let fraction = |records: &[EvaluationRecord]| {
        let total: u64 = ranked.iter().map(|(c, _)| u64::from(*c)).sum();
        let avg = total as f64 / (ranked.len() as f64 * 1000.0);
        let errors: Vec<&EvaluationRecord> = records.iter().filter(|r| r.is_error()).collect();
        let scarce = errors.iter().filter(|r| f64::from(brute.count(&corpus, &r.node)) / 1000.0 < avg).count();
        let got = attribute_slices(&index, records, 1.0, Some(1)).unwrap();
        let lib = got.records.iter().filter(|r| r.verdict == Scarcity::DataScarce).count();
        assert_eq!(lib, scarce);
        scarce as f64 / errors.len() as f64
    };
    let (a, b) = (fraction(&rare), fraction(&independent));
    assert!(a > b, "rare planting {a} vs independent {b}");
}
