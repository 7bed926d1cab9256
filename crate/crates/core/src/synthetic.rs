//! Seeded synthetic corpora for desk-scale runs and tests.

use std::collections::BTreeMap;

use crate::corpus::{Corpus, TermEntry};
use crate::prioritizer::hashed_vector;
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusParams {
    pub seed: u64,
    pub entities: usize,
    pub attributes: usize,
    pub entity_subcategories: usize,
    pub attribute_subcategories: usize,
    /// Probability that an entity–attribute pair is valid.
    pub validity_density: f64,
}

impl Default for SyntheticCorpusParams {
    fn default() -> Self {
        SyntheticCorpusParams {
            seed: 0,
            entities: 8,
            attributes: 12,
            entity_subcategories: 3,
            attribute_subcategories: 5,
            validity_density: 0.6,
        }
    }
}

/// Random corpus with terms `entity0`, `attr0`, ... Subcategories are dealt
/// round-robin before shuffling so every subcategory is non-empty.
pub fn random_corpus(params: &SyntheticCorpusParams) -> Corpus {
    let mut rng = DetRng::keyed(params.seed, "synthetic-corpus");
    let deal = |n: usize, k: usize, rng: &mut DetRng| {
        let mut subs: Vec<usize> = (0..n).map(|i| i % k.max(1)).collect();
        rng.shuffle(&mut subs);
        subs
    };
    let entity_subs = deal(params.entities, params.entity_subcategories, &mut rng);
    let attribute_subs = deal(params.attributes, params.attribute_subcategories, &mut rng);
    let entities: Vec<TermEntry> = entity_subs
        .iter()
        .enumerate()
        .map(|(i, s)| TermEntry {
            id: format!("E{:04}", i + 1),
            term: format!("entity{i}"),
            category: format!("kingdom{}", s % 2),
            subcategory: format!("family{s}"),
        })
        .collect();
    let attributes: Vec<TermEntry> = attribute_subs
        .iter()
        .enumerate()
        .map(|(i, s)| TermEntry {
            id: format!("A{:04}", i + 1),
            term: format!("attr{i}"),
            category: format!("aspect{}", s % 2),
            subcategory: format!("facet{s}"),
        })
        .collect();
    let mut validity = BTreeMap::new();
    for e in &entities {
        let valid: Vec<String> = attributes
            .iter()
            .filter(|_| rng.next_f64() < params.validity_density)
            .map(|a| a.id.clone())
            .collect();
        validity.insert(e.id.clone(), valid);
    }
    Corpus::new(entities, attributes, BTreeMap::new(), validity).expect("synthetic corpus is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionParams {
    pub seed: u64,
    pub captions: usize,
    /// Attribute mentions per caption are uniform in `0..=max_attributes`.
    pub max_attributes: usize,
    /// Zipf exponent over a seeded popularity ranking of terms.
    pub zipf: f64,
    pub plural_rate: f64,
}

impl Default for CaptionParams {
    fn default() -> Self {
        CaptionParams { seed: 0, captions: 1000, max_attributes: 3, zipf: 1.1, plural_rate: 0.2 }
    }
}

const FILLER: [&str; 8] = ["a", "photo", "of", "the", "with", "near", "and", "scene"];

fn zipf_table(n: usize, exponent: f64, rng: &mut DetRng) -> Vec<f64> {
    let mut rank: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut rank);
    let weights: Vec<f64> = rank.iter().map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], rng: &mut DetRng) -> usize {
    let u = rng.next_f64();
    cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1)
}

/// Captions mentioning corpus terms with Zipf-distributed popularity,
/// random case, occasional plurals and filler words.
pub fn random_captions(corpus: &Corpus, params: &CaptionParams) -> Vec<String> {
    let mut rng = DetRng::keyed(params.seed, "synthetic-captions");
    let entities = corpus.entities();
    let attributes = corpus.attributes();
    let entity_cdf = zipf_table(entities.len(), params.zipf, &mut rng);
    let attribute_cdf = zipf_table(attributes.len(), params.zipf, &mut rng);
    (0..params.captions)
        .map(|_| {
            let mut words: Vec<String> = Vec::new();
            if !entities.is_empty() {
                let mut e = entities[draw(&entity_cdf, &mut rng)].term.clone();
                if rng.next_f64() < params.plural_rate {
                    e.push('s');
                }
                words.push(e);
            }
            if !attributes.is_empty() {
                for _ in 0..rng.below(params.max_attributes as u64 + 1) {
                    words.push(attributes[draw(&attribute_cdf, &mut rng)].term.clone());
                }
            }
            for _ in 0..rng.below(4) {
                words.push(FILLER[rng.below(FILLER.len() as u64) as usize].to_string());
            }
            rng.shuffle(&mut words);
            if rng.below(3) == 0 {
                words = words.into_iter().map(|w| w.to_uppercase()).collect();
            }
            words.join(" ")
        })
        .collect()
}

/// Embedding file contents where every term is its subcategory's hashed
/// direction plus `spread` times its own hashed direction, normalised.
/// Stands in for text-encoder embeddings in which related terms are close.
pub fn clustered_embeddings_jsonl(corpus: &Corpus, dim: usize, spread: f64, seed: u64) -> String {
    let mut out = String::new();
    for t in corpus.entities().iter().chain(corpus.attributes()) {
        let centre = hashed_vector(&format!("subcategory:{}", t.subcategory), dim, seed);
        let own = hashed_vector(&t.id, dim, seed);
        let v: Vec<f64> = centre.iter().zip(&own).map(|(c, o)| c + spread * o).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        out.push_str(&serde_json::json!({ "term": t.id, "vector": v }).to_string());
        out.push('\n');
    }
    out
}
