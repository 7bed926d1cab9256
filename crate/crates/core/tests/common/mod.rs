#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use atlas_core::corpus::Corpus;
use atlas_core::node::Node;
use atlas_core::oracle::{score, Oracle, OracleRequest};
use atlas_core::prioritizer::{l1_loss_and_gradient, ModelConfig, NodeEmbedding, PredictorModel};
use atlas_core::rng::DetRng;
use atlas_core::prompting::build_questions;
use atlas_core::search::{EvaluationRecord, SearchConfig};

/// Node ids by plain subset enumeration: every entity with every
/// combination of up to `max_depth - 1` valid attributes whose
/// subcategories are pairwise distinct.
pub fn brute_force_space(corpus: &Corpus, max_depth: usize) -> Vec<Vec<String>> {
    let mut layers = vec![Vec::new(); max_depth];
    for e in corpus.entities() {
        let valid = corpus.valid_attributes(&e.id).unwrap().to_vec();
        let n = valid.len();
        for mask in 0u32..(1 << n) {
            let k = mask.count_ones() as usize;
            if k + 1 > max_depth {
                continue;
            }
            let chosen: Vec<&String> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &valid[i]).collect();
            let subs: BTreeSet<&str> = chosen.iter().map(|a| corpus.attribute(a).unwrap().subcategory.as_str()).collect();
            if subs.len() != k {
                continue;
            }
            let mut id = e.id.clone();
            let mut sorted = chosen.clone();
            sorted.sort();
            for a in sorted {
                id.push('+');
                id.push_str(a);
            }
            layers[k].push(id);
        }
    }
    for l in &mut layers {
        l.sort();
    }
    layers
}

/// Verdict of a single node obtained by calling the oracle directly.
pub fn direct_success(corpus: &Corpus, oracle: &dyn Oracle, config: &SearchConfig, id: &str) -> bool {
    let node = Node::parse(id).unwrap();
    let request = OracleRequest {
        node: id.to_string(),
        prompt: String::new(),
        questions: build_questions(corpus, &node, config.seed),
        n_images: config.images_per_node,
        seed: 0,
    };
    let s = score(&oracle.evaluate(&request).unwrap(), &request.questions).unwrap();
    // rate >= tau, without dividing
    f64::from(s.n_correct) >= config.tau * f64::from(s.n_checks) - 1e-12
}

/// Nodes an apriori search must explore: all of layer 1, then every node
/// whose one-smaller subsets are all explored successes.
pub fn brute_force_closure(corpus: &Corpus, oracle: &dyn Oracle, config: &SearchConfig) -> BTreeMap<String, bool> {
    let mut explored = BTreeMap::new();
    for (k, layer) in brute_force_space(corpus, config.max_depth).into_iter().enumerate() {
        for id in layer {
            let parts: Vec<&str> = id.split('+').collect();
            let admitted = k == 0
                || (1..parts.len()).all(|skip| {
                    let sub: Vec<&str> =
                        parts.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| *p).collect();
                    explored.get(&sub.join("+")) == Some(&true)
                });
            if admitted {
                let ok = direct_success(corpus, oracle, config, &id);
                explored.insert(id, ok);
            }
        }
    }
    explored
}

/// Violations of the minimality property: error slices at layer >= 2 with
/// an immediate sub-node that is not an explored success.
pub fn minimality_violations(records: &[EvaluationRecord]) -> Vec<String> {
    let success: BTreeSet<&str> = records.iter().filter(|r| r.is_success()).map(|r| r.node.as_str()).collect();
    records
        .iter()
        .filter(|r| r.is_error() && r.layer >= 2)
        .filter(|r| {
            let n = Node::parse(&r.node).unwrap();
            let all_ok = n.immediate_sub_nodes().all(|s| success.contains(s.canonical_id().as_str()));
            !all_ok
        })
        .map(|r| r.node.clone())
        .collect()
}

/// Explored nodes with any explored proper subset that did not succeed.
pub fn soundness_violations(records: &[EvaluationRecord]) -> Vec<String> {
    let failed: BTreeSet<&str> = records.iter().filter(|r| !r.is_success()).map(|r| r.node.as_str()).collect();
    let mut out = Vec::new();
    for r in records {
        let parts: Vec<&str> = r.node.split('+').collect();
        let attrs = &parts[1..];
        for mask in 0u32..(1 << attrs.len()) - 1 {
            let mut id = parts[0].to_string();
            for (i, a) in attrs.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    id.push('+');
                    id.push_str(a);
                }
            }
            if failed.contains(id.as_str()) {
                out.push(r.node.clone());
            }
        }
    }
    out
}

pub fn shared_subcategory(corpus: &Corpus, records: &[EvaluationRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| {
            let n = Node::parse(&r.node).unwrap();
            let subs: BTreeSet<&str> = n.attributes().iter().map(|a| corpus.attribute(a).unwrap().subcategory.as_str()).collect();
            subs.len() != n.attributes().len()
        })
        .map(|r| r.node.clone())
        .collect()
}

pub fn random_input(rng: &mut DetRng, dim: usize, slots: usize) -> NodeEmbedding {
    let vec = |rng: &mut DetRng| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f64>>();
    let entity = vec(rng);
    let active = rng.below(slots as u64 + 1) as usize;
    let mut attributes = Vec::new();
    let mut mask = Vec::new();
    for i in 0..slots {
        if i < active {
            attributes.push(vec(rng));
            mask.push(true);
        } else {
            attributes.push(vec![0.0; dim]);
            mask.push(false);
        }
    }
    NodeEmbedding { entity, attributes, mask }
}

/// Largest relative error between analytic and central-difference L1
/// gradients over `cases` random small models and inputs.
pub fn max_gradient_error(cases: u64, seed: u64) -> f64 {
    let h = 1e-5;
    let loss = |m: &PredictorModel, x: &NodeEmbedding, y: f64| (m.predict(x).unwrap() - y).abs();
    let mut worst = 0.0f64;
    let mut rng = DetRng::new(seed);
    for case in 0..cases {
        let config = ModelConfig {
            dim: 2 + rng.below(5) as usize,
            layers: 1 + rng.below(3) as usize,
            hidden: 2 + rng.below(7) as usize,
            head_hidden: 2 + rng.below(5) as usize,
            attribute_slots: rng.below(4) as usize,
        };
        let mut model = PredictorModel::init(config, case);
        // non-trivial layer-norm gains and biases
        for (_, t) in model.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
        let x = random_input(&mut rng, config.dim, config.attribute_slots);
        // target away from the prediction so L1 is smooth nearby
        let y = if model.predict(&x).unwrap() > 0.5 { 0.0 } else { 1.0 };
        let (_, mut grad) = l1_loss_and_gradient(&model, &x, y).unwrap();
        let analytic: Vec<Vec<f64>> = grad.tensors_mut().into_iter().map(|(_, t)| t.clone()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for (i, &a) in g.iter().enumerate() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti].1[i] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].1[i] -= h;
                let numeric = (loss(&plus, &x, y) - loss(&minus, &x, y)) / (2.0 * h);
                // roundoff floor for exactly-zero gradients
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

pub fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Per-caption scan: a caption contains a term if some window of its words
/// equals the term's words, or is not itself a term and equals them with
/// "s"/"es" appended to the last word.
pub fn caption_contains(caption: &[String], term: &[String], vocabulary: &BTreeSet<Vec<String>>) -> bool {
    let n = term.len();
    if n == 0 || caption.len() < n {
        return false;
    }
    (0..=caption.len() - n).any(|i| {
        let window = &caption[i..i + n];
        if window == term {
            return true;
        }
        if vocabulary.contains(window) || window[..n - 1] != term[..n - 1] {
            return false;
        }
        let last = &window[n - 1];
        [format!("{}s", term[n - 1]), format!("{}es", term[n - 1])].contains(last)
    })
}

pub struct BruteForce {
    pub captions: Vec<Vec<String>>,
    pub vocabulary: BTreeSet<Vec<String>>,
}

impl BruteForce {
    pub fn new(corpus: &Corpus, captions: &[String]) -> Self {
        BruteForce {
            captions: captions.iter().map(|c| words(c)).collect(),
            vocabulary: corpus.entities().iter().chain(corpus.attributes()).map(|t| words(&t.term)).collect(),
        }
    }

    pub fn count(&self, corpus: &Corpus, node_id: &str) -> u32 {
        let terms: Vec<Vec<String>> = node_id.split('+').map(|id| words(&corpus.term(id).unwrap().term)).collect();
        self.captions
            .iter()
            .filter(|c| terms.iter().all(|t| caption_contains(c, t, &self.vocabulary)))
            .count() as u32
    }
}
