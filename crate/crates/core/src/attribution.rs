//! Training-caption frequency of slices and data-scarcity flags.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::node::Node;
use crate::search::EvaluationRecord;
use crate::text;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("caption stream line {line}: {source}")]
    Read {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("layer {0} has no explored slices")]
    EmptyLayer(usize),
    #[error("no explored slices to attribute")]
    NoSlices,
    #[error("alpha must be finite and non-negative, got {0}")]
    Alpha(f64),
    #[error("bad node id {0}")]
    Node(String),
}

/// Caption postings for every corpus term.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionIndex {
    n_captions: u32,
    /// Term id → ascending, deduplicated caption ids.
    postings: BTreeMap<String, Vec<u32>>,
    source_digest: String,
}

/// Tokenized surface form → term ids sharing it.
fn term_table(corpus: &Corpus) -> (HashMap<String, Vec<String>>, usize) {
    let mut table: HashMap<String, Vec<String>> = HashMap::new();
    let mut longest = 1;
    for t in corpus.entities().iter().chain(corpus.attributes()) {
        let tokens = text::tokenize(&t.term);
        if tokens.is_empty() {
            continue;
        }
        longest = longest.max(tokens.len());
        table.entry(tokens.join(" ")).or_default().push(t.id.clone());
    }
    (table, longest)
}

impl CaptionIndex {
    /// One caption per line. A caption contains a term when some run of
    /// consecutive tokens equals the term's tokens, allowing a single
    /// plural "s"/"es" on the last token.
    pub fn build(reader: impl BufRead, corpus: &Corpus) -> Result<Self, AttributionError> {
        let (table, longest) = term_table(corpus);
        let mut postings: BTreeMap<String, Vec<u32>> =
            corpus.entities().iter().chain(corpus.attributes()).map(|t| (t.id.clone(), Vec::new())).collect();
        let mut hasher = Sha256::new();
        let mut n: u32 = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| AttributionError::Read { line: i + 1, source })?;
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            let tokens = text::tokenize(&line);
            for start in 0..tokens.len() {
                for len in 1..=longest.min(tokens.len() - start) {
                    let gram = tokens[start..start + len].join(" ");
                    if let Some(key) = text::match_known(&gram, |s| table.contains_key(s)) {
                        for id in &table[key.as_ref()] {
                            let list = postings.get_mut(id).expect("term in postings");
                            if list.last() != Some(&n) {
                                list.push(n);
                            }
                        }
                    }
                }
            }
            n += 1;
        }
        Ok(CaptionIndex { n_captions: n, postings, source_digest: hex::encode(hasher.finalize()) })
    }

    pub fn n_captions(&self) -> u32 {
        self.n_captions
    }

    pub fn postings(&self, term_id: &str) -> &[u32] {
        self.postings.get(term_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// SHA-256 of the caption stream.
    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// Number of captions containing every term of the node.
    pub fn slice_count(&self, node: &Node) -> u32 {
        let mut lists: Vec<&[u32]> = std::iter::once(node.entity())
            .chain(node.attributes().iter().map(String::as_str))
            .map(|t| self.postings(t))
            .collect();
        lists.sort_by_key(|l| l.len());
        let mut acc: Vec<u32> = lists[0].to_vec();
        for other in &lists[1..] {
            acc = intersect(&acc, other);
            if acc.is_empty() {
                break;
            }
        }
        acc.len() as u32
    }

    pub fn slice_frequency(&self, node: &Node) -> f64 {
        if self.n_captions == 0 {
            return 0.0;
        }
        f64::from(self.slice_count(node)) / f64::from(self.n_captions)
    }
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scarcity {
    DataScarce,
    NotScarce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub node: String,
    pub layer: usize,
    pub caption_count: u32,
    pub frequency: f64,
    pub layer_average: f64,
    pub alpha: f64,
    pub verdict: Scarcity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScarcityPoint {
    pub alpha: f64,
    pub layer: usize,
    pub error_slices: usize,
    pub scarce: usize,
    pub scarce_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFrequency {
    pub layer: usize,
    pub explored: usize,
    pub error_slices: usize,
    /// Mean frequency over all explored slices of the layer.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// One record per error slice, in journal order.
    pub records: Vec<AttributionRecord>,
    pub layers: Vec<LayerFrequency>,
}

/// 0.1, 0.2, ..., 1.2.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=12).map(|i| f64::from(i) / 10.0).collect()
}

struct Slice<'a> {
    record: &'a EvaluationRecord,
    count: u32,
}

fn slices<'a>(index: &CaptionIndex, records: &'a [EvaluationRecord]) -> Result<Vec<Slice<'a>>, AttributionError> {
    records
        .iter()
        .filter(|r| r.verdict.is_some())
        .map(|r| {
            let node = Node::parse(&r.node).map_err(|_| AttributionError::Node(r.node.clone()))?;
            Ok(Slice { record: r, count: index.slice_count(&node) })
        })
        .collect()
}

/// Per-layer averages over every explored slice (successes and errors).
/// The mean is the total caption count over `explored · n_captions`.
fn layer_frequencies(index: &CaptionIndex, slices: &[Slice<'_>]) -> Vec<LayerFrequency> {
    let mut by_layer: BTreeMap<usize, (usize, usize, u64)> = BTreeMap::new();
    for s in slices {
        let e = by_layer.entry(s.record.layer).or_default();
        e.0 += 1;
        e.1 += usize::from(s.record.is_error());
        e.2 += u64::from(s.count);
    }
    by_layer
        .into_iter()
        .map(|(layer, (explored, errors, total))| LayerFrequency {
            layer,
            explored,
            error_slices: errors,
            average: if index.n_captions == 0 { 0.0 } else { total as f64 / (explored as f64 * f64::from(index.n_captions)) },
        })
        .collect()
}

fn check_alpha(alpha: f64) -> Result<(), AttributionError> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(AttributionError::Alpha(alpha))
    }
}

/// Flag error slices with frequency below `alpha` times their layer average.
/// `layer` restricts the output to one layer.
pub fn attribute_slices(
    index: &CaptionIndex,
    records: &[EvaluationRecord],
    alpha: f64,
    layer: Option<usize>,
) -> Result<Attribution, AttributionError> {
    check_alpha(alpha)?;
    let slices = slices(index, records)?;
    let mut layers = layer_frequencies(index, &slices);
    match layer {
        Some(l) => {
            layers.retain(|f| f.layer == l);
            if layers.is_empty() {
                return Err(AttributionError::EmptyLayer(l));
            }
        }
        None if layers.is_empty() => return Err(AttributionError::NoSlices),
        None => {}
    }
    let averages: BTreeMap<usize, f64> = layers.iter().map(|f| (f.layer, f.average)).collect();
    let out = slices
        .iter()
        .filter(|s| s.record.is_error())
        .filter_map(|s| {
            let avg = *averages.get(&s.record.layer)?;
            let frequency = if index.n_captions == 0 { 0.0 } else { f64::from(s.count) / f64::from(index.n_captions) };
            let verdict = if frequency < alpha * avg { Scarcity::DataScarce } else { Scarcity::NotScarce };
            Some(AttributionRecord {
                node: s.record.node.clone(),
                layer: s.record.layer,
                caption_count: s.count,
                frequency,
                layer_average: avg,
                alpha,
                verdict,
            })
        })
        .collect();
    Ok(Attribution { records: out, layers })
}

/// Scarce fraction of error slices per layer for each alpha.
pub fn scarcity_curve(
    index: &CaptionIndex,
    records: &[EvaluationRecord],
    alphas: &[f64],
    layer: Option<usize>,
) -> Result<Vec<ScarcityPoint>, AttributionError> {
    let mut points = Vec::new();
    for &alpha in alphas {
        let a = attribute_slices(index, records, alpha, layer)?;
        for lf in &a.layers {
            let in_layer: Vec<&AttributionRecord> = a.records.iter().filter(|r| r.layer == lf.layer).collect();
            let scarce = in_layer.iter().filter(|r| r.verdict == Scarcity::DataScarce).count();
            points.push(ScarcityPoint {
                alpha,
                layer: lf.layer,
                error_slices: in_layer.len(),
                scarce,
                scarce_fraction: if in_layer.is_empty() { 0.0 } else { scarce as f64 / in_layer.len() as f64 },
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Slot, TermEntry};
    use crate::search::{RecordStatus, Verdict};

    fn corpus() -> Corpus {
        let t = |id: &str, term: &str, cat: &str, sub: &str| TermEntry {
            id: id.into(),
            term: term.into(),
            category: cat.into(),
            subcategory: sub.into(),
        };
        Corpus::new(
            vec![t("E0001", "dog", "biology", "animal"), t("E0002", "cat", "biology", "animal"), t("E0003", "hot dog", "food", "dish")],
            vec![t("A0001", "red", "intrinsic", "color"), t("A0002", "two", "intrinsic", "quantity")],
            [("quantity".to_string(), Slot::Quantity)].into_iter().collect(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn record(node: &str, verdict: Verdict) -> EvaluationRecord {
        EvaluationRecord {
            seq: 0,
            node: node.into(),
            layer: node.matches('+').count() + 1,
            prompt: String::new(),
            n_checks: 1,
            n_correct: 0,
            success_rate: Some(0.0),
            verdict: Some(verdict),
            per_question: vec![],
            status: RecordStatus::Ok,
            grammar_fallback: false,
            error: None,
        }
    }

    #[test]
    fn postings_with_plurals_and_bigrams() {
        let captions = "a red dog\ntwo cats\nDogs running\na hot dog stand\n";
        let idx = CaptionIndex::build(captions.as_bytes(), &corpus()).unwrap();
        assert_eq!(idx.n_captions(), 4);
        assert_eq!(idx.postings("E0001"), [0, 2, 3]);
        assert_eq!(idx.postings("A0001"), [0]);
        assert_eq!(idx.postings("E0002"), [1]);
        assert_eq!(idx.postings("E0003"), [3]);
        assert_eq!(idx.slice_frequency(&Node::parse("E0001+A0001").unwrap()), 0.25);
        assert_eq!(idx.slice_frequency(&Node::parse("E0002+A0001").unwrap()), 0.0);
    }

    #[test]
    fn thresholds_and_empty_layers() {
        let captions = "dog\ndog\ndog\ndog\ncat\nred\nred\nred\nred\nred\n";
        let idx = CaptionIndex::build(captions.as_bytes(), &corpus()).unwrap();
        let recs = vec![record("E0001", Verdict::Success), record("E0002", Verdict::Error), record("E0003", Verdict::Error)];
        // average (4 + 1 + 0) / 30
        let a = attribute_slices(&idx, &recs, 1.0, None).unwrap();
        assert_eq!(a.records.len(), 2);
        assert!(a.records.iter().all(|r| r.verdict == Scarcity::DataScarce));
        let none = attribute_slices(&idx, &recs, 0.0, None).unwrap();
        assert!(none.records.iter().all(|r| r.verdict == Scarcity::NotScarce));
        let half = attribute_slices(&idx, &recs, 0.5, None).unwrap();
        assert_eq!(half.records.iter().filter(|r| r.verdict == Scarcity::DataScarce).count(), 1);
        assert!(matches!(attribute_slices(&idx, &recs, 1.0, Some(2)), Err(AttributionError::EmptyLayer(2))));
        assert!(attribute_slices(&idx, &recs, f64::NAN, None).is_err());
    }

    #[test]
    fn rebuild_is_identical() {
        let captions = "a red dog\ntwo cats\n";
        let a = CaptionIndex::build(captions.as_bytes(), &corpus()).unwrap();
        let b = CaptionIndex::build(captions.as_bytes(), &corpus()).unwrap();
        assert_eq!(a, b);
        assert_eq!(default_alpha_grid().len(), 12);
    }
}
