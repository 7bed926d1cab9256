use std::collections::HashMap;
use std::io::BufRead;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::PredictorError;
use crate::corpus::Corpus;
use crate::node::Node;
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    File,
    Hashed,
}

/// Term-id → vector table.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    source: EmbeddingSource,
    table: HashMap<String, Vec<f64>>,
}

/// Unit vector that depends only on (term id, seed).
pub fn hashed_vector(term_id: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = DetRng::keyed(seed, &format!("embedding:{term_id}"));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    term: String,
    vector: Vec<f64>,
}

impl EmbeddingProvider {
    pub fn hashed(corpus: &Corpus, dim: usize, seed: u64) -> Self {
        let table = corpus
            .entities()
            .iter()
            .chain(corpus.attributes())
            .map(|t| (t.id.clone(), hashed_vector(&t.id, dim, seed)))
            .collect();
        EmbeddingProvider { dim, source: EmbeddingSource::Hashed, table }
    }

    /// Read `{"term": "E0001", "vector": [...]}` lines; every corpus term
    /// must be present with a finite vector of one common dimension.
    pub fn from_jsonl(reader: impl BufRead, corpus: &Corpus) -> Result<Self, PredictorError> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| PredictorError::Embedding(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| PredictorError::Embedding(format!("line {}: {e}", i + 1)))?;
            if entry.vector.iter().any(|x| !x.is_finite()) {
                return Err(PredictorError::Embedding(format!("non-finite vector for {}", entry.term)));
            }
            let d = *dim.get_or_insert(entry.vector.len());
            if d != entry.vector.len() || d == 0 {
                return Err(PredictorError::Embedding(format!(
                    "{} has dimension {}, expected {d}",
                    entry.term,
                    entry.vector.len()
                )));
            }
            table.insert(entry.term, entry.vector);
        }
        let dim = dim.ok_or_else(|| PredictorError::Embedding("empty embedding file".into()))?;
        if let Some(missing) = corpus
            .entities()
            .iter()
            .chain(corpus.attributes())
            .find(|t| !table.contains_key(&t.id))
        {
            return Err(PredictorError::MissingEmbedding(missing.id.clone()));
        }
        Ok(EmbeddingProvider { dim, source: EmbeddingSource::File, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    /// SHA-256 over the table in term-id order.
    pub fn digest(&self) -> String {
        let mut ids: Vec<&String> = self.table.keys().collect();
        ids.sort();
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update([0]);
            for x in &self.table[id] {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn vector(&self, term_id: &str) -> Result<&[f64], PredictorError> {
        self.table
            .get(term_id)
            .map(Vec::as_slice)
            .ok_or_else(|| PredictorError::MissingEmbedding(term_id.to_string()))
    }
}

/// Model input for one node: attribute rows beyond the node's arity are
/// zero and masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    pub entity: Vec<f64>,
    pub attributes: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

pub fn embed_node(provider: &EmbeddingProvider, node: &Node, max_depth: usize) -> Result<NodeEmbedding, PredictorError> {
    let slots = max_depth.saturating_sub(1);
    if node.attributes().len() > slots {
        return Err(PredictorError::Shape(format!("{node} exceeds {slots} attribute slots")));
    }
    let entity = provider.vector(node.entity())?.to_vec();
    let mut attributes = vec![vec![0.0; provider.dim()]; slots];
    let mut mask = vec![false; slots];
    for (i, a) in node.attributes().iter().enumerate() {
        attributes[i] = provider.vector(a)?.to_vec();
        mask[i] = true;
    }
    Ok(NodeEmbedding { entity, attributes, mask })
}
