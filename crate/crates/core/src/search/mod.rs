//! Layered apriori search with journaling and resume.
//!
//! Layer 1 evaluates every entity. Each later layer is expanded from the
//! successes of the one before: a node is admitted only if every immediate
//! sub-node was explored and succeeded. The admitted frontier is ordered
//! (canonical, seeded random, or by predicted success) and evaluated in
//! batches of at most `workers` nodes. Batches never straddle a retrain
//! point, so the worker count does not affect the journal.

mod journal;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::node::Node;
use crate::oracle::{score, Oracle, OracleRequest};
use crate::prioritizer::{
    EmbeddingProvider, EmbeddingSource, L1Point, ModelConfig, PredictorError, Prioritizer, TrainConfig, TrainingLedger,
};
use crate::prompting::{build_prompt, build_questions, GrammarCache};
use crate::rng::{stream_key, DetRng};

pub use journal::{read_journal, read_journal_from, JournalContents, JournalHeader, JournalWriter, ReadMode, JOURNAL_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("invalid counts: {n_correct} correct of {n_checks} checks")]
    Counts { n_correct: u32, n_checks: u32 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} line {line}: {message}", path.display())]
    Journal { path: PathBuf, line: usize, message: String },
    #[error("journal config hash {found} does not match the current run ({expected}); refusing to resume")]
    HashMismatch { expected: String, found: String },
    #[error("journal diverges at seq {seq}: scheduled {expected}, journal has {found}")]
    Diverged { seq: u64, expected: String, found: String },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontierOrdering {
    Canonical,
    /// Seeded shuffle per layer; the baseline for prioritization.
    Random,
    #[default]
    Prioritized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSettings {
    /// Hashed embedding width; ignored when an embedding file is supplied.
    pub embedding_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            embedding_dim: 64,
            layers: 2,
            hidden: 128,
            head_hidden: 64,
            epochs: 20,
            learning_rate: 0.2,
            batch_size: 32,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub max_depth: usize,
    pub images_per_node: u32,
    pub tau: f64,
    /// Cap on journaled node evaluations.
    pub budget: Option<u64>,
    pub seed: u64,
    pub ordering: FrontierOrdering,
    pub retrain_interval: usize,
    /// Extra oracle attempts before a node is journaled as unresolved.
    pub retries: u32,
    pub workers: usize,
    pub predictor: PredictorSettings,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 3,
            images_per_node: 25,
            tau: 0.8,
            budget: None,
            seed: 0,
            ordering: FrontierOrdering::Prioritized,
            retrain_interval: 10_000,
            retries: 2,
            workers: 4,
            predictor: PredictorSettings::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if self.images_per_node < 1 {
            return bad("images_per_node must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.retrain_interval < 1 {
            return bad("retrain_interval must be at least 1");
        }
        if self.workers < 1 {
            return bad("workers must be at least 1");
        }
        let p = &self.predictor;
        if p.embedding_dim == 0 || p.layers == 0 || p.hidden == 0 || p.head_hidden == 0 || p.batch_size == 0 {
            return bad("predictor sizes must be positive");
        }
        if !(p.learning_rate.is_finite() && p.learning_rate > 0.0 && p.clip_norm > 0.0) {
            return bad("predictor learning_rate and clip_norm must be positive");
        }
        Ok(())
    }

    pub fn prioritizer_enabled(&self) -> bool {
        self.ordering == FrontierOrdering::Prioritized
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Error,
}

/// Success rate and verdict; a rate exactly at `tau` is a success.
pub fn verdict(n_correct: u32, n_checks: u32, tau: f64) -> Result<(f64, Verdict), SearchError> {
    if n_checks == 0 || n_correct > n_checks {
        return Err(SearchError::Counts { n_correct, n_checks });
    }
    let rate = f64::from(n_correct) / f64::from(n_checks);
    Ok((rate, if rate < tau { Verdict::Error } else { Verdict::Success }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    /// The oracle failed on every attempt; no verdict.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRecord {
    pub seq: u64,
    pub node: String,
    pub layer: usize,
    pub prompt: String,
    pub n_checks: u32,
    pub n_correct: u32,
    pub success_rate: Option<f64>,
    pub verdict: Option<Verdict>,
    pub per_question: Vec<(String, u32)>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub grammar_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvaluationRecord {
    pub fn is_error(&self) -> bool {
        self.verdict == Some(Verdict::Error)
    }

    pub fn is_success(&self) -> bool {
        self.verdict == Some(Verdict::Success)
    }

    /// Training label; recomputed from the integer counts so replayed and
    /// live records give bit-identical labels.
    pub fn label(&self) -> Option<f64> {
        (self.status == RecordStatus::Ok && self.n_checks > 0)
            .then(|| f64::from(self.n_correct) / f64::from(self.n_checks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Error,
    Unresolved,
}

impl Outcome {
    fn of(record: &EvaluationRecord) -> Self {
        match record.verdict {
            Some(Verdict::Success) => Outcome::Success,
            Some(Verdict::Error) => Outcome::Error,
            None => Outcome::Unresolved,
        }
    }
}

/// Every admissible node one layer below the successes at `layer`, sorted
/// by canonical id. `explored` maps canonical ids to outcomes.
pub fn expand_layer(corpus: &Corpus, explored: &BTreeMap<String, Outcome>, layer: usize) -> Vec<Node> {
    let succeeded = |n: &Node| explored.get(&n.canonical_id()) == Some(&Outcome::Success);
    let mut out = Vec::new();
    for (id, outcome) in explored {
        if *outcome != Outcome::Success || id.matches('+').count() + 1 != layer {
            continue;
        }
        let parent = Node::parse(id).expect("explored ids are canonical");
        let Ok(valid) = corpus.valid_attributes(parent.entity()) else { continue };
        let subcategory = |a: &str| corpus.attribute(a).map(|t| t.subcategory.as_str()).unwrap_or_default();
        let used: Vec<&str> = parent.attributes().iter().map(|a| subcategory(a)).collect();
        let last = parent.attributes().last().map(String::as_str).unwrap_or("");
        for a in valid.iter().filter(|a| a.as_str() > last) {
            if used.contains(&subcategory(a)) {
                continue;
            }
            let child = parent.extended(a).expect("new attribute");
            if child.immediate_sub_nodes().all(|s| succeeded(&s)) {
                out.push(child);
            }
        }
    }
    out.sort_by_key(Node::canonical_id);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// Admissible nodes at this layer.
    pub frontier: usize,
    pub explored: usize,
    pub errors: usize,
    pub unresolved: usize,
}

impl LayerSummary {
    pub fn density(&self) -> f64 {
        if self.explored == 0 {
            0.0
        } else {
            self.errors as f64 / self.explored as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub config_hash: String,
    pub layers: Vec<LayerSummary>,
    pub evaluations: u64,
    /// Records taken from an existing journal instead of the oracle.
    pub replayed: u64,
    pub budget_exhausted: bool,
    pub validation_l1: Vec<L1Point>,
    pub failed_retrains: usize,
}

impl SearchSummary {
    pub fn complete(&self) -> bool {
        !self.budget_exhausted
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub summary: SearchSummary,
    pub records: Vec<EvaluationRecord>,
    pub explored: BTreeMap<String, Outcome>,
    pub training: Option<TrainingLedger>,
}

/// Everything a run depends on. The config hash covers the search config
/// (minus `budget` and `workers`), the corpus, the oracle, and any
/// non-default embeddings or grammar client.
pub struct SearchContext<'a> {
    corpus: &'a Corpus,
    config: &'a SearchConfig,
    oracle: &'a dyn Oracle,
    grammar: Option<(&'a GrammarCache, String)>,
    embeddings: Option<EmbeddingProvider>,
}

impl<'a> SearchContext<'a> {
    pub fn new(corpus: &'a Corpus, config: &'a SearchConfig, oracle: &'a dyn Oracle) -> Result<Self, SearchError> {
        config.validate()?;
        Ok(SearchContext { corpus, config, oracle, grammar: None, embeddings: None })
    }

    /// `label` identifies the client in the config hash.
    pub fn with_grammar(mut self, cache: &'a GrammarCache, label: impl Into<String>) -> Self {
        self.grammar = Some((cache, label.into()));
        self
    }

    pub fn with_embeddings(mut self, provider: EmbeddingProvider) -> Self {
        self.embeddings = Some(provider);
        self
    }

    pub fn config(&self) -> &SearchConfig {
        self.config
    }

    pub fn config_hash(&self) -> String {
        let mut search = serde_json::to_value(self.config).expect("config serializes");
        if let Some(map) = search.as_object_mut() {
            map.remove("budget");
            map.remove("workers");
        }
        let embeddings = self
            .embeddings
            .as_ref()
            .filter(|p| p.source() == EmbeddingSource::File)
            .map(EmbeddingProvider::digest);
        let doc = serde_json::json!({
            "search": search,
            "corpus": self.corpus.digest(),
            "oracle": self.oracle.fingerprint(),
            "embeddings": embeddings,
            "grammar": self.grammar.as_ref().map(|(_, label)| label),
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    /// Re-run predictor training over journal records, retraining every
    /// `split_at` records, and return the resulting ledger. The held-out
    /// L1 points are the learning curve.
    pub fn replay_training(&self, records: &[EvaluationRecord], split_at: usize) -> Result<TrainingLedger, SearchError> {
        if split_at == 0 {
            return Err(SearchError::Config("split_at must be at least 1".into()));
        }
        let mut p = self.build_prioritizer();
        for (i, rec) in records.iter().enumerate() {
            if let Some(label) = rec.label() {
                let node = Node::parse(&rec.node).map_err(|e| SearchError::Config(e.to_string()))?;
                p.observe(node, label);
            }
            if (i + 1) % split_at == 0 {
                p.retrain()?;
            }
        }
        p.retrain()?;
        Ok(p.ledger().clone())
    }

    fn prioritizer(&self) -> Option<Prioritizer> {
        self.config.prioritizer_enabled().then(|| self.build_prioritizer())
    }

    fn build_prioritizer(&self) -> Prioritizer {
        let p = &self.config.predictor;
        let provider = self
            .embeddings
            .clone()
            .unwrap_or_else(|| EmbeddingProvider::hashed(self.corpus, p.embedding_dim, self.config.seed));
        let model = ModelConfig {
            dim: provider.dim(),
            layers: p.layers,
            hidden: p.hidden,
            head_hidden: p.head_hidden,
            attribute_slots: self.config.max_depth - 1,
        };
        let train = TrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            clip_norm: p.clip_norm,
            seed: self.config.seed,
        };
        Prioritizer::new(provider, model, train, self.config.max_depth)
    }

    fn evaluate_node(&self, node: &Node, seq: u64) -> EvaluationRecord {
        let id = node.canonical_id();
        let prompt = build_prompt(self.corpus, node, self.grammar.as_ref().map(|(g, _)| *g));
        let request = OracleRequest {
            node: id.clone(),
            prompt: prompt.text,
            questions: build_questions(self.corpus, node, self.config.seed),
            n_images: self.config.images_per_node,
            seed: stream_key(self.config.seed, &id),
        };
        let mut record = EvaluationRecord {
            seq,
            node: id,
            layer: node.layer(),
            prompt: request.prompt.clone(),
            n_checks: 0,
            n_correct: 0,
            success_rate: None,
            verdict: None,
            per_question: Vec::new(),
            status: RecordStatus::Unresolved,
            grammar_fallback: prompt.grammar_fallback,
            error: None,
        };
        for attempt in 0..=self.config.retries {
            let scored = self.oracle.evaluate(&request).and_then(|r| score(&r, &request.questions));
            match scored {
                Ok(s) => {
                    let (rate, v) = verdict(s.n_correct, s.n_checks, self.config.tau).expect("oracle returned checks");
                    record.n_checks = s.n_checks;
                    record.n_correct = s.n_correct;
                    record.success_rate = Some(rate);
                    record.verdict = Some(v);
                    record.per_question = s.per_question;
                    record.status = RecordStatus::Ok;
                    return record;
                }
                Err(e) => {
                    log::warn!("oracle failed on {} (attempt {}): {e}", record.node, attempt + 1);
                    record.error = Some(e.to_string());
                }
            }
        }
        record
    }

    fn evaluate_batch(&self, nodes: &[Node], first_seq: u64, replay: &[EvaluationRecord]) -> Result<Vec<EvaluationRecord>, SearchError> {
        let mut out: Vec<Option<EvaluationRecord>> = vec![None; nodes.len()];
        let mut fresh = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            let seq = first_seq + i as u64;
            match replay.get(seq as usize) {
                Some(rec) => {
                    let expected = node.canonical_id();
                    if rec.node != expected {
                        return Err(SearchError::Diverged { seq, expected, found: rec.node.clone() });
                    }
                    out[i] = Some(rec.clone());
                }
                None => fresh.push(i),
            }
        }
        if fresh.len() == 1 || self.config.workers == 1 {
            for i in fresh {
                out[i] = Some(self.evaluate_node(&nodes[i], first_seq + i as u64));
            }
        } else if !fresh.is_empty() {
            let results: Vec<(usize, EvaluationRecord)> = std::thread::scope(|scope| {
                let handles: Vec<_> = fresh
                    .iter()
                    .map(|&i| scope.spawn(move || (i, self.evaluate_node(&nodes[i], first_seq + i as u64))))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
            });
            for (i, rec) in results {
                out[i] = Some(rec);
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every slot filled")).collect())
    }

    fn order(&self, frontier: Vec<Node>, layer: usize, prioritizer: Option<&Prioritizer>) -> Result<Vec<Node>, SearchError> {
        match (self.config.ordering, prioritizer) {
            (FrontierOrdering::Random, _) => {
                let mut nodes = frontier;
                DetRng::keyed(self.config.seed, &format!("frontier:{layer}")).shuffle(&mut nodes);
                Ok(nodes)
            }
            (FrontierOrdering::Prioritized, Some(p)) => Ok(p.prioritize(frontier)?),
            _ => Ok(frontier),
        }
    }

    fn execute(&self, mut journal: Option<JournalWriter>, replay: &[EvaluationRecord]) -> Result<SearchOutcome, SearchError> {
        let config = self.config;
        let mut prioritizer = self.prioritizer();
        let mut explored: BTreeMap<String, Outcome> = BTreeMap::new();
        let mut records: Vec<EvaluationRecord> = Vec::new();
        let mut layers = Vec::new();
        let mut budget_exhausted = false;

        for layer in 1..=config.max_depth {
            let frontier: Vec<Node> = if layer == 1 {
                self.corpus.entity_ids().into_iter().map(Node::root).collect()
            } else {
                expand_layer(self.corpus, &explored, layer - 1)
            };
            if frontier.is_empty() {
                break;
            }
            let mut frontier = self.order(frontier, layer, prioritizer.as_ref())?;
            let mut stats = LayerSummary { layer, frontier: frontier.len(), ..Default::default() };
            let mut next = 0;
            while next < frontier.len() {
                let done = records.len() as u64;
                let mut size = config.workers.min(frontier.len() - next) as u64;
                if let Some(budget) = config.budget {
                    if done >= budget {
                        budget_exhausted = true;
                        break;
                    }
                    size = size.min(budget - done);
                }
                if prioritizer.is_some() {
                    let interval = config.retrain_interval as u64;
                    size = size.min(interval - done % interval);
                }
                let size = size as usize;
                let batch = self.evaluate_batch(&frontier[next..next + size], done, replay)?;
                for rec in batch {
                    if rec.seq as usize >= replay.len() {
                        if let Some(j) = journal.as_mut() {
                            j.write(&rec)?;
                        }
                    }
                    let outcome = Outcome::of(&rec);
                    match outcome {
                        Outcome::Success => stats.explored += 1,
                        Outcome::Error => {
                            stats.explored += 1;
                            stats.errors += 1;
                        }
                        Outcome::Unresolved => stats.unresolved += 1,
                    }
                    if let (Some(p), Some(label)) = (prioritizer.as_mut(), rec.label()) {
                        p.observe(Node::parse(&rec.node).expect("canonical id"), label);
                    }
                    explored.insert(rec.node.clone(), outcome);
                    records.push(rec);
                }
                next += size;
                if let Some(p) = prioritizer.as_mut() {
                    if records.len() % config.retrain_interval == 0 {
                        p.retrain()?;
                        if next < frontier.len() {
                            let rest = frontier.split_off(next);
                            frontier.extend(p.prioritize(rest)?);
                        }
                    }
                }
            }
            layers.push(stats);
            if budget_exhausted {
                break;
            }
        }

        let training = prioritizer.map(|p| p.ledger().clone());
        let summary = SearchSummary {
            config_hash: self.config_hash(),
            layers,
            evaluations: records.len() as u64,
            replayed: replay.len().min(records.len()) as u64,
            budget_exhausted,
            validation_l1: training.as_ref().map(|t| t.validation_l1.clone()).unwrap_or_default(),
            failed_retrains: training.as_ref().map_or(0, |t| t.failed_retrains),
        };
        Ok(SearchOutcome { summary, records, explored, training })
    }
}

/// Run a fresh search, journaling to `journal` if given (the file is
/// created or truncated).
pub fn run_search(ctx: &SearchContext<'_>, journal: Option<&Path>) -> Result<SearchOutcome, SearchError> {
    let writer = match journal {
        Some(path) => Some(JournalWriter::create(
            path,
            &JournalHeader { config_hash: ctx.config_hash(), schema_version: JOURNAL_SCHEMA_VERSION },
        )?),
        None => None,
    };
    ctx.execute(writer, &[])
}

/// Continue a journaled run. Recorded evaluations are replayed through the
/// same schedule instead of calling the oracle, so the lines appended
/// afterwards match an uninterrupted run.
pub fn resume(ctx: &SearchContext<'_>, journal: &Path) -> Result<SearchOutcome, SearchError> {
    let contents = read_journal(journal, ReadMode::Strict)?;
    let expected = ctx.config_hash();
    if contents.header.config_hash != expected {
        return Err(SearchError::HashMismatch { expected, found: contents.header.config_hash });
    }
    if contents.dropped_tail {
        let file = std::fs::OpenOptions::new()
            .write(true)
            .open(journal)
            .map_err(|source| SearchError::Io { path: journal.to_path_buf(), source })?;
        file.set_len(contents.intact_len)
            .map_err(|source| SearchError::Io { path: journal.to_path_buf(), source })?;
    }
    let writer = JournalWriter::append(journal)?;
    let outcome = ctx.execute(Some(writer), &contents.records)?;
    if (outcome.records.len()) < contents.records.len() {
        log::warn!(
            "journal holds {} records but the schedule stopped after {}",
            contents.records.len(),
            outcome.records.len()
        );
    }
    Ok(outcome)
}
