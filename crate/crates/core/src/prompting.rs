//! Prompt rendering and multi-choice question construction.
//!
//! A prompt has three parts rendered in a fixed order:
//!
//! 1. base: quantity, descriptive attributes and the entity
//!    ("three small red birds"), prefixed with "An image of";
//! 2. action: action attributes as -ing clauses ("flying upward");
//! 3. background: one sentence per background attribute
//!    ("The time is night.").
//!
//! Which part an attribute lands in is decided by the slot tag of its
//! subcategory in the corpus.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Slot, TermKind};
use crate::node::Node;
use crate::rng::DetRng;
use crate::text;

pub const OPTION_OTHERS: &str = "Others";
pub const OPTION_CANNOT_ANSWER: &str = "Can not answer";
pub const MAX_DISTRACTORS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub base: String,
    pub action: Option<String>,
    pub background: Vec<String>,
}

impl PromptParts {
    pub fn render(&self) -> String {
        let mut s = format!("An image of {}", self.base);
        if let Some(action) = &self.action {
            s.push(' ');
            s.push_str(action);
        }
        s.push('.');
        for sentence in &self.background {
            s.push(' ');
            s.push_str(sentence);
        }
        s
    }
}

/// Split a node into template parts using rule-based grammar.
pub fn prompt_parts(corpus: &Corpus, node: &Node) -> PromptParts {
    let entity = corpus.entity(node.entity()).map(|e| e.term.as_str()).unwrap_or(node.entity());
    let mut quantity: Option<&str> = None;
    let mut descriptive: Vec<&str> = Vec::new();
    let mut actions: Vec<String> = Vec::new();
    let mut background: Vec<String> = Vec::new();
    for id in node.attributes() {
        let Some(attr) = corpus.attribute(id) else { continue };
        match corpus.slot(&attr.subcategory) {
            Slot::Quantity if quantity.is_none() => quantity = Some(&attr.term),
            Slot::Quantity | Slot::Descriptive => descriptive.push(&attr.term),
            Slot::Action => actions.push(text::gerund_clause(&attr.term)),
            Slot::Background => {
                background.push(format!("The {} is {}.", attr.subcategory, attr.term))
            }
        }
    }

    let mut noun_phrase: Vec<String> = descriptive.iter().map(|d| d.to_string()).collect();
    let base = match quantity.map(|q| (q, text::quantity_value(q))) {
        Some((_, Some(n))) if n != 1 => {
            noun_phrase.push(text::pluralize(entity));
            format!("{} {}", text::number_word(n), noun_phrase.join(" "))
        }
        Some((q, None)) => {
            noun_phrase.push(text::pluralize(entity));
            format!("{q} {}", noun_phrase.join(" "))
        }
        _ => {
            noun_phrase.push(entity.to_string());
            let phrase = noun_phrase.join(" ");
            format!("{} {phrase}", text::indefinite_article(&phrase))
        }
    };
    PromptParts {
        base,
        action: (!actions.is_empty()).then(|| actions.join(" and ")),
        background,
    }
}

// ---------------------------------------------------------------------------
// Grammar correction
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("grammar service unavailable: {0}")]
    Transport(String),
    #[error("grammar service returned malformed payload: {0}")]
    Protocol(String),
}

/// Optional external rewriter for minor grammatical fixes.
pub trait GrammarClient: Send + Sync {
    fn correct(&self, text: &str) -> Result<String, GrammarError>;
}

#[derive(Serialize, Deserialize)]
struct CorrectBody {
    text: String,
}

/// `POST {base}/correct {"text": ...} -> {"text": ...}`.
pub struct HttpGrammarClient {
    agent: ureq::Agent,
    url: String,
}

impl HttpGrammarClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpGrammarClient { agent, url: format!("{}/correct", base_url.trim_end_matches('/')) }
    }
}

impl GrammarClient for HttpGrammarClient {
    fn correct(&self, text: &str) -> Result<String, GrammarError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(CorrectBody { text: text.to_string() })
            .map_err(|e| GrammarError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(GrammarError::Transport(format!("HTTP {}", resp.status())));
        }
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GrammarError::Transport(e.to_string()))?;
        let body: CorrectBody =
            serde_json::from_str(&raw).map_err(|e| GrammarError::Protocol(format!("{e}: {raw}")))?;
        if body.text.trim().is_empty() {
            return Err(GrammarError::Protocol(raw));
        }
        Ok(body.text)
    }
}

/// Grammar client plus a cache keyed by the raw template render.
pub struct GrammarCache {
    client: Box<dyn GrammarClient>,
    cache: Mutex<HashMap<String, String>>,
}

impl GrammarCache {
    pub fn new(client: Box<dyn GrammarClient>) -> Self {
        GrammarCache { client, cache: Mutex::new(HashMap::new()) }
    }

    fn correct(&self, raw: &str) -> Result<String, GrammarError> {
        if let Some(hit) = self.cache.lock().expect("grammar cache poisoned").get(raw) {
            return Ok(hit.clone());
        }
        let fixed = self.client.correct(raw)?;
        self.cache
            .lock()
            .expect("grammar cache poisoned")
            .insert(raw.to_string(), fixed.clone());
        Ok(fixed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// The grammar client was configured but failed; `text` is the rule-based render.
    pub grammar_fallback: bool,
}

pub fn build_prompt(corpus: &Corpus, node: &Node, grammar: Option<&GrammarCache>) -> RenderedPrompt {
    let raw = prompt_parts(corpus, node).render();
    match grammar {
        None => RenderedPrompt { text: raw, grammar_fallback: false },
        Some(g) => match g.correct(&raw) {
            Ok(text) => RenderedPrompt { text, grammar_fallback: false },
            Err(e) => {
                log::warn!("grammar correction failed for {node}: {e}; using rule-based render");
                RenderedPrompt { text: raw, grammar_fallback: true }
            }
        },
    }
}

// ---------------------------------------------------------------------------
// Multi-choice questions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqQuestion {
    pub target_id: String,
    pub target_term: String,
    pub target_kind: TermKind,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
}

impl McqQuestion {
    pub fn is_universal(&self, index: usize) -> bool {
        index + 2 >= self.options.len()
    }

    /// Number of options that are not "Others" / "Can not answer".
    pub fn substantive_len(&self) -> usize {
        self.options.len() - 2
    }
}

fn question_text(corpus: &Corpus, node: &Node, kind: TermKind, subcategory: &str) -> String {
    match kind {
        TermKind::Entity => "What is the main object?".to_string(),
        TermKind::Attribute => {
            let entity = corpus.entity(node.entity()).map(|e| e.term.as_str()).unwrap_or("object");
            format!("What is the {subcategory} of the {entity}?")
        }
    }
}

/// One entity question followed by one question per attribute.
///
/// Distractors are a uniform sample without replacement from same-subcategory
/// siblings; option order is a seeded shuffle of the substantive options
/// followed by the two universal options. The stream is keyed by
/// `(seed, canonical node id)`.
pub fn build_questions(corpus: &Corpus, node: &Node, seed: u64) -> Vec<McqQuestion> {
    let mut rng = DetRng::keyed(seed, &node.canonical_id());
    let targets = std::iter::once((node.entity(), TermKind::Entity))
        .chain(node.attributes().iter().map(|a| (a.as_str(), TermKind::Attribute)));
    targets
        .filter_map(|(id, kind)| {
            let entry = corpus.term(id)?;
            let siblings = corpus.siblings(id);
            let picks = rng.sample_indices(siblings.len(), MAX_DISTRACTORS);
            let mut substantive: Vec<&str> = vec![entry.term.as_str()];
            substantive.extend(picks.iter().map(|&i| siblings[i].term.as_str()));
            rng.shuffle(&mut substantive);
            let correct_index = substantive.iter().position(|t| *t == entry.term).expect("target present");
            let mut options: Vec<String> = substantive.into_iter().map(str::to_string).collect();
            options.push(OPTION_OTHERS.to_string());
            options.push(OPTION_CANNOT_ANSWER.to_string());
            Some(McqQuestion {
                target_id: id.to_string(),
                target_term: entry.term.clone(),
                target_kind: kind,
                question: question_text(corpus, node, kind, &entry.subcategory),
                options,
                correct_index,
            })
        })
        .collect()
}
