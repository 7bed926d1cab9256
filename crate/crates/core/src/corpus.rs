//! Entity–attribute vocabulary that defines the search space.
//!
//! A corpus is loaded once from a JSON document, validated, and then treated
//! as immutable. It owns the validity adjacency (which attributes may be
//! combined with which entity) and the two-level category hierarchy used for
//! the one-attribute-per-subcategory constraint and for distractor sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed corpus document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid id {id:?}: expected {prefix:?} followed by decimal digits")]
    BadId { id: String, prefix: char },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("duplicate {kind} term {term:?} ({id})")]
    DuplicateTerm { kind: TermKind, term: String, id: String },
    #[error("{id}: empty {field}")]
    EmptyField { id: String, field: &'static str },
    #[error("subcategory {subcategory:?} ({id}) maps to both {first:?} and {second:?}")]
    SubcategoryConflict { subcategory: String, id: String, first: String, second: String },
    #[error("validity key {0} is not a known entity")]
    UnknownValidityEntity(String),
    #[error("validity for {entity} references unknown attribute {attribute}")]
    DanglingValidity { entity: String, attribute: String },
    #[error("validity for {entity} lists {attribute} twice")]
    DuplicateValidity { entity: String, attribute: String },
    #[error("slot declared for unknown attribute subcategory {0:?}")]
    UnknownSlotSubcategory(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Entity,
    Attribute,
}

impl TermKind {
    fn prefix(self) -> char {
        match self {
            TermKind::Entity => 'E',
            TermKind::Attribute => 'A',
        }
    }
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermKind::Entity => "entity",
            TermKind::Attribute => "attribute",
        })
    }
}

impl std::str::FromStr for TermKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "entity" => Ok(TermKind::Entity),
            "attribute" => Ok(TermKind::Attribute),
            other => Err(format!("unknown term kind {other:?}")),
        }
    }
}

/// Where an attribute renders in the prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    #[default]
    Descriptive,
    Quantity,
    Action,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEntry {
    pub id: String,
    pub term: String,
    pub category: String,
    pub subcategory: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusDocument {
    schema_version: u32,
    entities: Vec<TermEntry>,
    attributes: Vec<TermEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    slots: BTreeMap<String, Slot>,
    validity: BTreeMap<String, Vec<String>>,
}

/// Validated, immutable corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    entities: Vec<TermEntry>,
    attributes: Vec<TermEntry>,
    slots: BTreeMap<String, Slot>,
    validity: BTreeMap<String, Vec<String>>,
    entity_index: HashMap<String, usize>,
    attribute_index: HashMap<String, usize>,
    entity_terms: HashMap<String, String>,
    attribute_terms: HashMap<String, String>,
    digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KindStats {
    pub terms: usize,
    pub main_categories: usize,
    pub subcategories: usize,
    /// category → subcategory → term count
    pub breakdown: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub entities: KindStats,
    pub attributes: KindStats,
    pub valid_pairs: usize,
}

fn check_id(id: &str, kind: TermKind) -> Result<(), CorpusError> {
    let mut chars = id.chars();
    let ok = chars.next() == Some(kind.prefix())
        && id.len() > 1
        && chars.all(|c| c.is_ascii_digit());
    if ok {
        Ok(())
    } else {
        Err(CorpusError::BadId { id: id.to_string(), prefix: kind.prefix() })
    }
}

fn validate_terms(
    entries: &[TermEntry],
    kind: TermKind,
    seen_ids: &mut BTreeSet<String>,
) -> Result<(HashMap<String, usize>, HashMap<String, String>), CorpusError> {
    let mut index = HashMap::with_capacity(entries.len());
    let mut terms = HashMap::with_capacity(entries.len());
    let mut sub_to_cat: HashMap<&str, (&str, &str)> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        check_id(&e.id, kind)?;
        for (field, value) in [("term", &e.term), ("category", &e.category), ("subcategory", &e.subcategory)] {
            if value.trim().is_empty() {
                return Err(CorpusError::EmptyField { id: e.id.clone(), field });
            }
        }
        if !seen_ids.insert(e.id.clone()) {
            return Err(CorpusError::DuplicateId(e.id.clone()));
        }
        let folded = text::fold(&e.term);
        if terms.insert(folded, e.id.clone()).is_some() {
            return Err(CorpusError::DuplicateTerm { kind, term: e.term.clone(), id: e.id.clone() });
        }
        match sub_to_cat.get(e.subcategory.as_str()) {
            Some((cat, _)) if *cat != e.category => {
                return Err(CorpusError::SubcategoryConflict {
                    subcategory: e.subcategory.clone(),
                    id: e.id.clone(),
                    first: cat.to_string(),
                    second: e.category.clone(),
                });
            }
            Some(_) => {}
            None => {
                sub_to_cat.insert(&e.subcategory, (&e.category, &e.id));
            }
        }
        index.insert(e.id.clone(), i);
    }
    Ok((index, terms))
}

fn kind_stats(entries: &[TermEntry]) -> KindStats {
    let mut breakdown: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for e in entries {
        *breakdown
            .entry(e.category.clone())
            .or_default()
            .entry(e.subcategory.clone())
            .or_default() += 1;
    }
    KindStats {
        terms: entries.len(),
        main_categories: breakdown.len(),
        subcategories: breakdown.values().map(BTreeMap::len).sum(),
        breakdown,
    }
}

impl Corpus {
    /// Build and validate a corpus from its parts.
    pub fn new(
        entities: Vec<TermEntry>,
        attributes: Vec<TermEntry>,
        slots: BTreeMap<String, Slot>,
        validity: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        let (entity_index, entity_terms) = validate_terms(&entities, TermKind::Entity, &mut seen)?;
        let (attribute_index, attribute_terms) =
            validate_terms(&attributes, TermKind::Attribute, &mut seen)?;

        let attribute_subcategories: BTreeSet<&str> =
            attributes.iter().map(|a| a.subcategory.as_str()).collect();
        if let Some(sub) = slots.keys().find(|s| !attribute_subcategories.contains(s.as_str())) {
            return Err(CorpusError::UnknownSlotSubcategory(sub.clone()));
        }

        let mut canonical_validity = BTreeMap::new();
        for (entity, attrs) in validity {
            if !entity_index.contains_key(&entity) {
                return Err(CorpusError::UnknownValidityEntity(entity));
            }
            let mut sorted = attrs;
            if let Some(bad) = sorted.iter().find(|a| !attribute_index.contains_key(*a)) {
                return Err(CorpusError::DanglingValidity { entity, attribute: bad.clone() });
            }
            sorted.sort();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(CorpusError::DuplicateValidity { entity, attribute: w[0].clone() });
            }
            canonical_validity.insert(entity, sorted);
        }

        let mut corpus = Corpus {
            entities,
            attributes,
            slots,
            validity: canonical_validity,
            entity_index,
            attribute_index,
            entity_terms,
            attribute_terms,
            digest: String::new(),
        };
        corpus.digest = hex::encode(Sha256::digest(corpus.to_canonical_json().as_bytes()));
        Ok(corpus)
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let doc: CorpusDocument = serde_json::from_str(s)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(CorpusError::Schema(doc.schema_version));
        }
        Corpus::new(doc.entities, doc.attributes, doc.slots, doc.validity)
    }

    /// Canonical form: entities and attributes ordered by id, validity lists
    /// ascending, pretty-printed with a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut entities = self.entities.clone();
        entities.sort_by(|a, b| a.id.cmp(&b.id));
        let mut attributes = self.attributes.clone();
        attributes.sort_by(|a, b| a.id.cmp(&b.id));
        let doc = CorpusDocument {
            schema_version: SCHEMA_VERSION,
            entities,
            attributes,
            slots: self.slots.clone(),
            validity: self.validity.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("corpus serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn entities(&self) -> &[TermEntry] {
        &self.entities
    }

    pub fn attributes(&self) -> &[TermEntry] {
        &self.attributes
    }

    pub fn entity(&self, id: &str) -> Option<&TermEntry> {
        self.entity_index.get(id).map(|&i| &self.entities[i])
    }

    pub fn attribute(&self, id: &str) -> Option<&TermEntry> {
        self.attribute_index.get(id).map(|&i| &self.attributes[i])
    }

    pub fn term(&self, id: &str) -> Option<&TermEntry> {
        self.entity(id).or_else(|| self.attribute(id))
    }

    /// Entity ids in canonical (ascending) order.
    pub fn entity_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entities.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    /// Attributes that may be combined with `entity`, ascending by id.
    pub fn valid_attributes(&self, entity: &str) -> Result<&[String], CorpusError> {
        if !self.entity_index.contains_key(entity) {
            return Err(CorpusError::UnknownEntity(entity.to_string()));
        }
        Ok(self.validity.get(entity).map(Vec::as_slice).unwrap_or(&[]))
    }

    pub fn is_valid_pair(&self, entity: &str, attribute: &str) -> bool {
        self.validity
            .get(entity)
            .is_some_and(|v| v.binary_search_by(|a| a.as_str().cmp(attribute)).is_ok())
    }

    pub fn slot(&self, subcategory: &str) -> Slot {
        self.slots.get(subcategory).copied().unwrap_or_default()
    }

    pub fn slots(&self) -> &BTreeMap<String, Slot> {
        &self.slots
    }

    pub fn validity(&self) -> &BTreeMap<String, Vec<String>> {
        &self.validity
    }

    /// Other terms of the same kind sharing `id`'s subcategory, ascending by id.
    pub fn siblings(&self, id: &str) -> Vec<&TermEntry> {
        let (pool, entry) = match (self.entity(id), self.attribute(id)) {
            (Some(e), _) => (&self.entities, e),
            (None, Some(a)) => (&self.attributes, a),
            (None, None) => return Vec::new(),
        };
        let mut out: Vec<&TermEntry> = pool
            .iter()
            .filter(|t| t.subcategory == entry.subcategory && t.id != entry.id)
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Look up a term id by surface form using case folding and
    /// single-suffix plural stripping.
    pub fn lookup_term(&self, kind: TermKind, surface: &str) -> Option<&str> {
        let table = match kind {
            TermKind::Entity => &self.entity_terms,
            TermKind::Attribute => &self.attribute_terms,
        };
        let folded = text::fold(surface);
        let matched = text::match_known(&folded, |s| table.contains_key(s))?;
        table.get(matched.as_ref()).map(String::as_str)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            entities: kind_stats(&self.entities),
            attributes: kind_stats(&self.attributes),
            valid_pairs: self.validity.values().map(Vec::len).sum(),
        }
    }
}

/// Read and validate a corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let raw = std::fs::read_to_string(path)?;
    Corpus::from_json(&raw)
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedTerm {
    pub term: String,
    pub kind: TermKind,
    pub frequency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageMode {
    /// Each occurrence counts once.
    #[default]
    FrequencyWeighted,
    /// Each distinct folded term counts once regardless of frequency.
    DistinctTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub source_name: String,
    pub entity_coverage: f64,
    pub attribute_coverage: f64,
    /// Unmatched terms with their total frequency, most frequent first.
    pub unmatched_terms: Vec<(String, u64)>,
    /// Set when a kind had no input terms; its coverage is reported as 1.0.
    pub empty_entity_input: bool,
    pub empty_attribute_input: bool,
}

#[derive(Default)]
struct Tally {
    matched: u64,
    total: u64,
}

impl Tally {
    fn coverage(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Fraction of extracted term occurrences that map onto the corpus vocabulary.
pub fn measure_coverage(
    corpus: &Corpus,
    source_name: &str,
    terms: &[ExtractedTerm],
    mode: CoverageMode,
) -> CoverageReport {
    // Aggregate by (kind, folded term) first so both modes share one pass.
    let mut grouped: BTreeMap<(TermKind, String), u64> = BTreeMap::new();
    for t in terms {
        *grouped.entry((t.kind, text::fold(&t.term))).or_default() += t.frequency;
    }
    let mut entity = Tally::default();
    let mut attribute = Tally::default();
    let mut unmatched: Vec<(String, u64)> = Vec::new();
    for ((kind, folded), freq) in grouped {
        let weight = match mode {
            CoverageMode::FrequencyWeighted => freq,
            CoverageMode::DistinctTerms => 1,
        };
        let tally = match kind {
            TermKind::Entity => &mut entity,
            TermKind::Attribute => &mut attribute,
        };
        tally.total += weight;
        if corpus.lookup_term(kind, &folded).is_some() {
            tally.matched += weight;
        } else {
            unmatched.push((folded, freq));
        }
    }
    unmatched.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    CoverageReport {
        source_name: source_name.to_string(),
        entity_coverage: entity.coverage(),
        attribute_coverage: attribute.coverage(),
        unmatched_terms: unmatched,
        empty_entity_input: entity.total == 0,
        empty_attribute_input: attribute.total == 0,
    }
}

/// Parse a `term<TAB>kind<TAB>frequency` file.
pub fn parse_terms_tsv(raw: &str) -> Result<Vec<ExtractedTerm>, String> {
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(format!("line {}: expected 3 tab-separated columns", lineno + 1));
        }
        let kind = cols[1].parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
        let frequency: u64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad frequency {:?}", lineno + 1, cols[2]))?;
        if frequency == 0 {
            return Err(format!("line {}: frequency must be positive", lineno + 1));
        }
        out.push(ExtractedTerm { term: cols[0].to_string(), kind, frequency });
    }
    Ok(out)
}
