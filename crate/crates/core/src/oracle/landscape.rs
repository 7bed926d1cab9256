//! Planted ground-truth success probabilities for the simulated oracle.
//!
//! For a node with entity `e` and attribute set `N`:
//!
//! ```text
//! raw(S) = p_e · Π_{a∈S} m[e, sub(a)]^c · η_S^(1−c)        (η_∅ = 1)
//! p(N)   = min_{S ⊆ N} raw(S)
//! ```
//!
//! `c` is the correlation strength. At `c = 1` failures are fully explained
//! by shared (entity, subcategory) multipliers and `p(N)` is the plain
//! product. At `c = 0` every node carries its own hashed difficulty
//! `η_S ∈ [floor, 1]`, so outcomes of related nodes say nothing about it.
//! The min over subsets keeps `p` non-increasing under attribute addition.
//! With violation rate `ε > 0`, that fraction of nodes at layer ≥ 2 drops
//! all attribute factors (`p(N) = p_e`), which can exceed a parent's `p`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::node::Node;
use crate::rng::{stream_key, unit_f64, DetRng};

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("failed to read landscape: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed landscape: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid landscape: {0}")]
    Invalid(String),
}

fn default_correlation() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    0.5
}

fn default_entity_success() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedLandscape {
    pub schema_version: u32,
    /// Noise seed for oracle draws, node noise and violations.
    pub seed: u64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    #[serde(default = "default_floor")]
    pub idiosyncratic_floor: f64,
    /// p_e for entities not listed in `entity_success`.
    #[serde(default = "default_entity_success")]
    pub default_entity_success: f64,
    pub entity_success: BTreeMap<String, f64>,
    /// entity → subcategory → multiplier in (0, 1]; missing entries are 1.
    #[serde(default)]
    pub multipliers: BTreeMap<String, BTreeMap<String, f64>>,
}

impl PlantedLandscape {
    pub fn uniform(seed: u64, p: f64) -> Self {
        PlantedLandscape {
            schema_version: 1,
            seed,
            epsilon: 0.0,
            correlation: 1.0,
            idiosyncratic_floor: default_floor(),
            default_entity_success: p,
            entity_success: BTreeMap::new(),
            multipliers: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LandscapeError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.schema_version != 1 {
            return Err(LandscapeError::Invalid(format!("schema_version {}", self.schema_version)));
        }
        if !(unit(self.epsilon) && unit(self.correlation) && unit(self.idiosyncratic_floor)) {
            return Err(LandscapeError::Invalid("epsilon, correlation and floor must lie in [0,1]".into()));
        }
        if let Some((e, p)) = self.entity_success.iter().find(|(_, p)| !unit(**p)) {
            return Err(LandscapeError::Invalid(format!("entity_success[{e}] = {p}")));
        }
        for (e, subs) in &self.multipliers {
            if let Some((s, m)) = subs.iter().find(|(_, m)| !(**m > 0.0 && **m <= 1.0)) {
                return Err(LandscapeError::Invalid(format!("multipliers[{e}][{s}] = {m}")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, LandscapeError> {
        let l: PlantedLandscape = serde_json::from_str(s)?;
        l.validate()?;
        Ok(l)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LandscapeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("landscape serializes");
        s.push('\n');
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Same ground truth, different draw noise.
    pub fn with_seed(&self, seed: u64) -> Self {
        PlantedLandscape { seed, ..self.clone() }
    }

    pub fn entity_success(&self, entity: &str) -> f64 {
        self.entity_success.get(entity).copied().unwrap_or(self.default_entity_success)
    }

    pub fn multiplier(&self, entity: &str, subcategory: &str) -> f64 {
        self.multipliers
            .get(entity)
            .and_then(|m| m.get(subcategory))
            .copied()
            .unwrap_or(1.0)
    }

    fn node_noise(&self, node_id: &str) -> f64 {
        let u = unit_f64(stream_key(self.seed, &format!("eta:{node_id}")));
        self.idiosyncratic_floor + (1.0 - self.idiosyncratic_floor) * u
    }

    fn raw(&self, corpus: &Corpus, entity: &str, attrs: &[&String]) -> f64 {
        let c = self.correlation;
        let mut p = self.entity_success(entity);
        if attrs.is_empty() {
            return p;
        }
        for a in attrs {
            let sub = corpus.attribute(a).map(|t| t.subcategory.as_str()).unwrap_or_default();
            p *= self.multiplier(entity, sub).powf(c);
        }
        if c < 1.0 {
            let mut id = entity.to_string();
            for a in attrs {
                id.push('+');
                id.push_str(a);
            }
            p *= self.node_noise(&id).powf(1.0 - c);
        }
        p
    }

    /// True when this node is one of the planted monotonicity violations.
    pub fn is_violation(&self, node: &Node) -> bool {
        self.epsilon > 0.0
            && !node.attributes().is_empty()
            && unit_f64(stream_key(self.seed, &format!("violation:{node}"))) < self.epsilon
    }

    /// Ground-truth success probability of a node.
    pub fn probability(&self, corpus: &Corpus, node: &Node) -> f64 {
        let entity = node.entity();
        if self.is_violation(node) {
            return self.entity_success(entity).clamp(0.0, 1.0);
        }
        let attrs = node.attributes();
        let k = attrs.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1u32 << k) {
            let subset: Vec<&String> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| &attrs[i]).collect();
            best = best.min(self.raw(corpus, entity, &subset));
        }
        best.clamp(0.0, 1.0)
    }
}

/// Knobs for [`PlantedLandscape::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeParams {
    pub seed: u64,
    /// Exactly `round(rate · entities)` entities get a failing base rate.
    pub entity_failure_rate: f64,
    pub failing_entity_range: (f64, f64),
    pub passing_entity_range: (f64, f64),
    /// Probability that an (entity, subcategory) pair is weak.
    pub weak_pair_rate: f64,
    pub weak_multiplier_range: (f64, f64),
    pub strong_multiplier_range: (f64, f64),
    pub correlation: f64,
    pub epsilon: f64,
    pub idiosyncratic_floor: f64,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        LandscapeParams {
            seed: 0,
            entity_failure_rate: 0.2,
            failing_entity_range: (0.3, 0.65),
            passing_entity_range: (0.93, 1.0),
            weak_pair_rate: 0.5,
            weak_multiplier_range: (0.3, 0.7),
            strong_multiplier_range: (0.95, 1.0),
            correlation: 1.0,
            epsilon: 0.0,
            idiosyncratic_floor: 0.5,
        }
    }
}

impl PlantedLandscape {
    pub fn generate(corpus: &Corpus, params: &LandscapeParams) -> Self {
        let mut rng = DetRng::keyed(params.seed, "landscape");
        let mut entities: Vec<&str> = corpus.entity_ids();
        let n_fail = (params.entity_failure_rate * entities.len() as f64).round() as usize;
        rng.shuffle(&mut entities);
        let mut entity_success = BTreeMap::new();
        for (i, e) in entities.iter().enumerate() {
            let (lo, hi) = if i < n_fail { params.failing_entity_range } else { params.passing_entity_range };
            entity_success.insert(e.to_string(), round6(rng.uniform(lo, hi)));
        }
        let mut subcategories: Vec<&str> = corpus.attributes().iter().map(|a| a.subcategory.as_str()).collect();
        subcategories.sort_unstable();
        subcategories.dedup();
        let mut multipliers = BTreeMap::new();
        for e in corpus.entity_ids() {
            let mut row = BTreeMap::new();
            for s in &subcategories {
                let weak = rng.next_f64() < params.weak_pair_rate;
                let (lo, hi) = if weak { params.weak_multiplier_range } else { params.strong_multiplier_range };
                row.insert(s.to_string(), round6(rng.uniform(lo, hi)));
            }
            multipliers.insert(e.to_string(), row);
        }
        PlantedLandscape {
            schema_version: 1,
            seed: params.seed,
            epsilon: params.epsilon,
            correlation: params.correlation,
            idiosyncratic_floor: params.idiosyncratic_floor,
            default_entity_success: 1.0,
            entity_success,
            multipliers,
        }
    }
}

// Rounded so that the JSON file form reproduces the in-memory landscape exactly.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}
