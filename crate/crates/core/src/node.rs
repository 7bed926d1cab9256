//! Slice keys: one entity plus a canonical set of attributes.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("attribute {attribute} is not valid for {entity}")]
    InvalidPair { entity: String, attribute: String },
    #[error("attributes {0} and {1} share subcategory {2:?}")]
    SharedSubcategory(String, String, String),
    #[error("duplicate attribute {0}")]
    DuplicateAttribute(String),
    #[error("node has {got} attributes but depth limit allows {max}")]
    TooDeep { got: usize, max: usize },
    #[error("malformed node id {0:?}")]
    Malformed(String),
}

/// Search node. Attributes are kept strictly ascending so that two nodes
/// with the same attribute set compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    entity: String,
    attributes: Vec<String>,
}

impl Node {
    pub fn root(entity: impl Into<String>) -> Self {
        Node { entity: entity.into(), attributes: Vec::new() }
    }

    /// Build a node, sorting attributes. Fails on duplicates only; use
    /// [`Node::validate`] for corpus constraints.
    pub fn new(entity: impl Into<String>, attributes: impl IntoIterator<Item = impl Into<String>>) -> Result<Self, NodeError> {
        let mut attributes: Vec<String> = attributes.into_iter().map(Into::into).collect();
        attributes.sort();
        if let Some(w) = attributes.windows(2).find(|w| w[0] == w[1]) {
            return Err(NodeError::DuplicateAttribute(w[0].clone()));
        }
        Ok(Node { entity: entity.into(), attributes })
    }

    pub fn parse(id: &str) -> Result<Self, NodeError> {
        let mut parts = id.split('+');
        let entity = parts.next().filter(|e| e.starts_with('E') && e.len() > 1);
        let entity = entity.ok_or_else(|| NodeError::Malformed(id.to_string()))?;
        let attrs: Vec<&str> = parts.collect();
        if attrs.iter().any(|a| !a.starts_with('A') || a.len() < 2) {
            return Err(NodeError::Malformed(id.to_string()));
        }
        let node = Node::new(entity, attrs)?;
        if node.canonical_id() != id {
            return Err(NodeError::Malformed(id.to_string()));
        }
        Ok(node)
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    /// 1 + number of attributes.
    pub fn layer(&self) -> usize {
        1 + self.attributes.len()
    }

    pub fn canonical_id(&self) -> String {
        let mut s = self.entity.clone();
        for a in &self.attributes {
            s.push('+');
            s.push_str(a);
        }
        s
    }

    /// Nodes obtained by removing exactly one attribute.
    pub fn immediate_sub_nodes(&self) -> impl Iterator<Item = Node> + '_ {
        (0..self.attributes.len()).map(move |skip| Node {
            entity: self.entity.clone(),
            attributes: self
                .attributes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, a)| a.clone())
                .collect(),
        })
    }

    /// Node with one more attribute, or `None` if already present.
    pub fn extended(&self, attribute: &str) -> Option<Node> {
        match self.attributes.binary_search_by(|a| a.as_str().cmp(attribute)) {
            Ok(_) => None,
            Err(pos) => {
                let mut attributes = self.attributes.clone();
                attributes.insert(pos, attribute.to_string());
                Some(Node { entity: self.entity.clone(), attributes })
            }
        }
    }

    /// Check validity, subcategory exclusivity and depth against a corpus.
    pub fn validate(&self, corpus: &Corpus, max_depth: usize) -> Result<(), NodeError> {
        if corpus.entity(&self.entity).is_none() {
            return Err(NodeError::UnknownEntity(self.entity.clone()));
        }
        if self.layer() > max_depth {
            return Err(NodeError::TooDeep { got: self.attributes.len(), max: max_depth.saturating_sub(1) });
        }
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for a in &self.attributes {
            if !corpus.is_valid_pair(&self.entity, a) {
                return Err(NodeError::InvalidPair { entity: self.entity.clone(), attribute: a.clone() });
            }
            let sub = corpus.attribute(a).map(|t| t.subcategory.as_str()).unwrap_or_default();
            if let Some((other, _)) = seen.iter().find(|(_, s)| *s == sub) {
                return Err(NodeError::SharedSubcategory(other.to_string(), a.clone(), sub.to_string()));
            }
            seen.push((a, sub));
        }
        Ok(())
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_id())
    }
}

/// Every node in the search space up to `max_depth`, by direct subset
/// enumeration over each entity's valid attributes. Sorted by canonical id.
pub fn enumerate_node_space(corpus: &Corpus, max_depth: usize) -> Vec<Node> {
    let mut out = Vec::new();
    for entity in corpus.entity_ids() {
        let valid = corpus.valid_attributes(entity).unwrap_or(&[]);
        let mut stack: Vec<(usize, Node, BTreeSet<&str>)> = vec![(0, Node::root(entity), BTreeSet::new())];
        while let Some((start, node, subs)) = stack.pop() {
            let depth_left = node.layer() < max_depth;
            if depth_left {
                for (i, a) in valid.iter().enumerate().skip(start) {
                    let sub = corpus.attribute(a).map(|t| t.subcategory.as_str()).unwrap_or_default();
                    if subs.contains(sub) {
                        continue;
                    }
                    let mut next_subs = subs.clone();
                    next_subs.insert(sub);
                    let child = node.extended(a).expect("ascending extension");
                    stack.push((i + 1, child, next_subs));
                }
            }
            out.push(node);
        }
    }
    out.sort_by_key(Node::canonical_id);
    out
}
