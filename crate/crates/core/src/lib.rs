//! Layered search engine for mapping the failure landscape of
//! text-to-image models.
//!
//! The search space is every combination of one corpus entity with up to
//! `max_depth - 1` valid attributes (at most one per subcategory). Nodes are
//! explored layer by layer; a node is only admitted once all of its
//! immediate sub-nodes have been explored and succeeded, so every reported
//! error slice is minimal. Within a layer, an online-trained success-rate
//! predictor orders the frontier so likely failures are evaluated first.

pub mod attribution;
pub mod corpus;
pub mod node;
pub mod oracle;
pub mod prioritizer;
pub mod prompting;
pub mod reporting;
pub mod rng;
pub mod search;
pub mod synthetic;
pub mod text;
