//! Generate-and-evaluate backends.
//!
//! An oracle takes a rendered prompt with its multi-choice questions,
//! "generates" `n_images` images and returns, per image, the option index
//! chosen for every question. [`score`] pools the answer matrix into a
//! success count.

mod http;
mod landscape;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::McqQuestion;

pub use http::{HttpOracle, HttpOracleConfig};
pub use landscape::{LandscapeError, LandscapeParams, PlantedLandscape};
pub use sim::SimulatedOracle;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("oracle unreachable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("oracle rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("protocol error: {message}; payload: {payload}")]
    Protocol { message: String, payload: String },
    #[error("answer matrix is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    Dimension { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub node: String,
    pub prompt: String,
    pub questions: Vec<McqQuestion>,
    pub n_images: u32,
    pub seed: u64,
}

impl OracleRequest {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.n_images == 0 {
            return Err(OracleError::InvalidRequest("n_images must be at least 1".into()));
        }
        if self.questions.is_empty() {
            return Err(OracleError::InvalidRequest("no questions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sim,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    /// `[n_images][n_questions]` chosen option indices.
    pub per_image_answers: Vec<Vec<usize>>,
    pub latency_ms: u64,
    pub backend: Backend,
}

/// A black-box generate-and-evaluate service.
pub trait Oracle: Send + Sync {
    fn evaluate(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError>;

    /// Stable identity of the backend configuration, folded into run hashes.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub n_correct: u32,
    pub n_checks: u32,
    /// (target term, correct count) in question order.
    pub per_question: Vec<(String, u32)>,
}

/// Pool every (image, question) cell. Universal options are never correct.
pub fn score(response: &OracleResponse, questions: &[McqQuestion]) -> Result<Score, OracleError> {
    let rows = response.per_image_answers.len();
    let mut per_question: Vec<(String, u32)> =
        questions.iter().map(|q| (q.target_term.clone(), 0)).collect();
    for answers in &response.per_image_answers {
        if answers.len() != questions.len() {
            return Err(OracleError::Dimension {
                rows,
                cols: questions.len(),
                got_rows: rows,
                got_cols: answers.len(),
            });
        }
        for ((q, &a), slot) in questions.iter().zip(answers).zip(per_question.iter_mut()) {
            if a == q.correct_index {
                slot.1 += 1;
            }
        }
    }
    Ok(Score {
        n_correct: per_question.iter().map(|(_, c)| c).sum(),
        n_checks: (rows * questions.len()) as u32,
        per_question,
    })
}
