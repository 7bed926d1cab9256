//! Online-trained success-rate predictor used to order the frontier.

mod embedding;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::Node;
use crate::rng::DetRng;

pub use embedding::{embed_node, hashed_vector, EmbeddingProvider, EmbeddingSource, NodeEmbedding};
pub use model::{ForwardTrace, ModelConfig, PredictorModel};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("no embedding for term {0}")]
    MissingEmbedding(String),
    #[error("embedding file: {0}")]
    Embedding(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged (non-finite loss at epoch {epoch})")]
    NonFinite { epoch: usize },
    #[error("cannot train on an empty ledger")]
    EmptyLedger,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, learning_rate: 0.2, batch_size: 32, clip_norm: 1.0, seed: 0 }
    }
}

/// Mean absolute error and per-example gradient of a model over a batch.
fn batch_gradient(model: &PredictorModel, batch: &[&(NodeEmbedding, f64)]) -> Result<(f64, PredictorModel), PredictorError> {
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (x, target) in batch {
        let trace = model.forward(x)?;
        let diff = trace.output() - target;
        loss += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        model.backward(x, &trace, sign / n, &mut grad);
    }
    Ok((loss / n, grad))
}

/// L1 loss gradient for a single example; exposed for gradient checking.
pub fn l1_loss_and_gradient(model: &PredictorModel, x: &NodeEmbedding, target: f64) -> Result<(f64, PredictorModel), PredictorError> {
    let example = (x.clone(), target);
    batch_gradient(model, &[&example])
}

/// Mini-batch gradient descent on L1 loss from a fresh seeded init.
/// Returns the model and its final training L1.
pub fn train(
    config: ModelConfig,
    train_config: &TrainConfig,
    examples: &[(NodeEmbedding, f64)],
) -> Result<(PredictorModel, f64), PredictorError> {
    if examples.is_empty() {
        return Err(PredictorError::EmptyLedger);
    }
    let mut model = PredictorModel::init(config, train_config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..train_config.epochs {
        DetRng::keyed(train_config.seed, &format!("epoch:{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(train_config.batch_size.max(1)) {
            let batch: Vec<&(NodeEmbedding, f64)> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grad) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() {
                return Err(PredictorError::NonFinite { epoch });
            }
            let mut grads = grad.tensors_mut();
            let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(PredictorError::NonFinite { epoch });
            }
            let scale = if norm > train_config.clip_norm { train_config.clip_norm / norm } else { 1.0 };
            let step = train_config.learning_rate * scale;
            for ((_, p), (_, g)) in model.tensors_mut().into_iter().zip(grads.iter_mut()) {
                p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= step * g);
            }
        }
    }
    let l1 = mean_l1(&model, examples)?;
    if !l1.is_finite() {
        return Err(PredictorError::NonFinite { epoch: train_config.epochs });
    }
    Ok((model, l1))
}

pub fn mean_l1(model: &PredictorModel, examples: &[(NodeEmbedding, f64)]) -> Result<f64, PredictorError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in examples {
        total += (model.predict(x)? - y).abs();
    }
    Ok(total / examples.len() as f64)
}

/// One point of the held-out L1 curve: the model trained on the first
/// `trained_on` observations, scored on the next `evaluated_on`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Point {
    pub trained_on: usize,
    pub evaluated_on: usize,
    pub l1: f64,
    /// L1 of the constant 0.5 predictor on the same observations.
    pub baseline_l1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLedger {
    pub dataset: Vec<(Node, f64)>,
    pub validation_l1: Vec<L1Point>,
    /// Number of observations the current model was trained on.
    pub trained_on: usize,
    pub failed_retrains: usize,
}

/// Predictor plus its training data, owned by the search loop.
#[derive(Debug, Clone)]
pub struct Prioritizer {
    provider: EmbeddingProvider,
    model_config: ModelConfig,
    train_config: TrainConfig,
    max_depth: usize,
    model: Option<PredictorModel>,
    ledger: TrainingLedger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetrainOutcome {
    Trained { train_l1: f64 },
    /// Training diverged; the previous model is kept.
    KeptPrevious,
    NothingNew,
}

impl Prioritizer {
    pub fn new(provider: EmbeddingProvider, model_config: ModelConfig, train_config: TrainConfig, max_depth: usize) -> Self {
        Prioritizer { provider, model_config, train_config, max_depth, model: None, ledger: TrainingLedger::default() }
    }

    pub fn model(&self) -> Option<&PredictorModel> {
        self.model.as_ref()
    }

    pub fn ledger(&self) -> &TrainingLedger {
        &self.ledger
    }

    pub fn embed(&self, node: &Node) -> Result<NodeEmbedding, PredictorError> {
        embed_node(&self.provider, node, self.max_depth)
    }

    pub fn observe(&mut self, node: Node, success_rate: f64) {
        self.ledger.dataset.push((node, success_rate));
    }

    fn examples(&self, range: std::ops::Range<usize>) -> Result<Vec<(NodeEmbedding, f64)>, PredictorError> {
        self.ledger.dataset[range]
            .iter()
            .map(|(n, y)| Ok((self.embed(n)?, *y)))
            .collect()
    }

    /// Score the current model on data observed since it was trained, then
    /// retrain from the seeded initialization on everything.
    pub fn retrain(&mut self) -> Result<RetrainOutcome, PredictorError> {
        let total = self.ledger.dataset.len();
        if total == 0 || total == self.ledger.trained_on {
            return Ok(RetrainOutcome::NothingNew);
        }
        if let Some(model) = &self.model {
            let held_out = self.examples(self.ledger.trained_on..total)?;
            let baseline = held_out.iter().map(|(_, y)| (y - 0.5).abs()).sum::<f64>() / held_out.len() as f64;
            self.ledger.validation_l1.push(L1Point {
                trained_on: self.ledger.trained_on,
                evaluated_on: held_out.len(),
                l1: mean_l1(model, &held_out)?,
                baseline_l1: baseline,
            });
        }
        let all = self.examples(0..total)?;
        match train(self.model_config, &self.train_config, &all) {
            Ok((model, train_l1)) => {
                self.model = Some(model);
                self.ledger.trained_on = total;
                Ok(RetrainOutcome::Trained { train_l1 })
            }
            Err(PredictorError::NonFinite { epoch }) => {
                log::warn!("predictor retrain diverged at epoch {epoch}; keeping previous model");
                self.ledger.failed_retrains += 1;
                self.ledger.trained_on = total;
                Ok(RetrainOutcome::KeptPrevious)
            }
            Err(e) => Err(e),
        }
    }

    pub fn predict(&self, node: &Node) -> Result<Option<f64>, PredictorError> {
        match &self.model {
            None => Ok(None),
            Some(m) => Ok(Some(m.predict(&self.embed(node)?)?)),
        }
    }

    /// Most-likely failures first; canonical order before the first training.
    pub fn prioritize(&self, frontier: Vec<Node>) -> Result<Vec<Node>, PredictorError> {
        prioritize(self.model.as_ref(), frontier, |n| self.embed(n))
    }
}

/// Order nodes by ascending predicted success, ties by canonical id. With no
/// model the canonical order is returned.
pub fn prioritize<F>(model: Option<&PredictorModel>, frontier: Vec<Node>, embed: F) -> Result<Vec<Node>, PredictorError>
where
    F: Fn(&Node) -> Result<NodeEmbedding, PredictorError>,
{
    let mut keyed: Vec<(f64, String, Node)> = Vec::with_capacity(frontier.len());
    for node in frontier {
        let score = match model {
            Some(m) => m.predict(&embed(&node)?)?,
            None => 0.0,
        };
        keyed.push((score, node.canonical_id(), node));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, n)| n).collect())
}
