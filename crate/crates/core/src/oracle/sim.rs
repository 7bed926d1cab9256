use std::sync::Arc;

use super::{Backend, Oracle, OracleError, OracleRequest, OracleResponse, PlantedLandscape};
use crate::corpus::Corpus;
use crate::node::Node;
use crate::prompting::McqQuestion;
use crate::rng::{stream_key, sub_key, DetRng};

/// Mass given to "Others"/"Can not answer" among incorrect answers.
const UNIVERSAL_MASS: f64 = 0.1;

/// Deterministic backend drawing every (image, question) cell from a
/// stream keyed by (landscape seed, node id, image index, question index).
/// Image `i` of a node is therefore identical whatever `n_images` is.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    landscape: PlantedLandscape,
    corpus: Arc<Corpus>,
}

impl SimulatedOracle {
    pub fn new(landscape: PlantedLandscape, corpus: Arc<Corpus>) -> Self {
        SimulatedOracle { landscape, corpus }
    }

    pub fn landscape(&self) -> &PlantedLandscape {
        &self.landscape
    }

    pub fn probability(&self, node: &Node) -> f64 {
        self.landscape.probability(&self.corpus, node)
    }

    fn answer(rng: &mut DetRng, p: f64, q: &McqQuestion) -> usize {
        if rng.next_f64() < p {
            return q.correct_index;
        }
        let substantive = q.substantive_len();
        if substantive <= 1 || rng.next_f64() < UNIVERSAL_MASS {
            return substantive + rng.below(2) as usize;
        }
        let wrong = rng.below(substantive as u64 - 1) as usize;
        if wrong >= q.correct_index {
            wrong + 1
        } else {
            wrong
        }
    }
}

impl Oracle for SimulatedOracle {
    fn evaluate(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        request.validate()?;
        let node = Node::parse(&request.node).map_err(|e| OracleError::InvalidRequest(e.to_string()))?;
        if self.corpus.entity(node.entity()).is_none() {
            return Err(OracleError::InvalidRequest(format!("unknown entity {}", node.entity())));
        }
        let p = self.probability(&node);
        let key = stream_key(self.landscape.seed, &request.node);
        let per_image_answers = (0..u64::from(request.n_images))
            .map(|image| {
                request
                    .questions
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        let mut rng = DetRng::new(sub_key(key, &[image, qi as u64]));
                        Self::answer(&mut rng, p, q)
                    })
                    .collect()
            })
            .collect();
        Ok(OracleResponse { per_image_answers, latency_ms: 0, backend: Backend::Sim })
    }

    fn fingerprint(&self) -> String {
        format!("sim:{}", self.landscape.digest())
    }
}
