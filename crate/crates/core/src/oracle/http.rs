use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Oracle, OracleError, OracleRequest, OracleResponse};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpOracleConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Waits before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
    pub max_concurrency: usize,
    pub token: Option<String>,
}

impl HttpOracleConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpOracleConfig {
            base_url: base_url.into(),
            timeout: Duration::from_secs(600),
            backoff: [1, 4, 16].into_iter().map(Duration::from_secs).collect(),
            max_concurrency: 4,
            token: None,
        }
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    n_images: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    #[allow(dead_code)]
    batch_id: String,
    image_ids: Vec<String>,
}

#[derive(Serialize)]
struct WireQuestion<'a> {
    question: &'a str,
    options: &'a [String],
}

#[derive(Serialize)]
struct EvaluateRequest<'a> {
    image_id: &'a str,
    questions: Vec<WireQuestion<'a>>,
}

#[derive(Deserialize)]
struct EvaluateResponse {
    answers: Vec<usize>,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Client for a remote generate/evaluate service.
///
/// 5xx responses and transport failures are retried with the configured
/// backoff; 4xx responses fail the node immediately.
pub struct HttpOracle {
    config: HttpOracleConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

enum Attempt {
    Retry(String),
    Fatal(OracleError),
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let slots = Semaphore { permits: Mutex::new(config.max_concurrency.max(1)), freed: Condvar::new() };
        HttpOracle { config, agent, slots }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt<B: Serialize, T: DeserializeOwned>(&self, url: &str, body: &B) -> Result<T, Attempt> {
        let mut req = self.agent.post(url);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let raw = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&raw).map_err(|e| {
                log::error!("malformed oracle payload from {url}: {raw}");
                Attempt::Fatal(OracleError::Protocol { message: e.to_string(), payload: raw })
            }),
            500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {raw}"))),
            _ => Err(Attempt::Fatal(OracleError::Rejected { status, body: raw })),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, OracleError> {
        let url = self.url(path);
        let _permit = self.slots.acquire();
        let mut last = String::new();
        let attempts = self.config.backoff.len() as u32 + 1;
        for attempt in 0..attempts {
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("oracle call {url} failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                    if let Some(wait) = self.config.backoff.get(attempt as usize) {
                        std::thread::sleep(*wait);
                    }
                }
            }
        }
        Err(OracleError::Transport { attempts, message: last })
    }
}

impl Oracle for HttpOracle {
    fn evaluate(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        request.validate()?;
        let started = Instant::now();
        let generated: GenerateResponse = self.post(
            "/v1/generate",
            &GenerateRequest { prompt: &request.prompt, n_images: request.n_images, seed: request.seed },
        )?;
        if generated.image_ids.len() != request.n_images as usize {
            return Err(OracleError::Protocol {
                message: format!("expected {} image ids, got {}", request.n_images, generated.image_ids.len()),
                payload: format!("{:?}", generated.image_ids),
            });
        }
        let mut per_image_answers = Vec::with_capacity(generated.image_ids.len());
        for image_id in &generated.image_ids {
            let body = EvaluateRequest {
                image_id,
                questions: request
                    .questions
                    .iter()
                    .map(|q| WireQuestion { question: &q.question, options: &q.options })
                    .collect(),
            };
            let evaluated: EvaluateResponse = self.post("/v1/evaluate", &body)?;
            let in_range = evaluated.answers.len() == request.questions.len()
                && evaluated.answers.iter().zip(&request.questions).all(|(a, q)| *a < q.options.len());
            if !in_range {
                return Err(OracleError::Protocol {
                    message: format!("answers for {image_id} do not match the questions"),
                    payload: format!("{:?}", evaluated.answers),
                });
            }
            per_image_answers.push(evaluated.answers);
        }
        Ok(OracleResponse {
            per_image_answers,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: Backend::Http,
        })
    }

    fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.config.base_url.as_bytes());
        format!("http:{}", &hex::encode(digest)[..16])
    }
}
