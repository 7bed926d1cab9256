use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use atlas_core::corpus::{load_corpus, Corpus};
use atlas_core::oracle::{HttpOracle, HttpOracleConfig, LandscapeParams, Oracle, PlantedLandscape, SimulatedOracle};
use atlas_core::prioritizer::EmbeddingProvider;
use atlas_core::prompting::{GrammarCache, HttpGrammarClient};
use atlas_core::search::{SearchConfig, SearchContext};
use serde::{Deserialize, Serialize};

use crate::invalid;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const TOKEN_ENV: &str = "ATLAS_ORACLE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSelection {
    pub backend: Backend,
    /// Planted landscape file for the simulated backend. When absent a
    /// landscape is generated from the run seed.
    pub landscape: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub backoff_secs: Vec<u64>,
    /// In-flight HTTP calls; defaults to the worker count.
    pub max_concurrency: Option<usize>,
}

impl Default for OracleSelection {
    fn default() -> Self {
        OracleSelection {
            backend: Backend::Sim,
            landscape: None,
            url: None,
            timeout_secs: 600,
            backoff_secs: vec![1, 4, 16],
            max_concurrency: None,
        }
    }
}

/// Fully resolved settings of a run. Written next to the journal so
/// `resume`, `report` and `attribute` can rebuild the same context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub grammar_url: Option<String>,
    pub oracle: OracleSelection,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display())).map_err(invalid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
    }

    /// Make file paths absolute so the saved config works from any directory.
    pub fn absolutize(&mut self) -> Result<()> {
        for p in [&mut self.corpus, &mut self.embeddings, &mut self.oracle.landscape].into_iter().flatten() {
            *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or_else(|| invalid(anyhow::anyhow!("no corpus given (use --corpus)")))
    }
}

pub fn read_corpus(path: &Path) -> Result<Arc<Corpus>> {
    let corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display())).map_err(invalid)?;
    Ok(Arc::new(corpus))
}

/// Everything a [`SearchContext`] borrows, owned in one place.
pub struct Runtime {
    pub corpus: Arc<Corpus>,
    pub oracle: Box<dyn Oracle>,
    pub grammar: Option<GrammarCache>,
    pub embeddings: Option<EmbeddingProvider>,
    pub search: SearchConfig,
}

impl Runtime {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.search.validate().map_err(invalid)?;
        let corpus = read_corpus(config.corpus_path()?)?;
        let o = &config.oracle;
        let oracle: Box<dyn Oracle> = match o.backend {
            Backend::Sim => {
                let landscape = match &o.landscape {
                    Some(path) => PlantedLandscape::load(path)
                        .with_context(|| format!("loading landscape {}", path.display()))
                        .map_err(invalid)?,
                    None => PlantedLandscape::generate(&corpus, &LandscapeParams { seed: config.search.seed, ..Default::default() }),
                };
                Box::new(SimulatedOracle::new(landscape, corpus.clone()))
            }
            Backend::Http => {
                let url = o.url.clone().ok_or_else(|| invalid(anyhow::anyhow!("--oracle http needs --oracle-url")))?;
                Box::new(HttpOracle::new(HttpOracleConfig {
                    base_url: url,
                    timeout: Duration::from_secs(o.timeout_secs),
                    backoff: o.backoff_secs.iter().copied().map(Duration::from_secs).collect(),
                    max_concurrency: o.max_concurrency.unwrap_or(config.search.workers),
                    token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                }))
            }
        };
        let grammar = config
            .grammar_url
            .as_deref()
            .map(|url| GrammarCache::new(Box::new(HttpGrammarClient::new(url, Duration::from_secs(o.timeout_secs)))));
        let embeddings = match &config.embeddings {
            Some(path) => {
                let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(invalid)?;
                let provider = EmbeddingProvider::from_jsonl(std::io::BufReader::new(file), &corpus)
                    .with_context(|| format!("loading embeddings {}", path.display()))
                    .map_err(invalid)?;
                Some(provider)
            }
            None => None,
        };
        Ok(Runtime { corpus, oracle, grammar, embeddings, search: config.search.clone() })
    }

    pub fn context(&self, grammar_label: Option<&str>) -> Result<SearchContext<'_>> {
        let mut ctx = SearchContext::new(&self.corpus, &self.search, self.oracle.as_ref()).map_err(invalid)?;
        if let (Some(cache), Some(label)) = (&self.grammar, grammar_label) {
            ctx = ctx.with_grammar(cache, label);
        }
        if let Some(provider) = &self.embeddings {
            ctx = ctx.with_embeddings(provider.clone());
        }
        Ok(ctx)
    }
}

/// Run config saved next to a journal, if any.
pub fn sibling_config(journal: &Path) -> Result<Option<RunConfig>> {
    let path = journal.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE);
    if path.exists() {
        RunConfig::load(&path).map(Some)
    } else {
        Ok(None)
    }
}
