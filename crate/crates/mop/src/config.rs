//! The single JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};
use std::time::Duration;

use mop_core::embed::{Embedder, HashingEmbedder};
use mop_core::lm::{CharNgramLm, CharVocab, LanguageModel, NgramConfig};
use mop_core::metrics::MetricConfig;
use mop_core::persona::SynthConfig;
use mop_core::prompt::TaskTemplates;
use mop_core::simulate::{LabelMode, SimConfig};
use mop_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::cache::CachedLm;
use crate::error::{CliError, CliResult};
use crate::io::{parse_corpus, read_versioned};
use crate::remote::{RemoteConfig, RemoteEmbedder, RemoteLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in task name (`agnews`, `yelp`, `sst2`, `imdb`, `plain`).
    pub task: String,
    /// Replaces the built-in templates of `task` when given.
    #[serde(default)]
    pub templates: Option<TaskTemplates>,
    /// Population records (JSON lines).
    pub records: PathBuf,
    /// Reference set for `evaluate`.
    #[serde(default)]
    pub golden: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub backend: BackendSpec,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default = "default_synth")]
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Exemplar pool size N.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_synth() -> SynthConfig {
    SynthConfig::default()
}

fn default_pool_size() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Character n-gram model trained on a corpus file (documents separated
    /// by blank lines).
    Toy {
        corpus: PathBuf,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_cache_weight")]
        cache_weight: f64,
        /// Characters of the model; others map to one unknown token.
        /// Printable ASCII and newline when absent.
        #[serde(default)]
        alphabet: Option<String>,
    },
    Remote(RemoteConfig),
}

fn default_order() -> usize {
    NgramConfig::default().order
}

fn default_alpha() -> f64 {
    NgramConfig::default().alpha
}

fn default_cache_weight() -> f64 {
    NgramConfig::default().cache_weight
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_ngram")]
        ngram: usize,
    },
    Remote {
        url: String,
        #[serde(default = "default_timeout")]
        timeout_s: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_dim() -> usize {
    256
}

fn default_ngram() -> usize {
    3
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashing {
            dim: default_dim(),
            ngram: default_ngram(),
        }
    }
}

/// Which contexts `generate` conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextsSpec {
    /// Contexts of the population records, in file order.
    Records,
    /// No context (tasks whose templates have none).
    Empty,
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    pub contexts: ContextsSpec,
    /// Draw contexts with replacement instead of cycling.
    pub sample_contexts: bool,
    pub label: Option<LabelMode>,
    /// Persona-mixing size L.
    pub mix: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 5000,
            seed: 0,
            contexts: ContextsSpec::Records,
            sample_contexts: false,
            label: None,
            mix: None,
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = read_versioned(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn templates(&self) -> CliResult<TaskTemplates> {
        let t = match &self.templates {
            Some(t) => t.clone(),
            None => TaskTemplates::builtin(&self.task).ok_or_else(|| {
                CliError::Invalid(format!(
                    "unknown task {:?}; built-in tasks are {}",
                    self.task,
                    TaskTemplates::builtin_names().join(", ")
                ))
            })?,
        };
        t.validate()?;
        Ok(t)
    }

    /// Checks everything that can be checked without touching files.
    pub fn validate(&self) -> CliResult<()> {
        self.templates()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.pool_size == 0 {
            return Err(CliError::Invalid("pool_size must be positive".into()));
        }
        if self.sim.max_tokens == 0 {
            return Err(CliError::Invalid("sim.max_tokens must be positive".into()));
        }
        if self.generate.count == 0 {
            return Err(CliError::Invalid("generate.count must be positive".into()));
        }
        if let BackendSpec::Toy {
            order,
            alpha,
            cache_weight,
            ..
        } = &self.backend
        {
            if *order == 0 || !(*alpha > 0.0) || !(0.0..1.0).contains(cache_weight) {
                return Err(CliError::Invalid(
                    "toy backend needs order >= 1, alpha > 0 and cache_weight in [0, 1)".into(),
                ));
            }
        }
        if let EmbedderSpec::Hashing { dim, ngram } = &self.embedder {
            if *dim == 0 || *ngram == 0 {
                return Err(CliError::Invalid("hashing embedder needs positive dim and ngram".into()));
            }
        }
        Ok(())
    }
}

/// Joins `p` onto `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub type Backend = CachedLm<Box<dyn LanguageModel + Send + Sync>>;

pub fn open_backend(spec: &BackendSpec, base: &Path) -> CliResult<Backend> {
    let lm: Box<dyn LanguageModel + Send + Sync> = match spec {
        BackendSpec::Toy {
            corpus,
            order,
            alpha,
            cache_weight,
            alphabet,
        } => {
            let vocab = match alphabet {
                Some(a) => CharVocab::with_unknown(a),
                None => CharVocab::ascii(),
            };
            let docs = parse_corpus(&read_versioned(&resolve(base, corpus))?);
            let cfg = NgramConfig {
                order: *order,
                alpha: *alpha,
                cache_weight: *cache_weight,
            };
            Box::new(CharNgramLm::train(vocab, cfg, &docs)?)
        }
        BackendSpec::Remote(r) => Box::new(RemoteLm::connect(r)?),
    };
    Ok(CachedLm::new(lm))
}

pub fn open_embedder(spec: &EmbedderSpec) -> CliResult<Box<dyn Embedder + Send + Sync>> {
    Ok(match spec {
        EmbedderSpec::Hashing { dim, ngram } => Box::new(HashingEmbedder::new(*dim, *ngram)),
        EmbedderSpec::Remote {
            url,
            timeout_s,
            retries,
        } => Box::new(RemoteEmbedder::connect(url, Duration::from_secs(*timeout_s), *retries)?),
    })
}
