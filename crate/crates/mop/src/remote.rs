//! HTTP clients for a model server: full-logit scoring, top-k log-prob
//! scoring (approximate), generation and embeddings.

use std::sync::Arc;
use std::time::Duration;

use mop_core::embed::{Embedder, EmbedderFingerprint};
use mop_core::lm::{LanguageModel, RowSupport, ScoreSheet, TokenScoreRow};
use mop_core::math::Matrix;
use mop_core::{Error, Result};
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};

/// Environment variable holding the bearer token for the model server.
pub const TOKEN_ENV: &str = "MOP_API_TOKEN";

/// Floor on the probability mass left outside a top-k list.
pub const REST_EPS: f64 = 1e-10;

/// A float sent either as a JSON number or as a decimal string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireF64(pub f64);

impl<'de> Deserialize<'de> for WireF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(WireF64(v)),
            Raw::Text(s) => {
                let t = s.trim();
                let v = match t {
                    "inf" | "+inf" | "Infinity" | "+Infinity" => f64::INFINITY,
                    "-inf" | "-Infinity" => f64::NEG_INFINITY,
                    _ => t.parse().map_err(|_| de::Error::custom(format!("not a float: {s:?}")))?,
                };
                Ok(WireF64(v))
            }
        }
    }
}

impl Serialize for WireF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRequest<'a> {
    pub prompt: &'a str,
    pub continuation: &'a str,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToken {
    pub target_id: u32,
    pub target_logit: WireF64,
    #[serde(default)]
    pub topk_ids: Vec<u32>,
    #[serde(default)]
    pub topk_logits: Vec<WireF64>,
    /// `null` or absent means nothing lies outside the top-k.
    #[serde(default)]
    pub rest_logsumexp: Option<WireF64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub tokens: Vec<WireToken>,
    pub vocab_size: usize,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedRequest<'a> {
    pub texts: &'a [&'a str],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<WireF64>>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model_fingerprint: String,
    pub encoder_fingerprint: String,
    pub vocab_size: usize,
    pub dim: usize,
}

/// How `/v1/score` rows are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Raw logits with an exact `rest_logsumexp`; exact at every temperature
    /// when `top_k` is 0 (full rows).
    FullLogit,
    /// Normalized top-k log-probabilities only. The remainder is
    /// `ln(max(REST_EPS, 1 - sum exp(logprob)))`. Approximate.
    TopKLogprobs,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::validation(msg)
}

/// Converts one wire row. `vocab_size` decides whether a row without a
/// remainder is a full row.
pub fn row_from_wire(t: &WireToken, vocab_size: usize, flavor: Flavor) -> Result<TokenScoreRow> {
    if t.topk_ids.len() != t.topk_logits.len() {
        return Err(invalid("topk_ids and topk_logits differ in length"));
    }
    if !t.target_logit.0.is_finite() || t.topk_logits.iter().any(|z| !z.0.is_finite()) {
        return Err(invalid("non-finite logit in score row"));
    }
    let logits: Vec<f64> = t.topk_logits.iter().map(|z| z.0).collect();
    let rest = match flavor {
        Flavor::FullLogit => t.rest_logsumexp.map_or(f64::NEG_INFINITY, |r| r.0),
        Flavor::TopKLogprobs => {
            let mass: f64 = logits.iter().map(|l| l.exp()).sum();
            (1.0 - mass).max(REST_EPS).ln()
        }
    };
    if rest.is_nan() || rest == f64::INFINITY {
        return Err(invalid("rest_logsumexp must be finite or -inf"));
    }
    let full = rest == f64::NEG_INFINITY && t.topk_ids.len() == vocab_size;
    let support = if full {
        let mut row = vec![f64::NAN; vocab_size];
        for (&id, &z) in t.topk_ids.iter().zip(&logits) {
            let slot = row
                .get_mut(id as usize)
                .ok_or_else(|| invalid(format!("token id {id} outside vocabulary of {vocab_size}")))?;
            *slot = z;
        }
        if row.iter().any(|z| z.is_nan()) {
            return Err(invalid("full row repeats a token id"));
        }
        RowSupport::Full { logits: row }
    } else {
        if rest == f64::NEG_INFINITY && !t.topk_ids.contains(&t.target_id) {
            return Err(invalid("target outside top-k but no remainder mass"));
        }
        RowSupport::TopK {
            ids: t.topk_ids.clone(),
            logits,
            rest_logsumexp: rest,
        }
    };
    Ok(TokenScoreRow {
        target: t.target_id,
        target_logit: t.target_logit.0,
        support,
    })
}

pub fn sheet_from_wire(
    resp: &ScoreResponse,
    flavor: Flavor,
    prompt: &str,
    continuation: &str,
) -> Result<ScoreSheet> {
    if resp.tokens.is_empty() {
        return Err(invalid("score response has no tokens"));
    }
    let rows = resp
        .tokens
        .iter()
        .map(|t| row_from_wire(t, resp.vocab_size, flavor))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSheet::new(rows, prompt, continuation))
}

/// Shared HTTP plumbing: base URL, bearer token, retries.
#[derive(Clone)]
struct Http {
    base: String,
    agent: ureq::Agent,
    token: Option<String>,
    retries: u32,
}

impl Http {
    fn new(base: &str, timeout: Duration, retries: u32, token: Option<String>) -> Self {
        Http {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            token,
            retries,
        }
    }

    fn call<T: serde::de::DeserializeOwned>(&self, path: &str, body: Option<&serde_json::Value>) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            let mut req = match body {
                Some(_) => self.agent.post(&url),
                None => self.agent.get(&url),
            };
            if let Some(t) = &self.token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            let out = match body {
                Some(b) => req.send_json(b),
                None => req.call(),
            };
            match out {
                Ok(resp) => {
                    let text = resp
                        .into_string()
                        .map_err(|e| transport(&url, attempt + 1, e.to_string()))?;
                    return serde_json::from_str(&text).map_err(|e| Error::Parse {
                        line: e.line(),
                        message: format!("{url}: {e}"),
                    });
                }
                Err(ureq::Error::Status(code, resp)) if code < 500 && code != 429 => {
                    let body = resp.into_string().unwrap_or_default();
                    return Err(invalid(format!("{url} answered {code}: {body}")));
                }
                Err(ureq::Error::Status(code, resp)) => {
                    last = format!("status {code}: {}", resp.into_string().unwrap_or_default());
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("{url} attempt {} failed: {last}", attempt + 1);
        }
        Err(transport(&url, self.retries + 1, last))
    }

    fn post<T: serde::de::DeserializeOwned, B: Serialize>(&self, path: &str, body: &B) -> Result<T> {
        let v = serde_json::to_value(body).map_err(|e| invalid(e.to_string()))?;
        self.call(path, Some(&v))
    }

    fn health(&self) -> Result<Health> {
        self.call("/v1/health", None)
    }
}

pub fn env_token() -> Option<String> {
    std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty())
}

fn transport(endpoint: &str, attempts: u32, message: String) -> Error {
    Error::Transport {
        endpoint: endpoint.to_string(),
        attempts,
        message,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    pub flavor: Flavor,
    /// Requested top-k; 0 asks for full rows.
    #[serde(default)]
    pub top_k: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

pub struct RemoteLm {
    http: Http,
    flavor: Flavor,
    top_k: usize,
    model: String,
}

impl RemoteLm {
    /// Asks `/v1/health` for the model fingerprint. The bearer token comes
    /// from [`TOKEN_ENV`].
    pub fn connect(cfg: &RemoteConfig) -> Result<Self> {
        Self::connect_with_token(cfg, env_token())
    }

    pub fn connect_with_token(cfg: &RemoteConfig, token: Option<String>) -> Result<Self> {
        let http = Http::new(&cfg.url, Duration::from_secs(cfg.timeout_s), cfg.retries, token);
        let model = http.health()?.model_fingerprint;
        Ok(RemoteLm {
            http,
            flavor: cfg.flavor,
            top_k: cfg.top_k,
            model,
        })
    }

    fn check_model(&self, fp: &str) -> Result<()> {
        if fp != self.model {
            return Err(invalid(format!(
                "server model changed from {} to {fp} during the run",
                self.model
            )));
        }
        Ok(())
    }
}

impl LanguageModel for RemoteLm {
    fn fingerprint(&self) -> String {
        let flavor = match self.flavor {
            Flavor::FullLogit => "full",
            Flavor::TopKLogprobs => "topk-logprobs",
        };
        format!("remote/{flavor}/k={}/{}", self.top_k, self.model)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        let resp: ScoreResponse = self.http.post(
            "/v1/score",
            &ScoreRequest {
                prompt,
                continuation,
                top_k: self.top_k,
            },
        )?;
        self.check_model(&resp.model_fingerprint)?;
        Ok(Arc::new(sheet_from_wire(&resp, self.flavor, prompt, continuation)?))
    }

    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        let resp: GenerateResponse = self.http.post(
            "/v1/generate",
            &GenerateRequest {
                prompt,
                temperature: tau,
                max_tokens,
                seed,
            },
        )?;
        self.check_model(&resp.model_fingerprint)?;
        Ok(resp.text)
    }
}

pub struct RemoteEmbedder {
    http: Http,
    fingerprint: EmbedderFingerprint,
    batch: usize,
}

impl RemoteEmbedder {
    pub fn connect(url: &str, timeout: Duration, retries: u32) -> Result<Self> {
        let http = Http::new(url, timeout, retries, env_token());
        let h = http.health()?;
        let fingerprint = EmbedderFingerprint {
            name: format!("remote/{}", h.encoder_fingerprint),
            dim: h.dim,
            config_hash: format!("{:016x}", mop_core::math::fnv1a(h.encoder_fingerprint.as_bytes())),
        };
        Ok(RemoteEmbedder {
            http,
            fingerprint,
            batch: 64,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn fingerprint(&self) -> EmbedderFingerprint {
        self.fingerprint.clone()
    }

    fn dim(&self) -> usize {
        self.fingerprint.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[text])?.row(0).to_vec())
    }

    /// Empty texts map to the zero vector locally; the rest go out in
    /// batches.
    fn embed_batch(&self, texts: &[&str]) -> Result<Matrix> {
        let dim = self.dim();
        let mut out = Matrix::zeros(texts.len(), dim);
        let todo: Vec<usize> = (0..texts.len()).filter(|&i| !texts[i].is_empty()).collect();
        for chunk in todo.chunks(self.batch) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            let resp: EmbedResponse = self.http.post("/v1/embed", &EmbedRequest { texts: &batch })?;
            if resp.dim != dim || resp.vectors.len() != batch.len() {
                return Err(invalid(format!(
                    "embedder returned {} vectors of dim {} for {} texts of dim {dim}",
                    resp.vectors.len(),
                    resp.dim,
                    batch.len()
                )));
            }
            for (&i, v) in chunk.iter().zip(&resp.vectors) {
                if v.len() != dim || v.iter().any(|x| !x.0.is_finite()) {
                    return Err(invalid(format!("bad embedding vector for text {i}")));
                }
                out.row_mut(i).iter_mut().zip(v).for_each(|(o, x)| *o = x.0);
            }
        }
        Ok(out)
    }
}
