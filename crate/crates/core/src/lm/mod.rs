//! Language-model contract: per-token scores for tempered likelihoods and
//! temperature-controlled sampling.
//!
//! Temperatures are applied locally to cached score sheets, so a backend is
//! asked for a given `(prompt, continuation)` pair at most once regardless
//! of how often the temperatures change during training.

mod ngram;

pub use ngram::{CharNgramLm, CharVocab, NgramConfig};

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{fnv1a, logsumexp};
use crate::{Error, Result};

/// Logit information for one continuation token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRow {
    pub target: u32,
    pub target_logit: f64,
    pub support: RowSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSupport {
    /// Every logit over the vocabulary.
    Full { logits: Vec<f64> },
    /// The `k` largest logits plus the log-sum-exp of all remaining ones.
    /// A target outside the top-k is covered by `rest_logsumexp` and carries
    /// its own logit in the row. `rest_logsumexp = -inf` means the top-k is
    /// the whole vocabulary.
    TopK {
        ids: Vec<u32>,
        logits: Vec<f64>,
        rest_logsumexp: f64,
    },
}

impl TokenScoreRow {
    /// `(log-normalizer of z/tau, expected logit under softmax(z/tau))`.
    ///
    /// For top-k rows the remainder is folded into one pseudo-token whose
    /// logit is `rest_logsumexp`; this is exact at `tau = 1` or when the
    /// remainder is empty.
    fn tempered_stats(&self, tau: f64) -> (f64, f64) {
        let (logits, rest): (&[f64], Option<f64>) = match &self.support {
            RowSupport::Full { logits } => (logits, None),
            RowSupport::TopK {
                logits,
                rest_logsumexp,
                ..
            } => (
                logits,
                (*rest_logsumexp > f64::NEG_INFINITY).then_some(*rest_logsumexp),
            ),
        };
        let mut max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(r) = rest {
            max = max.max(r);
        }
        let scaled_max = max / tau;
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for &z in logits.iter().chain(rest.iter()) {
            let w = libm::exp(z / tau - scaled_max);
            sum += w;
            weighted += w * z;
        }
        (scaled_max + libm::log(sum), weighted / sum)
    }

    /// Log-normalizer over the full support at `tau = 1`.
    pub fn logsumexp(&self) -> f64 {
        match &self.support {
            RowSupport::Full { logits } => logsumexp(logits),
            RowSupport::TopK {
                logits,
                rest_logsumexp,
                ..
            } => {
                let top = logsumexp(logits);
                logsumexp(&[top, *rest_logsumexp])
            }
        }
    }
}

/// Scores of one continuation under one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub rows: Vec<TokenScoreRow>,
    pub prompt_hash: u64,
    pub continuation_hash: u64,
}

impl ScoreSheet {
    pub fn new(rows: Vec<TokenScoreRow>, prompt: &str, continuation: &str) -> Self {
        ScoreSheet {
            rows,
            prompt_hash: fnv1a(prompt.as_bytes()),
            continuation_hash: fnv1a(continuation.as_bytes()),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(alloc::format!("temperature must be positive, got {tau}")))
    }
}

/// `sum_t [ z_t(y_t)/tau - logsumexp_v z_t(v)/tau ]`.
pub fn tempered_loglik(sheet: &ScoreSheet, tau: f64) -> Result<f64> {
    Ok(tempered_loglik_and_dtau(sheet, tau)?.0)
}

/// Exact derivative of [`tempered_loglik`] with respect to `tau`:
/// `sum_t [ E_{softmax(z_t/tau)}[z_t] - z_t(y_t) ] / tau^2`.
pub fn tempered_loglik_dtau(sheet: &ScoreSheet, tau: f64) -> Result<f64> {
    Ok(tempered_loglik_and_dtau(sheet, tau)?.1)
}

pub fn tempered_loglik_and_dtau(sheet: &ScoreSheet, tau: f64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let mut value = 0.0;
    let mut deriv = 0.0;
    for row in &sheet.rows {
        let (lse, mean) = row.tempered_stats(tau);
        // clamp guards the last ulp; the exact value is never positive
        value += (row.target_logit / tau - lse).min(0.0);
        deriv += (mean - row.target_logit) / (tau * tau);
    }
    Ok((value, deriv))
}

/// Backend-call counters reported by caching wrappers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub score_calls: u64,
    pub cache_hits: u64,
}

pub trait LanguageModel {
    /// Identifies the model; part of every score-cache key and checkpoint.
    fn fingerprint(&self) -> String;

    /// One row per continuation token. Deterministic.
    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>>;

    /// Samples a continuation at temperature `tau`, deterministic per seed.
    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String>;

    fn call_stats(&self) -> CallStats {
        CallStats::default()
    }
}

impl<L: LanguageModel + ?Sized> LanguageModel for &L {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        (**self).score(prompt, continuation)
    }
    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        (**self).generate(prompt, tau, max_tokens, seed)
    }
    fn call_stats(&self) -> CallStats {
        (**self).call_stats()
    }
}

impl<L: LanguageModel + ?Sized> LanguageModel for alloc::boxed::Box<L> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        (**self).score(prompt, continuation)
    }
    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        (**self).generate(prompt, tau, max_tokens, seed)
    }
    fn call_stats(&self) -> CallStats {
        (**self).call_stats()
    }
}
