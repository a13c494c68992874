use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_tau, LanguageModel, RowSupport, ScoreSheet, TokenScoreRow};
use crate::math::fnv1a;
use crate::{rng, Error, Result};

/// Fixed character vocabulary. Token 0 is end-of-text; when an unknown
/// token is configured it takes id 1 and absorbs every character outside
/// the alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, u32>,
    unk: Option<u32>,
}

pub const EOS: u32 = 0;

impl CharVocab {
    /// End-of-text, unknown, newline and printable ASCII: 98 tokens.
    pub fn ascii() -> Self {
        let mut alphabet = String::from("\n");
        alphabet.extend((0x20u8..=0x7e).map(char::from));
        Self::build(&alphabet, true)
    }

    /// End-of-text plus exactly the given characters; anything else fails
    /// to encode.
    pub fn closed(alphabet: &str) -> Self {
        Self::build(alphabet, false)
    }

    /// End-of-text, unknown and the given characters; anything else maps
    /// to the unknown token.
    pub fn with_unknown(alphabet: &str) -> Self {
        Self::build(alphabet, true)
    }

    fn build(alphabet: &str, with_unk: bool) -> Self {
        let mut chars = Vec::new();
        let mut index = BTreeMap::new();
        let offset = if with_unk { 2 } else { 1 };
        for c in alphabet.chars() {
            if !index.contains_key(&c) {
                index.insert(c, (chars.len() + offset) as u32);
                chars.push(c);
            }
        }
        CharVocab {
            chars,
            index,
            unk: with_unk.then_some(1),
        }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + if self.unk.is_some() { 2 } else { 1 }
    }

    pub fn unk(&self) -> Option<u32> {
        self.unk
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().or(self.unk).ok_or_else(|| {
                    Error::validation(format!("character {c:?} is outside the vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        let offset = if self.unk.is_some() { 2 } else { 1 };
        tokens
            .iter()
            .filter_map(|&t| match t {
                EOS => None,
                t if Some(t) == self.unk => Some('\u{fffd}'),
                t => self.chars.get(t as usize - offset).copied(),
            })
            .collect()
    }

    fn alphabet_hash(&self) -> u64 {
        let s: String = self.chars.iter().collect();
        fnv1a(s.as_bytes()) ^ self.unk.map_or(0, |_| 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramConfig {
    /// Model order; 1 is a unigram model.
    pub order: usize,
    /// Additive smoothing constant.
    pub alpha: f64,
    /// Maximum weight of the in-context cache component. 0 gives a plain
    /// n-gram model whose only use of the prompt is the last `order - 1`
    /// characters.
    pub cache_weight: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            order: 3,
            alpha: 0.1,
            cache_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Counts {
    total: u64,
    next: Vec<u32>,
}

/// Character n-gram model with additive smoothing and an in-context cache.
///
/// The next-token distribution is
/// `p = (1 - w) p_ngram + w p_cache`, where `p_ngram` is the smoothed
/// corpus estimate, `p_cache` the maximum-likelihood estimate from the
/// transitions already present in the prompt and continuation prefix, and
/// `w = cache_weight * c / (c + 1)` with `c` the number of times the
/// current context occurred in-context. Logits are `ln p`, so every row is
/// exactly normalized.
#[derive(Debug, Clone)]
pub struct CharNgramLm {
    vocab: CharVocab,
    config: NgramConfig,
    table: BTreeMap<u64, Counts>,
    corpus_hash: u64,
}

/// Injective for contexts of at most three tokens over vocabularies below 10^6.
fn pack(ctx: &[u32]) -> u64 {
    ctx.iter().fold(0u64, |acc, &t| acc.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1))
}

impl CharNgramLm {
    /// Counts n-grams over `documents`; each document is terminated by the
    /// end-of-text token and starts from an all-end-of-text context.
    pub fn train<S: AsRef<str>>(vocab: CharVocab, config: NgramConfig, documents: &[S]) -> Result<Self> {
        if config.order == 0 || config.order > 4 {
            return Err(Error::validation("n-gram order must lie in 1..=4"));
        }
        if !(config.alpha > 0.0) {
            return Err(Error::validation("smoothing constant must be positive"));
        }
        if !(0.0..1.0).contains(&config.cache_weight) {
            return Err(Error::validation("cache weight must lie in [0, 1)"));
        }
        let v = vocab.size();
        let ctx_len = config.order - 1;
        let mut table: BTreeMap<u64, Counts> = BTreeMap::new();
        let mut corpus_hash = 0xcbf2_9ce4_8422_2325u64;
        for doc in documents {
            let doc = doc.as_ref();
            corpus_hash = rng::mix64(corpus_hash ^ fnv1a(doc.as_bytes()));
            let mut toks = vec![EOS; ctx_len];
            toks.extend(vocab.encode(doc)?);
            toks.push(EOS);
            for t in ctx_len..toks.len() {
                let c = table.entry(pack(&toks[t - ctx_len..t])).or_insert_with(|| Counts {
                    total: 0,
                    next: vec![0; v],
                });
                c.total += 1;
                c.next[toks[t] as usize] += 1;
            }
        }
        Ok(CharNgramLm {
            vocab,
            config,
            table,
            corpus_hash,
        })
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    fn history(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut h = vec![EOS; self.config.order - 1];
        h.extend(self.vocab.encode(prompt)?);
        Ok(h)
    }

    /// Log-probabilities of the next token given `history` (already padded)
    /// and the in-context cache built from it.
    fn next_logits(&self, history: &[u32], cache: &BTreeMap<u64, Counts>, out: &mut [f64]) {
        let v = self.vocab.size();
        let ctx_len = self.config.order - 1;
        let key = pack(&history[history.len() - ctx_len..]);
        let alpha = self.config.alpha;
        let base = self.table.get(&key);
        let denom = base.map_or(0, |c| c.total) as f64 + alpha * v as f64;
        let cached = cache.get(&key).filter(|c| c.total > 0);
        let w = cached.map_or(0.0, |c| {
            self.config.cache_weight * c.total as f64 / (c.total as f64 + 1.0)
        });
        for (tok, slot) in out.iter_mut().enumerate().take(v) {
            let count = base.map_or(0, |c| c.next[tok]) as f64;
            let mut p = (count + alpha) / denom;
            if let Some(c) = cached {
                p = (1.0 - w) * p + w * c.next[tok] as f64 / c.total as f64;
            }
            *slot = libm::log(p);
        }
    }

    fn observe(&self, history: &[u32], next: u32, cache: &mut BTreeMap<u64, Counts>) {
        if self.config.cache_weight == 0.0 {
            return;
        }
        let ctx_len = self.config.order - 1;
        let v = self.vocab.size();
        let c = cache
            .entry(pack(&history[history.len() - ctx_len..]))
            .or_insert_with(|| Counts {
                total: 0,
                next: vec![0; v],
            });
        c.total += 1;
        c.next[next as usize] += 1;
    }

    fn prompt_cache(&self, history: &[u32]) -> BTreeMap<u64, Counts> {
        let mut cache = BTreeMap::new();
        let ctx_len = self.config.order - 1;
        for t in ctx_len..history.len() {
            self.observe(&history[..t], history[t], &mut cache);
        }
        cache
    }

    /// Next-token logits after `prompt`, including the cache it induces.
    pub fn logits_after(&self, prompt: &str) -> Result<Vec<f64>> {
        let history = self.history(prompt)?;
        let cache = self.prompt_cache(&history);
        let mut out = vec![0.0; self.vocab.size()];
        self.next_logits(&history, &cache, &mut out);
        Ok(out)
    }
}

impl LanguageModel for CharNgramLm {
    fn fingerprint(&self) -> String {
        format!(
            "char-ngram/n={}/alpha={}/cache={}/vocab={:016x}/corpus={:016x}",
            self.config.order,
            self.config.alpha,
            self.config.cache_weight,
            self.vocab.alphabet_hash(),
            self.corpus_hash
        )
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        let targets = self.vocab.encode(continuation)?;
        if targets.is_empty() {
            return Err(Error::validation("continuation tokenizes to zero tokens"));
        }
        let mut history = self.history(prompt)?;
        let mut cache = self.prompt_cache(&history);
        let mut rows = Vec::with_capacity(targets.len());
        let mut logits = vec![0.0; self.vocab.size()];
        for &tok in &targets {
            self.next_logits(&history, &cache, &mut logits);
            rows.push(TokenScoreRow {
                target: tok,
                target_logit: logits[tok as usize],
                support: RowSupport::Full {
                    logits: logits.clone(),
                },
            });
            self.observe(&history, tok, &mut cache);
            history.push(tok);
        }
        Ok(Arc::new(ScoreSheet::new(rows, prompt, continuation)))
    }

    /// Samples from `softmax(logits / tau)`. The unknown token is never
    /// emitted; generation stops at end-of-text or after `max_tokens`.
    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        check_tau(tau)?;
        if max_tokens == 0 {
            return Err(Error::validation("max_tokens must be at least 1"));
        }
        let mut rng = rng::rng_from(seed);
        let mut history = self.history(prompt)?;
        let mut cache = self.prompt_cache(&history);
        let mut logits = vec![0.0; self.vocab.size()];
        let mut weights = vec![0.0; self.vocab.size()];
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            self.next_logits(&history, &cache, &mut logits);
            let max = logits
                .iter()
                .enumerate()
                .filter(|(t, _)| Some(*t as u32) != self.vocab.unk())
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            for (t, (w, &z)) in weights.iter_mut().zip(&logits).enumerate() {
                *w = if Some(t as u32) == self.vocab.unk() {
                    0.0
                } else {
                    libm::exp((z - max) / tau)
                };
            }
            let tok = rng::sample_weighted(&mut rng, &weights).unwrap_or(EOS as usize) as u32;
            if tok == EOS {
                break;
            }
            self.observe(&history, tok, &mut cache);
            history.push(tok);
            out.push(tok);
        }
        Ok(self.vocab.decode(&out))
    }
}
