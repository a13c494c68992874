//! Shared score cache in front of any backend.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use mop_core::lm::{CallStats, LanguageModel, ScoreSheet};
use mop_core::Result;

/// Memoizes `score` by exact `(prompt, continuation)`; the backend
/// fingerprint is fixed per wrapper, so it is implicitly part of the key.
/// Concurrent misses on one key may both compute; the first insert wins.
pub struct CachedLm<L> {
    inner: L,
    fingerprint: String,
    sheets: Mutex<HashMap<(String, String), Arc<ScoreSheet>>>,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl<L: LanguageModel> CachedLm<L> {
    pub fn new(inner: L) -> Self {
        let fingerprint = inner.fingerprint();
        CachedLm {
            inner,
            fingerprint,
            sheets: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &L {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.sheets.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<L: LanguageModel> LanguageModel for CachedLm<L> {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        let key = (prompt.to_owned(), continuation.to_owned());
        if let Some(s) = self.sheets.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(s));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let sheet = self.inner.score(prompt, continuation)?;
        let mut map = self.sheets.lock().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(sheet)))
    }

    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        self.inner.generate(prompt, tau, max_tokens, seed)
    }

    fn call_stats(&self) -> CallStats {
        CallStats {
            score_calls: self.calls.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
        }
    }
}
