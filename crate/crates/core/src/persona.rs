//! Persona synthesis: cluster the responses, then ask the backend to
//! summarize each cluster. Optional topic labelling of the result.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_restarts, ClusterAssignment};
use crate::corpus::{Example, Persona, PersonaSource};
use crate::embed::{embed_strings, Embedder};
use crate::lm::LanguageModel;
use crate::prompt::{build_classify_prompt, build_synthesis_prompt, TaskTemplates, PERSONA_ANSWER_MARKER};
use crate::rng;
use crate::simulate::truncate_at_stop;
use crate::{Error, Result};

pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Independent k-means runs; the lowest inertia wins.
    pub restarts: usize,
    /// Representative records per synthesis prompt.
    pub representatives: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Extra attempts after an empty generation.
    pub retries: usize,
    /// The description ends at the first of these after the answer marker.
    pub stop: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: 100,
            seed: 0,
            max_iters: 100,
            restarts: 10,
            representatives: 10,
            temperature: 1.0,
            max_tokens: 128,
            retries: 2,
            stop: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.restarts == 0 || self.representatives == 0 || self.max_tokens == 0 {
            return Err(Error::validation("k, restarts, representatives and max_tokens must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::validation("synthesis temperature must be positive"));
        }
        Ok(())
    }
}

/// Text after the last answer marker, trimmed.
pub fn extract_persona(generated: &str) -> &str {
    let tail = match generated.rfind(PERSONA_ANSWER_MARKER) {
        Some(i) => &generated[i + PERSONA_ANSWER_MARKER.len()..],
        None => generated,
    };
    tail.trim()
}

/// Deterministic fallback naming the most frequent words of a cluster.
pub fn stub_description<S: AsRef<str>>(texts: &[S]) -> String {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in t.as_ref().split(|c: char| !c.is_alphanumeric()).filter(|w| w.chars().count() > 2) {
            *freq.entry(w.to_lowercase()).or_default() += 1;
        }
    }
    let mut terms: Vec<(String, usize)> = freq.into_iter().collect();
    terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top: Vec<String> = terms.into_iter().take(5).map(|(w, _)| w).collect();
    if top.is_empty() {
        "You are a writer.".to_string()
    } else {
        format!("You are a writer who often mentions: {}.", top.join(", "))
    }
}

/// Summarizes `texts` into one description; the flag is true when the stub
/// fallback was used.
pub fn synthesize_persona<L: LanguageModel + ?Sized, S: AsRef<str>>(
    texts: &[S],
    backend: &L,
    templates: &TaskTemplates,
    config: &SynthConfig,
    seed: u64,
) -> Result<(String, bool)> {
    if texts.is_empty() {
        return Err(Error::validation("cannot synthesize a persona from an empty cluster"));
    }
    let prompt = build_synthesis_prompt(templates, texts)?;
    for attempt in 0..=config.retries {
        let out = backend.generate(&prompt, config.temperature, config.max_tokens, rng::derive_seed(seed, attempt as u64))?;
        let desc = truncate_at_stop(extract_persona(&out).to_string(), &config.stop);
        let desc = desc.trim();
        if !desc.is_empty() {
            return Ok((desc.to_string(), false));
        }
        log::debug!("empty persona generation on attempt {}", attempt + 1);
    }
    log::warn!("persona generation stayed empty; using term-list stub");
    Ok((stub_description(texts), true))
}

/// Maps a classifier answer to one of `labels`: exactly one option letter
/// token or label text must appear, otherwise [`UNKNOWN_LABEL`].
pub fn parse_label(answer: &str, labels: &[String]) -> String {
    let lower = answer.to_lowercase();
    let mut hits: Vec<usize> = Vec::new();
    for token in answer.split(|c: char| !c.is_ascii_alphanumeric()) {
        if token.len() == 1 {
            let c = token.as_bytes()[0];
            if c.is_ascii_uppercase() && ((c - b'A') as usize) < labels.len() {
                hits.push((c - b'A') as usize);
            }
        }
    }
    for (i, l) in labels.iter().enumerate() {
        if lower.contains(&l.to_lowercase()) {
            hits.push(i);
        }
    }
    hits.sort_unstable();
    hits.dedup();
    match hits.as_slice() {
        [one] => labels[*one].clone(),
        _ => {
            log::debug!("unparseable label answer {answer:?}");
            UNKNOWN_LABEL.to_string()
        }
    }
}

pub fn label_persona<L: LanguageModel + ?Sized>(
    description: &str,
    backend: &L,
    templates: &TaskTemplates,
    seed: u64,
) -> Result<String> {
    let prompt = build_classify_prompt(templates, description)?;
    let answer = backend.generate(&prompt, 1.0, 16, seed)?;
    let label = parse_label(&answer, &templates.labels);
    debug_assert!(label == UNKNOWN_LABEL || templates.labels.contains(&label));
    Ok(label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub inertia: f64,
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub stub_personas: Vec<usize>,
}

/// Embed responses, cluster, summarize each cluster in cluster-id order.
pub fn synthesize_personas<L, E>(
    examples: &[Example],
    embedder: &E,
    backend: &L,
    templates: &TaskTemplates,
    config: &SynthConfig,
) -> Result<(Vec<Persona>, ClusterAssignment, ClusterReport)>
where
    L: LanguageModel + ?Sized,
    E: Embedder + ?Sized,
{
    config.validate()?;
    let responses: Vec<String> = examples.iter().map(|e| e.response.clone()).collect();
    let points = embed_strings(embedder, &responses)?;
    let assignment = cluster_restarts(&points, config.k, config.seed, config.max_iters, config.restarts)?;
    let mut personas = Vec::with_capacity(config.k);
    let mut stubs = Vec::new();
    for c in 0..config.k {
        let reps: Vec<&str> = assignment
            .nearest_members(&points, c, config.representatives)
            .into_iter()
            .map(|i| responses[i].as_str())
            .collect();
        let (description, stub) = synthesize_persona(&reps, backend, templates, config, rng::derive_seed(config.seed, 10_000 + c as u64))
            .map_err(|e| e.at_index(c))?;
        if stub {
            stubs.push(c);
        }
        personas.push(Persona {
            id: c,
            description,
            source: PersonaSource::Synthesized,
            label: None,
            cluster: Some(c),
        });
    }
    let report = ClusterReport {
        k: config.k,
        inertia: assignment.inertia,
        sizes: assignment.sizes(),
        seed: config.seed,
        stub_personas: stubs,
    };
    Ok((personas, assignment, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn labels() -> Vec<String> {
        ["world news", "sports news", "business news", "sci/tech news"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn letter_answer() {
        assert_eq!(parse_label("D", &labels()), "sci/tech news");
        assert_eq!(parse_label(" B.", &labels()), "sports news");
        assert_eq!(parse_label("The answer is C", &labels()), "business news");
        assert_eq!(parse_label("C. business news", &labels()), "business news");
    }

    #[test]
    fn garbage_is_unknown() {
        assert_eq!(parse_label("zzz", &labels()), UNKNOWN_LABEL);
        assert_eq!(parse_label("A or B", &labels()), UNKNOWN_LABEL);
        assert_eq!(parse_label("", &labels()), UNKNOWN_LABEL);
    }

    #[test]
    fn marker_is_stripped() {
        assert_eq!(extract_persona("The short persona is: You are a critic.\n"), "You are a critic.");
        assert_eq!(extract_persona("x The short persona is: a The short persona is: b"), "b");
        assert_eq!(extract_persona("  plain "), "plain");
    }

    #[test]
    fn stub_lists_top_terms() {
        let s = stub_description(&["goal goal match", "goal match win"]);
        assert_eq!(s, "You are a writer who often mentions: goal, match, win.");
        assert_eq!(stub_description(&vec![""; 1]), "You are a writer.");
    }
}
