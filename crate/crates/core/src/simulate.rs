//! Population simulation: draw a persona from `pi(x)`, an exemplar from
//! `Omega_c(x)`, then sample the agent's response.
//!
//! Latent draws use their own random stream, separate from the backend's
//! sampling seed, so swapping backends never changes the `(c, h)` sequence.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::gating::{gates, Agents, GateState, Gates, GatingParams, Projected};
use crate::lm::LanguageModel;
use crate::persona::extract_persona;
use crate::prompt::{build_mix_prompt, build_prompt, render_steering, PromptBundle};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub text: String,
    pub persona_id: usize,
    pub exemplar_id: usize,
    pub tau_used: f64,
    pub context: String,
    pub seed: u64,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// `(persona, exemplar)` pairs behind a mixed persona, in sampled order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixed_from: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed_persona: Option<String>,
}

/// Where simulation contexts come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "contexts", rename_all = "snake_case")]
pub enum ContextSource {
    Empty,
    /// Used in order, wrapping around.
    Cycle(Vec<String>),
    /// Drawn uniformly with replacement, seeded per record.
    Sample(Vec<String>),
}

/// Label conditioning for synthetic labelled data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "label", rename_all = "snake_case")]
pub enum LabelMode {
    /// Steering clause in the prompt, e.g. positive or negative sentiment.
    Sentiment(String),
    /// Only personas carrying this label may be drawn.
    Topic(String),
}

impl LabelMode {
    pub fn label(&self) -> &str {
        match self {
            LabelMode::Sentiment(l) | LabelMode::Topic(l) => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub max_tokens: usize,
    /// Temperature for persona-mixing prompts.
    pub mix_temperature: f64,
    pub mix_max_tokens: usize,
    /// Generated text is cut at the first occurrence of any of these.
    pub stop: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_tokens: 128,
            mix_temperature: 1.0,
            mix_max_tokens: 128,
            stop: Vec::new(),
        }
    }
}

/// Result of persona mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPersona {
    pub description: String,
    /// Distinct personas with their exemplars, in sampled order.
    pub pairs: Vec<(usize, usize)>,
    /// `tau` averaged over the sampled personas, weighted by `pi`.
    pub tau: f64,
}

pub struct Simulator<'a, L: ?Sized, E: ?Sized> {
    params: &'a GatingParams,
    proj: Projected,
    agents: Agents<'a, L>,
    embedder: &'a E,
    config: SimConfig,
}

impl<'a, L: LanguageModel + ?Sized, E: Embedder + ?Sized> Simulator<'a, L, E> {
    pub fn new(
        params: &'a GatingParams,
        state: &'a GateState,
        agents: Agents<'a, L>,
        embedder: &'a E,
        config: SimConfig,
    ) -> Result<Self> {
        if config.max_tokens == 0 {
            return Err(Error::validation("max_tokens must be positive"));
        }
        if agents.personas.len() != state.k() || agents.pool.len() != state.n() {
            return Err(Error::validation("gate state does not match personas and pool"));
        }
        if state.fingerprint != embedder.fingerprint() {
            return Err(Error::validation(format!(
                "gate state was embedded with {} but the embedder is {}",
                state.fingerprint,
                embedder.fingerprint()
            )));
        }
        Ok(Simulator {
            params,
            proj: Projected::new(params, state)?,
            agents,
            embedder,
            config,
        })
    }

    pub fn gates_at(&self, context: &str) -> Result<Gates> {
        gates(&self.embedder.embed(context)?, self.params, &self.proj)
    }

    /// `(c, h)` drawn from the gates with the latent stream of `seed`.
    /// `allowed` restricts personas (renormalizing `pi` over the subset).
    pub fn sample_latent(&self, g: &Gates, seed: u64, allowed: Option<&[bool]>) -> Result<(usize, usize)> {
        let mut r = rng::child_rng(seed, 0);
        let weights: Vec<f64> = match allowed {
            Some(mask) => g.pi.iter().zip(mask).map(|(p, &ok)| if ok { *p } else { 0.0 }).collect(),
            None => g.pi.clone(),
        };
        let c = rng::sample_weighted(&mut r, &weights).ok_or_else(|| Error::validation("no persona can be drawn"))?;
        let h = rng::sample_weighted(&mut r, g.omega.row(c)).ok_or_else(|| Error::validation("no exemplar can be drawn"))?;
        Ok((c, h))
    }

    fn generate(&self, prompt: &str, tau: f64, seed: u64, c: usize, h: usize) -> Result<String> {
        self.agents
            .backend
            .generate(prompt, tau, self.config.max_tokens, rng::derive_seed(seed, 1))
            .map(|t| truncate_at_stop(t, &self.config.stop))
            .map_err(|e| e.at_pair(c, h))
    }

    fn record(&self, text: String, c: usize, h: usize, tau: f64, context: &str, seed: u64) -> GenerationRecord {
        GenerationRecord {
            text,
            persona_id: c,
            exemplar_id: h,
            tau_used: tau,
            context: context.to_string(),
            seed,
            backend: self.agents.backend.fingerprint(),
            label: None,
            mixed_from: Vec::new(),
            mixed_persona: None,
        }
    }

    pub fn sample_generation(&self, context: &str, seed: u64) -> Result<GenerationRecord> {
        let g = self.gates_at(context)?;
        self.sample_with(&g, context, seed, None)
    }

    fn sample_with(&self, g: &Gates, context: &str, seed: u64, label: Option<&LabelMode>) -> Result<GenerationRecord> {
        let allowed = match label {
            Some(LabelMode::Topic(l)) => Some(self.topic_mask(l)?),
            _ => None,
        };
        let (c, h) = self.sample_latent(g, seed, allowed.as_deref())?;
        let steer = match label {
            Some(LabelMode::Sentiment(l)) => Some(render_steering(self.agents.templates, l, context)?),
            _ => None,
        };
        let mut bundle = PromptBundle::new(&self.agents.personas[c].description, self.agents.pool.get(h), context);
        bundle.steering = steer.as_deref();
        let prompt = build_prompt(self.agents.templates, &bundle)?;
        let tau = self.params.tau(c);
        let text = self.generate(&prompt, tau, seed, c, h)?;
        let mut rec = self.record(text, c, h, tau, context, seed);
        rec.label = label.map(|l| l.label().to_string());
        Ok(rec)
    }

    fn topic_mask(&self, label: &str) -> Result<Vec<bool>> {
        let mask: Vec<bool> = self
            .agents
            .personas
            .iter()
            .map(|p| p.label.as_deref() == Some(label))
            .collect();
        if !mask.iter().any(|&b| b) {
            return Err(Error::validation(format!("no persona carries label {label:?}")));
        }
        Ok(mask)
    }

    /// Draws `l` distinct personas (each with one exemplar) and asks the
    /// backend to merge their descriptions.
    pub fn mix_personas(&self, g: &Gates, l: usize, seed: u64) -> Result<MixedPersona> {
        let k = self.agents.personas.len();
        if l < 2 || l > k {
            return Err(Error::validation(format!("mixing size {l} must lie in 2..={k}")));
        }
        let mut r = rng::child_rng(seed, 2);
        let mut weights = g.pi.clone();
        let mut pairs = Vec::with_capacity(l);
        let (mut tau_num, mut tau_den) = (0.0, 0.0);
        for _ in 0..l {
            let c = match rng::sample_weighted(&mut r, &weights) {
                Some(c) => c,
                // remaining mass underflowed: take the first unused persona
                None => (0..k).find(|c| !pairs.iter().any(|&(p, _)| p == *c)).expect("l <= k"),
            };
            let h = rng::sample_weighted(&mut r, g.omega.row(c)).unwrap_or(0);
            tau_num += g.pi[c] * self.params.tau(c);
            tau_den += g.pi[c];
            weights[c] = 0.0;
            pairs.push((c, h));
        }
        let descs: Vec<&str> = pairs.iter().map(|&(c, _)| self.agents.personas[c].description.as_str()).collect();
        let exs: Vec<&str> = pairs.iter().map(|&(_, h)| self.agents.pool.get(h).response.as_str()).collect();
        let prompt = build_mix_prompt(self.agents.templates, &descs, &exs)?;
        let out = self.agents.backend.generate(
            &prompt,
            self.config.mix_temperature,
            self.config.mix_max_tokens,
            rng::derive_seed(seed, 3),
        )?;
        let mut description = extract_persona(&out).to_string();
        if description.is_empty() {
            log::warn!("empty mixed persona; joining the source descriptions");
            description = descs.join(" ");
        }
        let tau = if tau_den > 0.0 {
            tau_num / tau_den
        } else {
            pairs.iter().map(|&(c, _)| self.params.tau(c)).sum::<f64>() / l as f64
        };
        Ok(MixedPersona { description, pairs, tau })
    }

    pub fn sample_mixed(&self, g: &Gates, context: &str, l: usize, seed: u64) -> Result<GenerationRecord> {
        let mixed = self.mix_personas(g, l, seed)?;
        let exemplars = mixed.pairs.iter().map(|&(_, h)| self.agents.pool.get(h)).collect();
        let bundle = PromptBundle {
            persona: &mixed.description,
            exemplars,
            context,
            steering: None,
        };
        let prompt = build_prompt(self.agents.templates, &bundle)?;
        let (c, h) = mixed.pairs[0];
        let text = self.generate(&prompt, mixed.tau, seed, c, h)?;
        let mut rec = self.record(text, c, h, mixed.tau, context, seed);
        rec.mixed_from = mixed.pairs;
        rec.mixed_persona = Some(mixed.description);
        Ok(rec)
    }

    /// `count` generations with per-record seeds `derive_seed(seed, i)`.
    pub fn simulate(
        &self,
        source: &ContextSource,
        count: usize,
        seed: u64,
        label: Option<&LabelMode>,
        mix: Option<usize>,
    ) -> Result<Vec<GenerationRecord>> {
        match source {
            ContextSource::Empty if self.agents.templates.uses_context() => {
                return Err(Error::validation(format!(
                    "task {} needs contexts but the context source is empty",
                    self.agents.templates.name
                )))
            }
            ContextSource::Cycle(v) | ContextSource::Sample(v) if v.is_empty() => {
                return Err(Error::validation("context list is empty"))
            }
            _ => {}
        }
        if mix.is_some() && label.is_some() {
            return Err(Error::validation("persona mixing cannot be combined with labelled generation"));
        }
        let mut memo: BTreeMap<String, Gates> = BTreeMap::new();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let s = rng::derive_seed(seed, i as u64);
            let context: &str = match source {
                ContextSource::Empty => "",
                ContextSource::Cycle(v) => &v[i % v.len()],
                ContextSource::Sample(v) => {
                    use rand::Rng as _;
                    &v[rng::child_rng(s, 4).random_range(0..v.len())]
                }
            };
            if !memo.contains_key(context) {
                memo.insert(context.to_string(), self.gates_at(context)?);
            }
            let g = &memo[context];
            let rec = match mix {
                Some(l) => self.sample_mixed(g, context, l, s),
                None => self.sample_with(g, context, s, label),
            }
            .map_err(|e| e.at_index(i))?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// `text` up to the earliest match of any stop sequence.
pub fn truncate_at_stop(mut text: String, stop: &[String]) -> String {
    let cut = stop.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min();
    if let Some(i) = cut {
        text.truncate(i);
    }
    text
}

/// Empirical frequencies of `ids` over `0..k`.
pub fn frequencies(ids: impl IntoIterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut f = vec![0.0; k];
    let mut n = 0usize;
    for i in ids {
        f[i] += 1.0;
        n += 1;
    }
    if n > 0 {
        f.iter_mut().for_each(|v| *v /= n as f64);
    }
    f
}
