//! A small synthetic world for tests and the bundled fixture.
//!
//! Each style is a short topical word list. Every style gets its own
//! character trigram model; the shared backend is trained on all of them.

use mop_core::corpus::Record;
use mop_core::lm::{CharNgramLm, CharVocab, LanguageModel, NgramConfig};
use mop_core::rng;
use mop_core::{Error, Result};
use rand::Rng;

const MIN_RESPONSE_CHARS: usize = 12;
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";

/// Word lists the toy styles draw from.
pub const LEXICONS: [(&str, [&str; 20]); 4] = [
    (
        "sports",
        [
            "goal", "match", "striker", "keeper", "league", "derby", "pitch", "referee", "corner", "penalty", "cup",
            "fans", "stadium", "coach", "season", "winger", "tackle", "volley", "header", "kickoff",
        ],
    ),
    (
        "markets",
        [
            "shares", "stock", "profit", "earnings", "bank", "rates", "bond", "yield", "investor", "quarter",
            "dividend", "merger", "revenue", "equity", "hedge", "broker", "futures", "inflation", "credit", "assets",
        ],
    ),
    (
        "tech",
        [
            "chip", "software", "linux", "kernel", "server", "cloud", "python", "laptop", "browser", "silicon",
            "router", "compiler", "gpu", "firmware", "database", "wifi", "pixel", "quantum", "robot", "api",
        ],
    ),
    (
        "garden",
        [
            "tulip", "soil", "compost", "hedge", "rose", "seedling", "mulch", "orchard", "weeds", "bloom", "pollen",
            "lavender", "shovel", "greenhouse", "fern", "ivy", "moss", "pruning", "bulbs", "daisy",
        ],
    ),
];

/// Context words shared by every style.
pub const NEUTRAL_TOPICS: &[&str] = &["today", "update", "report", "story", "notes", "review", "weekly", "brief"];

#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub name: String,
    pub words: Vec<String>,
}

impl Style {
    /// Random sentences of 4 to 7 words.
    pub fn corpus(&self, sentences: usize, seed: u64) -> Vec<String> {
        let mut r = rng::rng_from(seed);
        (0..sentences)
            .map(|_| {
                let n = r.random_range(4..=7);
                (0..n)
                    .map(|_| self.words[r.random_range(0..self.words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }
}

/// How record contexts relate to the hidden style.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextMode {
    /// `"topic <i>"`, independent of the style.
    Neutral,
    /// `prefix` followed by a word from the record's own style with
    /// probability `cue`, otherwise from [`NEUTRAL_TOPICS`].
    StyleCue { cue: f64, prefix: &'static str },
}

pub struct ToyWorld {
    pub styles: Vec<Style>,
    pub corpora: Vec<Vec<String>>,
    pub style_lms: Vec<CharNgramLm>,
}

impl ToyWorld {
    /// `n_styles` styles with `vocab` words each and a corpus of
    /// `sentences` sentences per style.
    pub fn new(n_styles: usize, vocab: usize, sentences: usize, seed: u64) -> Result<Self> {
        if n_styles == 0 || n_styles > LEXICONS.len() {
            return Err(Error::validation(format!("toy world supports 1 to {} styles", LEXICONS.len())));
        }
        if vocab == 0 || sentences == 0 {
            return Err(Error::validation("vocabulary and corpus must be non-empty"));
        }
        let styles: Vec<Style> = LEXICONS[..n_styles]
            .iter()
            .map(|(name, words)| Style {
                name: name.to_string(),
                words: words.iter().take(vocab).map(|w| w.to_string()).collect(),
            })
            .collect();
        let corpora: Vec<Vec<String>> = styles
            .iter()
            .enumerate()
            .map(|(i, s)| s.corpus(sentences, rng::derive_seed(seed, i as u64)))
            .collect();
        let plain = NgramConfig {
            order: 3,
            alpha: 1e-3,
            cache_weight: 0.0,
        };
        let style_lms = corpora
            .iter()
            .map(|c| CharNgramLm::train(CharVocab::closed(ALPHABET), plain, c))
            .collect::<Result<_>>()?;
        Ok(ToyWorld {
            styles,
            corpora,
            style_lms,
        })
    }

    /// Backend with an in-context cache, trained on every style. Documents
    /// are three same-style lines joined by newlines, so the model has seen
    /// line breaks between records as they appear in prompts.
    pub fn backend(&self, config: NgramConfig) -> Result<CharNgramLm> {
        let docs: Vec<String> = self
            .corpora
            .iter()
            .flat_map(|c| c.chunks(3).map(|ch| ch.join("\n")))
            .collect();
        CharNgramLm::train(CharVocab::ascii(), config, &docs)
    }

    pub fn style_index(&self, name: &str) -> Option<usize> {
        self.styles.iter().position(|s| s.name == name)
    }

    /// One response sampled from style `s`. A response that hits
    /// `max_chars` is cut back to its last complete word.
    pub fn sample_response(&self, s: usize, max_chars: usize, seed: u64) -> Result<String> {
        for attempt in 0..64 {
            let t = self.style_lms[s].generate("", 1.0, max_chars, rng::derive_seed(seed, attempt))?;
            let t = if t.chars().count() >= max_chars {
                t.rsplit_once(' ').map_or(t.as_str(), |(head, _)| head)
            } else {
                t.as_str()
            };
            let t = t.trim();
            if t.len() >= MIN_RESPONSE_CHARS {
                return Ok(t.to_string());
            }
        }
        Ok(self.corpora[s][0].clone())
    }

    /// `n` records drawn from the mixture `weights` over styles, labelled
    /// with their style name.
    pub fn population(
        &self,
        weights: &[f64],
        n: usize,
        max_chars: usize,
        contexts: ContextMode,
        seed: u64,
        id_prefix: &str,
    ) -> Result<Vec<Record>> {
        if weights.len() != self.styles.len() {
            return Err(Error::validation("one weight per style required"));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::child_rng(seed, i as u64);
            let s = rng::sample_weighted(&mut r, weights)
                .ok_or_else(|| Error::validation("weights must have positive mass"))?;
            let context = match contexts {
                ContextMode::Neutral => format!("topic {}", r.random_range(0..20)),
                ContextMode::StyleCue { cue, prefix } => {
                    let word = if r.random::<f64>() < cue {
                        let words = &self.styles[s].words;
                        words[r.random_range(0..words.len())].as_str()
                    } else {
                        NEUTRAL_TOPICS[r.random_range(0..NEUTRAL_TOPICS.len())]
                    };
                    format!("{prefix}{word}")
                }
            };
            out.push(Record {
                id: format!("{id_prefix}{i}"),
                context,
                response: self.sample_response(s, max_chars, rng::derive_seed(seed, 1 << 32 | i as u64))?,
                label: Some(self.styles[s].name.clone()),
            });
        }
        Ok(out)
    }
}
