//! Prompt templates and rendering.
//!
//! A template is plain text with `{name}` placeholders. Each template kind
//! accepts a fixed set of names; any other `{identifier}` is rejected at
//! render time. Braces not forming `{identifier}` are copied verbatim.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::{Error, Result};

pub const SAMPLE_SLOTS: &[&str] = &["persona", "example", "example_context", "context"];
pub const SYNTH_SLOTS: &[&str] = &["examples"];
pub const CLASSIFY_SLOTS: &[&str] = &["persona", "options"];
pub const MIX_SLOTS: &[&str] = &["personas", "examples"];
pub const STEER_SLOTS: &[&str] = &["context", "label"];

/// Marker after which synthesis prompts expect the persona text.
pub const PERSONA_ANSWER_MARKER: &str = "The short persona is:";

/// Substitutes `values` into `template`. Every `{identifier}` must be one of
/// `allowed`; allowed names missing from `values` render as empty text.
pub fn render(template: &str, allowed: &[&str], values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            if !allowed.contains(&name) {
                return Err(Error::validation(format!("unknown placeholder {{{name}}} in template")));
            }
            let value = values.iter().find(|(k, _)| *k == name).map_or("", |(_, v)| *v);
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Checks a template against its slot set without rendering values.
pub fn check_template(template: &str, allowed: &[&str]) -> Result<()> {
    render(template, allowed, &[]).map(|_| ())
}

pub fn has_slot(template: &str, name: &str) -> bool {
    template.contains(&format!("{{{name}}}"))
}

/// All prompt templates for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplates {
    pub name: String,
    /// Persona + exemplar + context prompt used for scoring and sampling.
    pub sample: String,
    /// Persona synthesis from a list of cluster records.
    pub synthesize: String,
    /// Few-shot persona classification; `None` for tasks without topic labels.
    #[serde(default)]
    pub classify: Option<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    /// Persona mixing from L descriptions and L exemplars.
    #[serde(default)]
    pub mix: Option<String>,
    /// Label-steering clause for sentiment-style generation.
    #[serde(default)]
    pub steering: Option<String>,
}

impl TaskTemplates {
    pub fn validate(&self) -> Result<()> {
        check_template(&self.sample, SAMPLE_SLOTS)?;
        check_template(&self.synthesize, SYNTH_SLOTS)?;
        if let Some(t) = &self.classify {
            check_template(t, CLASSIFY_SLOTS)?;
            if self.labels.len() > 26 {
                return Err(Error::validation("at most 26 labels are supported"));
            }
        }
        if let Some(t) = &self.mix {
            check_template(t, MIX_SLOTS)?;
        }
        if let Some(t) = &self.steering {
            check_template(t, STEER_SLOTS)?;
        }
        Ok(())
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let t = match name {
            "agnews" => agnews(),
            "yelp" => yelp(),
            "sst2" => sst2(),
            "imdb" => imdb(),
            "plain" => plain(),
            _ => return None,
        };
        Some(t)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["agnews", "yelp", "sst2", "imdb", "plain"]
    }

    /// Whether sampling prompts consume the input context.
    pub fn uses_context(&self) -> bool {
        has_slot(&self.sample, "context")
    }
}

/// Everything that conditions one agent's response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle<'a> {
    pub persona: &'a str,
    /// One exemplar normally; several after persona mixing, in order.
    pub exemplars: Vec<&'a Example>,
    pub context: &'a str,
    /// Rendered steering clause, if generating towards a label.
    pub steering: Option<&'a str>,
}

impl<'a> PromptBundle<'a> {
    pub fn new(persona: &'a str, exemplar: &'a Example, context: &'a str) -> Self {
        PromptBundle {
            persona,
            exemplars: alloc::vec![exemplar],
            context,
            steering: None,
        }
    }
}

/// Renders the task's sampling prompt.
///
/// A steering clause is prepended to the context slot; templates without a
/// context slot receive it after the persona description instead.
pub fn build_prompt(templates: &TaskTemplates, bundle: &PromptBundle<'_>) -> Result<String> {
    let example = join_lines(bundle.exemplars.iter().map(|e| e.response.as_str()));
    let example_context = join_lines(bundle.exemplars.iter().map(|e| e.context.as_str()));
    let mut persona = bundle.persona.to_owned();
    let mut context = bundle.context.to_owned();
    if let Some(steer) = bundle.steering {
        if templates.uses_context() {
            context = if context.is_empty() {
                steer.to_owned()
            } else {
                format!("{steer} {context}")
            };
        } else if persona.is_empty() {
            persona = steer.to_owned();
        } else {
            persona = format!("{persona}\n\n{steer}");
        }
    }
    render(
        &templates.sample,
        SAMPLE_SLOTS,
        &[
            ("persona", &persona),
            ("example", &example),
            ("example_context", &example_context),
            ("context", &context),
        ],
    )
}

pub fn build_synthesis_prompt<S: AsRef<str>>(templates: &TaskTemplates, examples: &[S]) -> Result<String> {
    let examples = join_lines(examples.iter().map(|s| s.as_ref()));
    render(&templates.synthesize, SYNTH_SLOTS, &[("examples", &examples)])
}

pub fn build_mix_prompt<S: AsRef<str>, T: AsRef<str>>(
    templates: &TaskTemplates,
    personas: &[S],
    examples: &[T],
) -> Result<String> {
    let tpl = templates
        .mix
        .as_deref()
        .ok_or_else(|| Error::validation(format!("task {} has no persona mixing template", templates.name)))?;
    let personas = join_lines(personas.iter().map(|s| s.as_ref()));
    let examples = join_lines(examples.iter().map(|s| s.as_ref()));
    render(tpl, MIX_SLOTS, &[("personas", &personas), ("examples", &examples)])
}

/// Option letter for label `i` (`A`, `B`, ...).
pub fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

pub fn build_classify_prompt(templates: &TaskTemplates, persona: &str) -> Result<String> {
    let tpl = templates
        .classify
        .as_deref()
        .ok_or_else(|| Error::validation(format!("task {} has no classification template", templates.name)))?;
    if templates.labels.is_empty() {
        return Err(Error::validation(format!("task {} has no label set", templates.name)));
    }
    let options = templates
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {l}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n");
    render(tpl, CLASSIFY_SLOTS, &[("persona", persona), ("options", &options)])
}

pub fn render_steering(templates: &TaskTemplates, label: &str, context: &str) -> Result<String> {
    let tpl = templates
        .steering
        .as_deref()
        .ok_or_else(|| Error::validation(format!("task {} has no steering clause", templates.name)))?;
    render(tpl, STEER_SLOTS, &[("label", label), ("context", context)])
}

fn join_lines<'s>(parts: impl Iterator<Item = &'s str>) -> String {
    parts.collect::<Vec<_>>().join("\n")
}

const CHAT_SYSTEM_PERSONA: &str = "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\nYou embody the persona in the description to complete the tasks.<|eot_id|><|start_header_id|>user<|end_header_id|>\n\n{persona}\n\n";
const CHAT_SYSTEM_HELPER: &str = "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\nYou are a helpful AI assistant<|eot_id|><|start_header_id|>user<|end_header_id|>\n\n";
const ASSISTANT_PERSONA: &str = "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\nThe short persona is:";

const MOVIE_REVIEW_SYNTH: &str = "Given a list of movie review written by a viewer, construct a concise persona description that reflects the review's preferences, writing style, and thematic interests.\n\nExamples of Persona Descriptions:\nYou are a movie critic, specializing in horror movies and independent films with a focus on cinematography and storytelling.\nYou are a casual viewer who enjoys action-packed films and writes personal and informal reviews.\n\nList of reviews:\n{examples}\n\nGenerate a short persona description that synthesizes their focus, preferences, and stylistic tendencies into a single cohesive statement.";

const MOVIE_STEERING: &str = "You watched the movie {context} and had {label} impression. Please write a review for the movie:";

fn agnews() -> TaskTemplates {
    TaskTemplates {
        name: "agnews".into(),
        sample: format!(
            "{CHAT_SYSTEM_PERSONA}You have written the following news blurb: {{example}}\n\nPlease write a short news blurb similar to the above blurb.<|eot_id|> <|start_header_id|>assistant<|end_header_id|>\n\n"
        ),
        synthesize: format!(
            "{CHAT_SYSTEM_HELPER}Given a list of news blurbs written by a reporter, construct a concise persona description that reflects the reporter's primary focus, style, and thematic interests.\n\nExample persona descriptions:\nYou are a sports reporter, specializing in baseball news, with a focus on the Major League Baseball (MLB) playoffs and postseason games.\n\nList of news blurbs:\n{{examples}}\n\nGenerate a short persona description that synthesizes their focus, preferences, and stylistic tendencies into a single cohesive statement.{ASSISTANT_PERSONA}"
        ),
        classify: Some(format!(
            "{CHAT_SYSTEM_HELPER}Given a persona description of a reporter, choose the specialization of the personas: world news, sports news, business news, sci/tech news.\n\nPersona description: You are a technology reporter, specializing in the intersection of hardware and software, with a focus on the PC industry, Linux, and major tech companies like Microsoft, Apple, and IBM.\nOptions:\nA. world news\nB. sports news\nC. business news\nD. sci/tech news\nAnswer: D\n\nPersona description: {{persona}}\nOptions:\n{{options}}\nAnswer: <|eot_id|><|start_header_id|>assistant<|end_header_id|>"
        )),
        labels: ["world news", "sports news", "business news", "sci/tech news"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        mix: Some(
            "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\nYou are a highly capable and insightful AI assistant<|eot_id|><|start_header_id|>user<|end_header_id|>\n\nGiven a list of persona descriptions of a reporter and a list of news blurbs he/she has written, construct a concise persona description that reflects the reporter's primary focus, style, and thematic interests.\n\nExample persona descriptions:\nYou are a sports reporter, specializing in baseball news, with a focus on the Major League Baseball (MLB) playoffs and postseason games.\n\nInputs:\n1. List of persona descriptions: A list of general persona characteristics previously associated with the reporter.\n2. List of news blurbs: A selection of sample news blurbs authored by the reporter, which reveal their tone, thematic focus, and writing style.\n\nUsing the inputs, generate a short persona description that synthesizes their focus, preferences, and stylistic tendencies into a single cohesive statement.\n\nList of persona descriptions:\n{personas}\n\nList of news blurbs:\n{examples}\n\nPlease provide the short persona description.<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\nThe short persona is:"
                .into(),
        ),
        steering: None,
    }
}

fn yelp() -> TaskTemplates {
    TaskTemplates {
        name: "yelp".into(),
        sample: format!(
            "{CHAT_SYSTEM_PERSONA}Your review for the restaurant {{context}}: {{example}}\n\nPlease write a short review for the restaurant {{context}}, similar to the above review:<|eot_id|> <|start_header_id|>assistant<|end_header_id|>\n\n"
        ),
        synthesize: format!(
            "{CHAT_SYSTEM_HELPER}Given a list of restaurant review written by a customer, construct a concise persona description that reflects the customer's preferences, writing style, and interests.\n\nExamples of Persona Descriptions:\nYou are a food critic, specializing in fine dining and gourmet cuisine with a focus on presentation and taste.\nYou are a casual diner who enjoys comfort food and writes personal and informal reviews.\n\nList of reviews:\n{{examples}}\n\nGenerate a short persona description that synthesizes their interests, preferences, and writing stylistic tendencies into a single cohesive statement.{ASSISTANT_PERSONA}"
        ),
        classify: None,
        labels: Vec::new(),
        mix: None,
        steering: Some("You visited the restaurant {context} and had {label} impression. Please write a review for the restaurant:".into()),
    }
}

fn sst2() -> TaskTemplates {
    TaskTemplates {
        name: "sst2".into(),
        sample: format!(
            "{CHAT_SYSTEM_PERSONA}You have written the following review: {{example}}\n\nPlease write a review sentence, similar to the above review:<|eot_id|><|start_header_id|>assistant<|end_header_id|> \n\n<|start_header_id|>assistant<|end_header_id|>\n\n"
        ),
        synthesize: format!("{CHAT_SYSTEM_HELPER}{MOVIE_REVIEW_SYNTH}{ASSISTANT_PERSONA}"),
        classify: None,
        labels: Vec::new(),
        mix: None,
        steering: Some(MOVIE_STEERING.into()),
    }
}

fn imdb() -> TaskTemplates {
    TaskTemplates {
        name: "imdb".into(),
        sample: format!(
            "{CHAT_SYSTEM_PERSONA}You have written the following review for the movie {{context}}: {{example}}\n\nPlease write a review for the movie {{context}}, similar to the above review:<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n"
        ),
        synthesize: format!("{CHAT_SYSTEM_HELPER}{MOVIE_REVIEW_SYNTH}{ASSISTANT_PERSONA}"),
        classify: None,
        labels: Vec::new(),
        mix: None,
        steering: Some(MOVIE_STEERING.into()),
    }
}

/// Newline-separated templates for character-level toy models, where chat
/// markup would only add noise.
fn plain() -> TaskTemplates {
    TaskTemplates {
        name: "plain".into(),
        sample: "{persona}\n{example}\n{context}\n".into(),
        synthesize: "{examples}\n".into(),
        classify: Some("{persona}\n{options}\nanswer: ".into()),
        labels: Vec::new(),
        mix: Some("{personas}\n{examples}\n".into()),
        steering: Some("had {label} impression of {context}".into()),
    }
}
