//! Population records, personas and the exemplar pool.
//!
//! Labels ride along on [`Record`] for evaluation and labelled generation,
//! but everything that trains or scores sees only [`Example`], which has no
//! label field.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub context: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Label-free view of a record; the only shape training code accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: String,
    pub response: String,
}

impl Record {
    pub fn example(&self) -> Example {
        Example {
            id: self.id.clone(),
            context: self.context.clone(),
            response: self.response.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub loaded_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    /// Validates non-emptiness, unique ids and non-empty responses.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("empty dataset"));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.response.is_empty() {
                return Err(Error::validation(format!("record {} has an empty response", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(Dataset {
            records,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn training_view(&self) -> Vec<Example> {
        self.records.iter().map(Record::example).collect()
    }

    pub fn contexts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.context.clone()).collect()
    }

    pub fn responses(&self) -> Vec<String> {
        self.records.iter().map(|r| r.response.clone()).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    context: Option<String>,
    response: Option<String>,
    #[serde(default)]
    label: Option<String>,
}

/// Parses line-delimited JSON records. Blank lines are skipped; line numbers
/// in errors are 1-based. Records without an `id` get their 0-based record
/// index as id.
pub fn parse_records(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let response = raw.response.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing field `response`".into(),
        })?;
        if response.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty `response`".into(),
            });
        }
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => records.len().to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("`id` must be a string or number, got {other}"),
                })
            }
        };
        records.push(Record {
            id,
            context: raw.context.unwrap_or_default(),
            response,
            label: raw.label,
        });
    }
    Dataset::new(records)
}

/// Canonical line-delimited JSON: one object per line, fields in the order
/// `id, context, response, label`, label omitted when absent.
pub fn write_records(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Splits into `(train, heldout)` with `round(fraction * n)` held out.
pub fn split_dataset(d: &Dataset, heldout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::validation(format!(
            "heldout fraction must lie in (0, 1), got {heldout_fraction}"
        )));
    }
    let n = d.len();
    let n_heldout = libm::round(heldout_fraction * n as f64) as usize;
    if n_heldout >= n {
        return Err(Error::validation("empty train split"));
    }
    if n_heldout == 0 {
        return Err(Error::validation("empty heldout split"));
    }
    let mut rng = rng::rng_from(seed);
    let picked = rand::seq::index::sample(&mut rng, n, n_heldout);
    let mut is_heldout = alloc::vec![false; n];
    for i in picked.iter() {
        is_heldout[i] = true;
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (r, &h) in d.records.iter().zip(&is_heldout) {
        if h {
            heldout.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((Dataset::new(train)?, Dataset::new(heldout)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaSource {
    UserDefined,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: usize,
    pub description: String,
    pub source: PersonaSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Cluster the persona was synthesized from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

impl Persona {
    pub fn user_defined(id: usize, description: impl Into<String>) -> Self {
        Persona {
            id,
            description: description.into(),
            source: PersonaSource::UserDefined,
            label: None,
            cluster: None,
        }
    }
}

/// Checks ids are exactly `0..K` in order and descriptions are non-empty.
pub fn validate_personas(personas: &[Persona]) -> Result<()> {
    if personas.is_empty() {
        return Err(Error::validation("persona list is empty"));
    }
    for (i, p) in personas.iter().enumerate() {
        if p.id != i {
            return Err(Error::validation(format!(
                "persona at position {i} has id {}, expected {i}",
                p.id
            )));
        }
        if p.description.trim().is_empty() {
            return Err(Error::validation(format!("persona {i} has an empty description")));
        }
    }
    Ok(())
}

pub fn parse_personas(text: &str) -> Result<Vec<Persona>> {
    let personas: Vec<Persona> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    validate_personas(&personas)?;
    Ok(personas)
}

pub fn write_personas(personas: &[Persona]) -> String {
    let mut s = serde_json::to_string_pretty(personas).expect("personas serialize");
    s.push('\n');
    s
}

/// Fixed, indexed set of in-context exemplars. Index `j` is the identity of
/// exemplar `j` for the lifetime of a trained model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarPool {
    exemplars: Vec<Example>,
    origin_ids: Vec<String>,
}

impl ExemplarPool {
    pub fn new(exemplars: Vec<Example>) -> Result<Self> {
        if exemplars.is_empty() {
            return Err(Error::validation("exemplar pool is empty"));
        }
        let origin_ids = exemplars.iter().map(|e| e.id.clone()).collect();
        Ok(ExemplarPool {
            exemplars,
            origin_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn get(&self, j: usize) -> &Example {
        &self.exemplars[j]
    }

    pub fn exemplars(&self) -> &[Example] {
        &self.exemplars
    }

    pub fn origin_ids(&self) -> &[String] {
        &self.origin_ids
    }

    /// Pool index of the exemplar drawn from record `id`, if any.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.origin_ids.iter().position(|o| o == id)
    }
}

pub fn parse_pool(text: &str) -> Result<ExemplarPool> {
    let pool: ExemplarPool = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if pool.exemplars.is_empty() || pool.exemplars.len() != pool.origin_ids.len() {
        return Err(Error::validation("exemplar pool is empty or inconsistent"));
    }
    Ok(pool)
}

pub fn write_pool(pool: &ExemplarPool) -> String {
    let mut s = serde_json::to_string_pretty(pool).expect("pool serializes");
    s.push('\n');
    s
}

/// Samples `n` records without replacement, in draw order.
pub fn sample_exemplar_pool(d: &Dataset, n: usize, seed: u64) -> Result<ExemplarPool> {
    if n == 0 || n > d.len() {
        return Err(Error::validation(format!(
            "pool size {n} must lie in 1..={}",
            d.len()
        )));
    }
    let mut rng = rng::rng_from(seed);
    let idx = rand::seq::index::sample(&mut rng, d.len(), n);
    ExemplarPool::new(idx.iter().map(|i| d.records[i].example()).collect())
}
