//! Versioned container for trained gates.

use std::path::Path;

use mop_core::corpus::{write_personas, write_pool, ExemplarPool, Persona};
use mop_core::embed::EmbedderFingerprint;
use mop_core::gating::{ExemplarText, GateState, GatingParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{read_versioned, sha256_hex, to_json, write_versioned, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub d: usize,
    pub d_in: usize,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub epoch: usize,
    pub heldout_loglik: f64,
    pub params: GatingParams,
    pub gate_state: GateState,
    pub exemplar_text: ExemplarText,
    pub persona_hash: String,
    pub pool_hash: String,
    pub embedder: EmbedderFingerprint,
    pub backend: String,
}

pub fn persona_hash(personas: &[Persona]) -> String {
    sha256_hex(write_personas(personas).as_bytes())
}

pub fn pool_hash(pool: &ExemplarPool) -> String {
    sha256_hex(write_pool(pool).as_bytes())
}

/// What a checkpoint is about to be used with.
pub struct Expected<'a> {
    pub personas: &'a [Persona],
    pub pool: &'a ExemplarPool,
    pub embedder: &'a EmbedderFingerprint,
    pub backend: &'a str,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: GatingParams,
        gate_state: GateState,
        exemplar_text: ExemplarText,
        m: usize,
        epoch: usize,
        heldout_loglik: f64,
        personas: &[Persona],
        pool: &ExemplarPool,
        backend: String,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            d: params.d(),
            d_in: params.d_in(),
            k: params.k(),
            n: pool.len(),
            m,
            epoch,
            heldout_loglik,
            embedder: gate_state.fingerprint.clone(),
            params,
            gate_state,
            exemplar_text,
            persona_hash: persona_hash(personas),
            pool_hash: pool_hash(pool),
            backend,
        }
    }

    /// Shape checks, then artifact identity checks unless `force`.
    pub fn verify(&self, expected: &Expected<'_>, force: bool) -> CliResult<()> {
        self.params.validate()?;
        self.gate_state.check(&self.params)?;
        if self.k != self.params.k() || self.d != self.params.d() || self.d_in != self.params.d_in() {
            return Err(CliError::Invalid("checkpoint header disagrees with its matrices".into()));
        }
        if self.n != self.gate_state.n() || expected.personas.len() != self.k || expected.pool.len() != self.n {
            return Err(CliError::Invalid(format!(
                "checkpoint has K={} N={} but {} personas and {} exemplars were supplied",
                self.k,
                self.n,
                expected.personas.len(),
                expected.pool.len()
            )));
        }
        let mut problems = Vec::new();
        if persona_hash(expected.personas) != self.persona_hash {
            problems.push("persona list".to_string());
        }
        if pool_hash(expected.pool) != self.pool_hash {
            problems.push("exemplar pool".to_string());
        }
        if expected.embedder != &self.embedder {
            problems.push(format!("embedder ({} vs {})", expected.embedder, self.embedder));
        }
        if expected.backend != self.backend {
            problems.push(format!("backend ({} vs {})", expected.backend, self.backend));
        }
        if problems.is_empty() {
            return Ok(());
        }
        let msg = format!("checkpoint mismatch: {}", problems.join(", "));
        if force {
            log::warn!("{msg}; continuing because of --force");
            Ok(())
        } else {
            Err(CliError::Invalid(format!("{msg} (use --force to override)")))
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_versioned(path, &to_json(self))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_versioned(path)?;
        let c: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        if c.format_version != FORMAT_VERSION {
            return Err(CliError::Invalid(format!(
                "checkpoint format version {} is not supported",
                c.format_version
            )));
        }
        Ok(c)
    }
}
