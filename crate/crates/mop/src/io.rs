//! Files on disk: records, personas, pools, generations and JSON reports,
//! each with a `<file>.meta.json` sidecar carrying the format version and
//! the SHA-256 of the content.

use std::fs;
use std::path::{Path, PathBuf};

use mop_core::corpus::{parse_personas, parse_pool, parse_records, write_personas, write_pool, write_records};
use mop_core::corpus::{Dataset, ExemplarPool, Persona, Record};
use mop_core::simulate::GenerationRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::NotFound(path.display().to_string())
    } else {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

/// Writes `content` and its sidecar, creating parent directories.
pub fn write_versioned(path: &Path, content: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, content).map_err(|e| io_err(path, e))?;
    let meta = Sidecar {
        format_version: FORMAT_VERSION,
        sha256: sha256_hex(content.as_bytes()),
    };
    let side = sidecar_path(path);
    fs::write(&side, to_json(&meta)).map_err(|e| io_err(&side, e))
}

/// Reads a file and checks it against its sidecar when one exists. Files
/// without a sidecar are accepted as hand-made input.
pub fn read_versioned(path: &Path) -> CliResult<String> {
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let side = sidecar_path(path);
    match fs::read_to_string(&side) {
        Ok(meta) => {
            let meta: Sidecar = serde_json::from_str(&meta)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", side.display())))?;
            if meta.format_version != FORMAT_VERSION {
                return Err(CliError::Invalid(format!(
                    "{}: format version {} is not supported (expected {FORMAT_VERSION})",
                    path.display(),
                    meta.format_version
                )));
            }
            let actual = sha256_hex(content.as_bytes());
            if actual != meta.sha256 {
                return Err(CliError::Invalid(format!(
                    "{}: content hash {actual} does not match sidecar {}",
                    path.display(),
                    meta.sha256
                )));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::debug!("{} has no sidecar", path.display());
        }
        Err(e) => return Err(io_err(&side, e)),
    }
    Ok(content)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

pub fn load_records(path: &Path) -> CliResult<Dataset> {
    let text = read_versioned(path)?;
    Ok(parse_records(&text)?.with_provenance(mop_core::corpus::Provenance {
        source: path.display().to_string(),
        loaded_at: String::new(),
    }))
}

pub fn save_records(path: &Path, records: &[Record]) -> CliResult<()> {
    write_versioned(path, &write_records(records))
}

pub fn load_personas(path: &Path) -> CliResult<Vec<Persona>> {
    let text = read_versioned(path).map_err(|e| match e {
        CliError::NotFound(p) => CliError::Invalid(format!("personas not found: {p}")),
        other => other,
    })?;
    Ok(parse_personas(&text)?)
}

pub fn save_personas(path: &Path, personas: &[Persona]) -> CliResult<()> {
    write_versioned(path, &write_personas(personas))
}

pub fn load_pool(path: &Path) -> CliResult<ExemplarPool> {
    Ok(parse_pool(&read_versioned(path)?)?)
}

pub fn save_pool(path: &Path, pool: &ExemplarPool) -> CliResult<()> {
    write_versioned(path, &write_pool(pool))
}

pub fn write_generations(records: &[GenerationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("generation serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_generations(text: &str) -> CliResult<Vec<GenerationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Invalid(format!("generation line {}: {e}", i + 1)))
        })
        .collect()
}

/// Response texts of either a generations file or a record file.
pub fn load_texts(path: &Path) -> CliResult<Vec<String>> {
    let text = read_versioned(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let value: serde_json::Value =
        serde_json::from_str(first).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if value.get("text").is_some() {
        Ok(parse_generations(&text)?.into_iter().map(|g| g.text).collect())
    } else {
        Ok(parse_records(&text)?.responses())
    }
}

/// Documents of a toy backend corpus: blocks separated by blank lines.
pub fn parse_corpus(text: &str) -> Vec<String> {
    text.split("\n\n")
        .map(|d| d.trim_matches('\n'))
        .filter(|d| !d.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn write_corpus<S: AsRef<str>>(docs: &[S]) -> String {
    let mut s = docs.iter().map(|d| d.as_ref()).collect::<Vec<_>>().join("\n\n");
    s.push('\n');
    s
}
