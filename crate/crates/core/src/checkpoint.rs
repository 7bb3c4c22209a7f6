//! Self-describing JSON checkpoints. Every file carries a `kind` tag so a
//! retriever checkpoint cannot be loaded where a reranker is expected.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

/// Hex SHA-256 of the value's canonical JSON form. Deterministic: map keys
/// come from ordered containers and float formatting is shortest-round-trip.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    crate::vocab::hex(&Sha256::digest(&bytes))
}

/// Writes atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope { kind: kind.to_string(), version: FORMAT_VERSION, payload };
    let bytes = serde_json::to_vec(&env).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<serde_json::Value> =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            env.kind
        )));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} not supported (this build reads {FORMAT_VERSION})",
            path.display(),
            env.version
        )));
    }
    serde_json::from_value(env.payload).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
