//! Run manifests and stable configuration hashing for the command-line
//! tool.
//!
//! Every run that writes an output file also writes a manifest next to it
//! describing the subcommand, its input, its flags, and a configuration
//! hash. The hash is a SHA-256 digest of the canonicalized input JSON
//! (object keys sorted recursively, compact separators, no timestamps), so
//! re-running a command on the same input always reproduces the same
//! digest regardless of key order or whitespace in the source file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Tool version baked in at compile time.
pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Serializes a JSON value with all object keys sorted recursively, in
/// compact form. Arrays keep their order; scalars render via the standard
/// JSON formatter, which is deterministic for finite floats.
pub fn canonical_json(value: &Value) -> String {
    fn sort(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, Value> =
                    map.iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(
                    sorted
                        .into_iter()
                        .map(|(k, v)| (k.clone(), v))
                        .collect(),
                )
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

/// Hex SHA-256 digest of the canonicalized JSON value.
pub fn config_hash(value: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(value).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub tool: String,
    pub config_hash: String,
}

/// Description of one tool invocation, written alongside its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub input_path: Option<String>,
    pub flags: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    pub versions: Versions,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        input_path: Option<String>,
        flags: BTreeMap<String, String>,
        input_json: &Value,
    ) -> Self {
        RunManifest {
            subcommand: subcommand.to_owned(),
            input_path,
            flags,
            output_paths: Vec::new(),
            versions: Versions {
                tool: tool_version().to_owned(),
                config_hash: config_hash(input_json),
            },
        }
    }

    /// Writes the manifest next to `output`, as `<output>.manifest.json`.
    pub fn write_alongside(&mut self, output: &Path) -> Result<PathBuf> {
        let mut name = output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "output".to_owned());
        name.push_str(".manifest.json");
        let path = output.with_file_name(name);
        self.output_paths = vec![output.display().to_string()];
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, body + "\n")?;
        Ok(path)
    }
}
