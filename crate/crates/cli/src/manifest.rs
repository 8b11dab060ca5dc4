//! Per-run manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub threads: usize,
    /// Command-line values after defaults are applied.
    pub params: Value,
    /// Values derived from the inputs, such as automatic SH orders.
    pub effective: Value,
    pub outputs: Vec<PathBuf>,
    pub results: Value,
}

impl Manifest {
    pub fn new(subcommand: &'static str, threads: usize, params: &impl Serialize) -> Self {
        Manifest {
            tool: "qspace",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            threads,
            params: serde_json::to_value(params).expect("arguments serialize"),
            effective: Value::Object(Default::default()),
            outputs: Vec::new(),
            results: Value::Object(Default::default()),
        }
    }

    pub fn effective(&mut self, key: &str, value: impl Serialize) {
        insert(&mut self.effective, key, value);
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        insert(&mut self.results, key, value);
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

fn insert(map: &mut Value, key: &str, value: impl Serialize) {
    if let Value::Object(m) = map {
        m.insert(key.to_string(), serde_json::to_value(value).expect("value serializes"));
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
