//! Reproducibility manifest embedded in every JSON artifact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Everything needed to reproduce a run: command, inputs, options, tool
/// version. The timestamp is wall-clock unless `ENVMIX_TIMESTAMP` is set,
/// which pins it for byte-identical re-runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub options: BTreeMap<String, serde_json::Value>,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let timestamp = std::env::var("ENVMIX_TIMESTAMP")
            .unwrap_or_else(|_| chrono::Utc::now().to_rfc3339());
        Self {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            output: String::new(),
            options: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
        }
    }

    pub fn input(mut self, name: &str, path: &str) -> Self {
        self.inputs.insert(name.to_string(), path.to_string());
        self
    }

    pub fn output(mut self, path: &str) -> Self {
        self.output = path.to_string();
        self
    }

    pub fn opt(mut self, name: &str, value: impl Into<serde_json::Value>) -> Self {
        self.options.insert(name.to_string(), value.into());
        self
    }
}
