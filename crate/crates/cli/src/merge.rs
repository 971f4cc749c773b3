//! Flag / config-file merging: explicit flags win, then values from the
//! optional JSON config, then built-in defaults.

use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn run(err: impl std::fmt::Display) -> Self {
        CliError::Run(err.to_string())
    }

    pub fn run_msg(msg: impl Into<String>) -> Self {
        CliError::Run(msg.into())
    }
}

pub struct Merge {
    config: serde_json::Map<String, serde_json::Value>,
}

impl Merge {
    pub fn from_config(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            None => serde_json::Map::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::run_msg(format!("{}: {e}", path.display())))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::run_msg(format!("{}: {e}", path.display())))?;
                match value {
                    serde_json::Value::Object(map) => map,
                    _ => {
                        return Err(CliError::usage(format!(
                            "{}: config must be a JSON object",
                            path.display()
                        )))
                    }
                }
            }
        };
        Ok(Merge { config })
    }

    pub fn usize(&self, flag: Option<usize>, key: &str, default: usize) -> usize {
        flag.or_else(|| {
            self.config
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
        })
        .unwrap_or(default)
    }

    pub fn u64(&self, flag: Option<u64>, key: &str, default: u64) -> u64 {
        flag.or_else(|| self.config.get(key).and_then(|v| v.as_u64()))
            .unwrap_or(default)
    }

    pub fn f64(&self, flag: Option<f64>, key: &str, default: f64) -> f64 {
        flag.or_else(|| self.config.get(key).and_then(|v| v.as_f64()))
            .unwrap_or(default)
    }

    pub fn f64_opt(&self, flag: Option<f64>, key: &str) -> Option<f64> {
        flag.or_else(|| self.config.get(key).and_then(|v| v.as_f64()))
    }

    /// Required string flags are always present (clap enforces them), so
    /// the config never participates; kept for a uniform call shape.
    pub fn string(&self, flag: String, _key: &str) -> String {
        flag
    }

    pub fn string_opt(&self, flag: Option<String>, key: &str) -> Option<String> {
        flag.or_else(|| {
            self.config
                .get(key)
                .and_then(|v| v.as_str())
                .map(String::from)
        })
    }

    /// Boolean flags: presence on the command line wins, otherwise the
    /// config value, otherwise false.
    pub fn flag(&self, flag: bool, key: &str) -> bool {
        flag || self
            .config
            .get(key)
            .and_then(|v| v.as_bool())
            .unwrap_or(false)
    }
}
