//! TOML scenario and run configuration files.

use std::ops::Range;
use std::path::Path;

use navfuse::fusion::EstimatorConfig;
use navfuse::sim::{Scenario, SimError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Settings shared by `fuse`, `polar` and `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    /// Corner quality level in (0, 1).
    pub quality: f64,
    /// Seeds for repeated simulation trials; empty keeps the scenario seed.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            quality: 0.9,
            seeds: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let config: Self = parse_toml(&text, path)?;
        if !(config.quality > 0.0 && config.quality < 1.0) {
            return Err(located(path, &text, "quality", format!("quality must lie in (0, 1), got {}", config.quality)));
        }
        Ok(config)
    }
}

/// A parsed scenario together with the digest of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub sha256: String,
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, CliError> {
    let text = read(path)?;
    let scenario: Scenario = parse_toml(&text, path)?;
    if let Err(e) = scenario.validate() {
        let key = match &e {
            SimError::InvalidScenario(m) => m.split_whitespace().next().unwrap_or(""),
            SimError::InvalidRegion { .. } => "regions",
            SimError::DegeneratePath(_) => "points",
        };
        return Err(located(path, &text, key, e.to_string()));
    }
    Ok(LoadedScenario {
        scenario,
        sha256: hex_digest(text.as_bytes()),
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| {
        let span: Option<Range<usize>> = e.span();
        let message = e.message().trim().to_string();
        match span {
            Some(span) => CliError::Data(format!("{}:{}: {message}", path.display(), line_of(text, span.start))),
            None => CliError::Data(format!("{}: {message}", path.display())),
        }
    })
}

/// Attaches the line of the first `key = ...` assignment when there is one.
fn located(path: &Path, text: &str, key: &str, message: String) -> CliError {
    let line = text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    });
    match line {
        Some(i) if !key.is_empty() => CliError::Data(format!("{}:{}: {message}", path.display(), i + 1)),
        _ => CliError::Data(format!("{}: {message}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 1\n\n[path]\nkind = \"loop\"\nradius = oops\n");
        let msg = load_scenario(&p).unwrap_err().to_string();
        assert!(msg.contains("c.toml:5:"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 1\nspeeed = 2\n[path]\nkind = \"loop\"\nradius = 5\nlaps = 1\nspeed = 1\n");
        let msg = load_scenario(&p).unwrap_err().to_string();
        assert!(msg.contains("c.toml:2:") && msg.contains("speeed"), "{msg}");
        let p = write(dir.path(), "[estimator.toggles]\nmagg = false\n");
        let msg = RunConfig::load(&p).unwrap_err().to_string();
        assert!(msg.contains("c.toml:2:"), "{msg}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "seed = 1\nduration = 0\n[path]\nkind = \"loop\"\nradius = 5\nlaps = 1\nspeed = 1\n",
        );
        let msg = load_scenario(&p).unwrap_err().to_string();
        assert!(msg.contains("c.toml:2:") && msg.contains("duration"), "{msg}");
        let p = write(dir.path(), "quality = 1.5\n");
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("c.toml:1:"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            hex_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
