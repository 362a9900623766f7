//! Run manifests and the key=value config file format.
//!
//! A [`RunManifest`] records everything needed to replay an experiment:
//! the seed, the full config snapshot, the dataset seeds and a code
//! version string. Config files are plain `key = value` lines; `#` starts
//! a comment. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Parsed `key = value` file. Values stay as strings until a typed getter
/// is called.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::Data(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CoreError::Data(format!("config key `{key}` given twice")));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)?;
        ConfigFile::parse(&text)
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        self.entries.remove(key).unwrap_or_else(|| default.to_string())
    }

    pub fn get_f32(&mut self, key: &str, default: f32) -> Result<f32> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Data(format!("config key `{key}`: bad float `{v}`"))),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Data(format!("config key `{key}`: bad integer `{v}`"))),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(CoreError::Data(format!("config key `{key}`: bad bool `{v}`"))),
            },
        }
    }

    /// Call after all getters: any key still present is unknown.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(CoreError::Data(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}

/// Wall-clock duration of one phase of a run, in seconds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Everything needed to replay an experiment bitwise: the seed, the
/// effective config snapshot (post-defaulting), the dataset seeds and the
/// code version. Timings are informational.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub experiment_seed: u64,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub dataset_seeds: Vec<u64>,
    pub code_version: String,
    pub timings: Vec<PhaseTiming>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            experiment_seed: seed,
            command: command.to_string(),
            config: BTreeMap::new(),
            dataset_seeds: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timings: Vec::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn record_timing(&mut self, phase: &str, seconds: f64) {
        self.timings.push(PhaseTiming { phase: phase.to_string(), seconds });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("manifest parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_comments_and_defaults() {
        let mut cfg = ConfigFile::parse("lr = 0.01 # step size\niters=50\nname = run a\nflag = yes\n").unwrap();
        assert_eq!(cfg.get_f32("lr", 1.0).unwrap(), 0.01);
        assert_eq!(cfg.get_usize("iters", 0).unwrap(), 50);
        assert_eq!(cfg.get_str("name", ""), "run a");
        assert!(cfg.get_bool("flag", false).unwrap());
        assert_eq!(cfg.get_usize("missing", 7).unwrap(), 7);
        cfg.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        assert!(ConfigFile::parse("a = 1\na = 2\n").is_err());
        assert!(ConfigFile::parse("just a line without equals\n").is_err());
        let cfg = ConfigFile::parse("typo_key = 3\n").unwrap();
        assert!(cfg.finish().is_err());
        let mut cfg = ConfigFile::parse("lr = abc\n").unwrap();
        assert!(cfg.get_f32("lr", 0.0).is_err());
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = std::env::temp_dir().join("vuda-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        let mut m = RunManifest::new("adapt", 42);
        m.record("lr", 0.01);
        m.dataset_seeds = vec![1000, 2000];
        m.record_timing("adapt", 1.5);
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.experiment_seed, 42);
        assert_eq!(back.command, "adapt");
        assert_eq!(back.config["lr"], "0.01");
        assert_eq!(back.dataset_seeds, vec![1000, 2000]);
        assert_eq!(back.timings[0].phase, "adapt");
        std::fs::remove_file(&path).ok();
    }
}
