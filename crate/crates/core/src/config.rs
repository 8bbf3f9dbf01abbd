//! Experiment configuration files (TOML).
//!
//! ```toml
//! methods = ["BASE", "HIBBO"]
//! seeds = [0, 1, 2]
//! out_dir = "results/ackley"
//!
//! [problem]
//! kind = "ackley"
//! dim = 60
//!
//! [bo]
//! budget = 100
//! frequency = 5
//! latent_dim = 10
//! ```
//!
//! `[bo]` takes every [`BoConfig`] field except `method` and `seed`, which
//! come from the top-level lists. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::benchmarks::ProblemSpec;
use crate::bo::{BoConfig, Method};
use crate::error::{Error, Result};
use crate::record::config_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub bo: BoConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        if let Some(bo) = value.get("bo").and_then(toml::Value::as_table) {
            for key in ["method", "seed"] {
                if bo.contains_key(key) {
                    return Err(Error::ConfigInvalid(format!(
                        "unknown field `bo.{key}`: set `{key}s` at the top level instead"
                    )));
                }
            }
        }
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if self.methods.is_empty() {
            return Err(Error::ConfigInvalid("`methods` must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::ConfigInvalid("`seeds` must not be empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::ConfigInvalid(format!("method {m} listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::ConfigInvalid(format!("seed {s} listed twice")));
            }
        }
        self.bo.validate().map_err(|e| match e {
            Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("bo: {m}")),
            other => Error::ConfigInvalid(format!("bo: {other}")),
        })
    }

    /// Hash of the problem and BO settings. Method, seed list and output
    /// directory are excluded: they name runs rather than change them.
    pub fn hash(&self) -> String {
        config_hash(&(
            &self.problem,
            BoConfig {
                seed: 0,
                method: Method::default(),
                ..self.bo.clone()
            },
        ))
    }

    /// Resolved per-run settings.
    pub fn run_config(&self, method: Method, seed: u64) -> BoConfig {
        BoConfig {
            method,
            seed,
            ..self.bo.clone()
        }
    }

    /// `(method, seed)` pairs in output order.
    pub fn runs(&self) -> Vec<(Method, u64)> {
        self.methods
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .collect()
    }
}

/// Record file name for one run.
pub fn record_file_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}.jsonl", method.as_str().to_ascii_lowercase())
}

/// Parses `"3"`, `"0,2,5"` or `"0..5"` (end exclusive).
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::ConfigInvalid(format!("bad seed list {s:?}; expected e.g. 0,1,2 or 0..5"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b || b - a > 1_000_000 {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
