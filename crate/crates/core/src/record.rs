//! Run records and their line-delimited JSON form.
//!
//! A record file is one header line, one line per objective evaluation
//! (initial design included), and one footer line. Every line is a JSON
//! object tagged by `"type"`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RECORD_FORMAT: &str = "hibbo-run";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub format: String,
    pub version: u32,
    pub problem: String,
    pub input_dim: usize,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub budget: usize,
    pub frequency: usize,
    pub initial_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Bo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub index: usize,
    pub phase: Phase,
    /// Outer round that produced the query; absent for the initial design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    /// Set on the first query after each VAE (re)training.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<f64>,
    pub value: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSummary {
    pub round: usize,
    pub epochs: usize,
    /// Training loss before the last update of the round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub queries: usize,
    /// Whether the round ended because the acquisition fell below threshold.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub below_threshold: bool,
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTimings {
    pub train: f64,
    pub gp: f64,
    pub acquisition: f64,
    pub evaluation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordFooter {
    pub evaluations: usize,
    pub best_value: f64,
    pub best_index: usize,
    pub rounds: Vec<RoundSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

/// One line of a record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordLine {
    Header(RecordHeader),
    Query(QueryRecord),
    Footer(RecordFooter),
}

impl RecordLine {
    /// Compact JSON without the trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RecordHeader,
    pub queries: Vec<QueryRecord>,
    pub footer: RecordFooter,
}

impl RunRecord {
    pub fn best_so_far(&self) -> Vec<f64> {
        self.queries.iter().map(|q| q.best_so_far).collect()
    }

    pub fn final_best(&self) -> f64 {
        self.footer.best_value
    }

    pub fn initial_best(&self) -> f64 {
        self.queries
            .iter()
            .filter(|q| q.phase == Phase::Initial)
            .map(|q| q.value)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn bo_queries(&self) -> usize {
        self.queries.iter().filter(|q| q.phase == Phase::Bo).count()
    }

    /// Query lines only, serialized; used to compare trajectories of runs
    /// whose headers differ.
    pub fn trajectory_json(&self) -> String {
        serde_json::to_string(&self.queries).expect("records serialize")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: RecordLine| {
            out.push_str(&line.to_json());
            out.push('\n');
        };
        push(RecordLine::Header(self.header.clone()));
        for q in &self.queries {
            push(RecordLine::Query(q.clone()));
        }
        push(RecordLine::Footer(self.footer.clone()));
        out
    }

    /// Parses and validates a complete record.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut queries = Vec::new();
        let mut footer = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: RecordLine =
                serde_json::from_str(raw).map_err(|e| Error::Parse(format!("record line {}: {e}", i + 1)))?;
            if footer.is_some() {
                return Err(Error::Parse(format!("record line {}: content after footer", i + 1)));
            }
            match line {
                RecordLine::Header(h) if header.is_none() && queries.is_empty() => header = Some(h),
                RecordLine::Header(_) => return Err(Error::Parse(format!("record line {}: unexpected header", i + 1))),
                RecordLine::Query(_) | RecordLine::Footer(_) if header.is_none() => {
                    return Err(Error::Parse("record does not start with a header".into()))
                }
                RecordLine::Query(q) => queries.push(q),
                RecordLine::Footer(f) => footer = Some(f),
            }
        }
        let record = RunRecord {
            header: header.ok_or_else(|| Error::Parse("record has no header".into()))?,
            queries,
            footer: footer.ok_or_else(|| Error::Parse("record has no footer (incomplete run?)".into()))?,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parse(m));
        if self.header.format != RECORD_FORMAT || self.header.version != RECORD_VERSION {
            return bad(format!(
                "unsupported record format {:?} v{}",
                self.header.format, self.header.version
            ));
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_index = 0;
        for (i, q) in self.queries.iter().enumerate() {
            if q.index != i {
                return bad(format!("query {i} has index {}", q.index));
            }
            if !q.value.is_finite() {
                return bad(format!("query {i} has non-finite value"));
            }
            if q.value > best {
                best = q.value;
                best_index = i;
            }
            if q.best_so_far != best {
                return bad(format!(
                    "query {i}: best_so_far {} is not the running maximum {best}",
                    q.best_so_far
                ));
            }
            if let Some(x) = &q.x {
                if x.len() != self.header.input_dim {
                    return bad(format!(
                        "query {i}: x has {} entries, expected {}",
                        x.len(),
                        self.header.input_dim
                    ));
                }
            }
        }
        if self.footer.evaluations != self.queries.len() {
            return bad(format!(
                "footer counts {} evaluations but the record has {}",
                self.footer.evaluations,
                self.queries.len()
            ));
        }
        if self.queries.len() > self.header.budget {
            return bad("record exceeds its budget".into());
        }
        if !self.queries.is_empty() && (self.footer.best_value != best || self.footer.best_index != best_index) {
            return bad("footer best does not match the queries".into());
        }
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
