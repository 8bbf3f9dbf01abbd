//! Comparison tables over a directory of run records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bo::{compare, Quartiles, Summary};
use crate::error::{Error, Result};
use crate::record::RunRecord;

pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const REPORT_HEADER: &str = "method,index,median,q1,q3";

/// Loads every `*.jsonl` file in `dir`, sorted by file name. Unfinished
/// `.partial` files are ignored.
pub fn load_records(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl") && p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p)?;
            let rec = RunRecord::from_jsonl(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
            Ok((p, rec))
        })
        .collect()
}

/// Long-format best-so-far curves: one row per method and query index.
pub fn report_csv(summary: &Summary) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for m in &summary.methods {
        for (i, q) in m.curve.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{:.16e},{:.16e},{:.16e}", m.method, q.median, q.q1, q.q3);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub index: usize,
    pub quartiles: Quartiles,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse(format!("report must start with {REPORT_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Parse(format!("report line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [method, index, median, q1, q3] = f[..] else {
                return Err(bad());
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ReportRow {
                method: method.to_string(),
                index: index.parse().map_err(|_| bad())?,
                quartiles: Quartiles {
                    q1: num(q1)?,
                    median: num(median)?,
                    q3: num(q3)?,
                },
            })
        })
        .collect()
}

pub fn summary_text(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem: {}", summary.problem);
    let _ = writeln!(s, "budget: {}", summary.budget);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>24} {:>24} {:>24}",
        "method", "runs", "final median", "final q1", "final q3"
    );
    for m in &summary.methods {
        let flag = if m.method == summary.best_method { "  *best" } else { "" };
        let q = &m.final_best;
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>24.16e} {:>24.16e} {:>24.16e}{flag}",
            m.method, m.runs, q.median, q.q1, q.q3
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "best method by median final value: {}", summary.best_method);
    s
}

/// Writes `report.csv` and `summary.txt` into `dir` and returns the summary.
pub fn write_report(dir: &Path) -> Result<Summary> {
    let records: Vec<RunRecord> = load_records(dir)?.into_iter().map(|(_, r)| r).collect();
    let summary = compare(&records)?;
    let mut hashes: Vec<&str> = records.iter().map(|r| r.header.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.header.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut text = summary_text(&summary);
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(text, "config hash: {}", hashes.join(" "));
    let _ = writeln!(text, "seeds: {}", seeds.join(","));
    fs::write(dir.join(REPORT_CSV), report_csv(&summary))?;
    fs::write(dir.join(SUMMARY_TXT), text)?;
    Ok(summary)
}
