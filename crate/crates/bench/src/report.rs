//! Run reports, rebuilt from telemetry records alone.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use sage_core::telemetry::{parse_tsv, AddbRecord, Subsystem};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTotals {
    pub records: u64,
    pub sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierBytes {
    pub read: u64,
    pub written: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub records: u64,
    pub end_time: f64,
    /// subsystem -> metric -> totals
    pub metrics: BTreeMap<String, BTreeMap<String, MetricTotals>>,
    pub messages: u64,
    pub message_bytes: u64,
    pub dropped_messages: u64,
    pub tier_bytes: BTreeMap<u8, TierBytes>,
    /// workload -> result name -> value
    pub results: BTreeMap<String, BTreeMap<String, f64>>,
    /// At least one verdict was reported and none failed.
    pub verified: bool,
}

impl RunReport {
    pub fn result(&self, workload: &str, name: &str) -> Option<f64> {
        self.results.get(workload)?.get(name).copied()
    }
}

pub fn build_report(records: &[AddbRecord]) -> RunReport {
    let mut r = RunReport {
        verified: true,
        ..RunReport::default()
    };
    let mut devices: BTreeMap<String, (u8, TierBytes)> = BTreeMap::new();
    let mut verdicts = 0;
    for rec in records {
        r.records += 1;
        r.end_time = r.end_time.max(rec.t);
        let m = r
            .metrics
            .entry(rec.subsystem.to_string())
            .or_default()
            .entry(rec.metric.clone())
            .or_default();
        m.records += 1;
        m.sum += rec.value;
        match (rec.subsystem, rec.metric.as_str()) {
            (Subsystem::Net, "msg") => {
                r.messages += 1;
                r.message_bytes += rec.value as u64;
                if rec.tag("ok") == Some("false") {
                    r.dropped_messages += 1;
                }
            }
            (Subsystem::Object, "device_io") => {
                let num = |k: &str| rec.tag(k).and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
                let tier = num("tier") as u8;
                let bytes = TierBytes {
                    read: num("read"),
                    written: num("written"),
                };
                devices.insert(rec.tag("device").unwrap_or("?").to_string(), (tier, bytes));
            }
            (_, "result") => {
                let (Some(workload), Some(name)) = (rec.tag("workload"), rec.tag("name")) else {
                    continue;
                };
                if name.ends_with("verified") {
                    verdicts += 1;
                    r.verified &= rec.value == 1.0;
                }
                r.results
                    .entry(workload.to_string())
                    .or_default()
                    .insert(name.to_string(), rec.value);
            }
            _ => {}
        }
    }
    for (tier, bytes) in devices.into_values() {
        let t = r.tier_bytes.entry(tier).or_default();
        t.read += bytes.read;
        t.written += bytes.written;
    }
    r.verified &= verdicts > 0;
    r
}

/// Parses an `addb.tsv` export and builds its report.
pub fn report_from_tsv(text: &str) -> Result<RunReport> {
    Ok(build_report(&parse_tsv(text)?))
}

pub fn render(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "records            {}", r.records);
    let _ = writeln!(out, "virtual time (s)   {:.6}", r.end_time);
    let _ = writeln!(
        out,
        "messages           {} ({} bytes, {} dropped)",
        r.messages, r.message_bytes, r.dropped_messages
    );
    let _ = writeln!(
        out,
        "verified           {}",
        if r.verified { "yes" } else { "NO" }
    );
    let _ = writeln!(
        out,
        "\n{:<6} {:>16} {:>16}",
        "tier", "read bytes", "written bytes"
    );
    for (tier, b) in &r.tier_bytes {
        let _ = writeln!(out, "{:<6} {:>16} {:>16}", tier, b.read, b.written);
    }
    let _ = writeln!(
        out,
        "\n{:<10} {:<24} {:>10} {:>18}",
        "subsystem", "metric", "records", "sum"
    );
    for (sub, metrics) in &r.metrics {
        for (metric, m) in metrics {
            let _ = writeln!(
                out,
                "{:<10} {:<24} {:>10} {:>18.6}",
                sub, metric, m.records, m.sum
            );
        }
    }
    for (workload, results) in &r.results {
        let _ = writeln!(out, "\n[{workload}]");
        for (name, v) in results {
            let _ = writeln!(out, "  {:<40} {:>20.9}", name, v);
        }
    }
    out
}
