//! ADDB-style telemetry records and FDMI-style plugin dispatch.
//!
//! Records live in memory during a run and are exported as `addb.tsv`, one
//! record per line: `t, node, subsystem, metric, value, tags` separated by
//! tabs, with tags written as `k=v` pairs joined by `,` (or `-` when empty).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::checksum::Fnv1a64;
use crate::error::{Error, Result};
use crate::model::NodeId;

/// Shared virtual clock in seconds. Never moves backwards.
#[derive(Debug, Clone, Default)]
pub struct Clock(Arc<Mutex<f64>>);

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        *self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn advance(&self, dt: f64) -> f64 {
        let mut t = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if dt > 0.0 {
            *t += dt;
        }
        *t
    }

    pub fn advance_to(&self, to: f64) -> f64 {
        let mut t = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if to > *t {
            *t = to;
        }
        *t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subsystem {
    Object,
    Index,
    Txn,
    Hsm,
    Ship,
    Ha,
    Window,
    Stream,
    Net,
}

impl Subsystem {
    pub const ALL: [Subsystem; 9] = [
        Subsystem::Object,
        Subsystem::Index,
        Subsystem::Txn,
        Subsystem::Hsm,
        Subsystem::Ship,
        Subsystem::Ha,
        Subsystem::Window,
        Subsystem::Stream,
        Subsystem::Net,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subsystem::Object => "object",
            Subsystem::Index => "index",
            Subsystem::Txn => "txn",
            Subsystem::Hsm => "hsm",
            Subsystem::Ship => "ship",
            Subsystem::Ha => "ha",
            Subsystem::Window => "window",
            Subsystem::Stream => "stream",
            Subsystem::Net => "net",
        }
    }
}

impl fmt::Display for Subsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subsystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subsystem::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::CorruptExport(format!("unknown subsystem {s:?}")))
    }
}

pub type Tags = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddbRecord {
    pub t: f64,
    pub node: NodeId,
    pub seq: u64,
    pub subsystem: Subsystem,
    pub metric: String,
    pub value: f64,
    pub tags: Tags,
}

impl AddbRecord {
    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn to_tsv_line(&self) -> String {
        let tags = if self.tags.is_empty() {
            "-".to_string()
        } else {
            self.tags
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.t, self.node.0, self.subsystem, self.metric, self.value, tags
        )
    }
}

/// Builds a tag map from pairs.
pub fn tags<K: ToString, V: ToString>(pairs: impl IntoIterator<Item = (K, V)>) -> Tags {
    pairs
        .into_iter()
        .map(|(k, v)| (sanitize(&k.to_string()), sanitize(&v.to_string())))
        .collect()
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '\t' | '\n' | '\r' | ',' | '=' => '_',
            c => c,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub subsystem: Option<Subsystem>,
    pub metric: Option<String>,
    pub node: Option<NodeId>,
}

impl RecordFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn subsystem(subsystem: Subsystem) -> Self {
        Self {
            subsystem: Some(subsystem),
            ..Self::default()
        }
    }

    pub fn metric(subsystem: Subsystem, metric: impl Into<String>) -> Self {
        Self {
            subsystem: Some(subsystem),
            metric: Some(metric.into()),
            node: None,
        }
    }

    pub fn matches(&self, r: &AddbRecord) -> bool {
        self.subsystem.is_none_or(|s| s == r.subsystem)
            && self.metric.as_ref().is_none_or(|m| *m == r.metric)
            && self.node.is_none_or(|n| n == r.node)
    }
}

pub type FdmiCallback = Box<dyn FnMut(&AddbRecord) + Send>;

struct Subscription {
    plugin: String,
    filter: RecordFilter,
    callback: FdmiCallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubscriptionId(u64);

/// Append-only record store with plugin dispatch.
///
/// Callbacks run synchronously after the record is appended and must not
/// emit records themselves.
#[derive(Default)]
pub struct Addb {
    records: Mutex<Vec<AddbRecord>>,
    subscriptions: Mutex<BTreeMap<SubscriptionId, Subscription>>,
    next_seq: AtomicU64,
    next_sub: AtomicU64,
}

impl fmt::Debug for Addb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Addb")
            .field("records", &self.len())
            .finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Addb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(
        &self,
        t: f64,
        node: NodeId,
        subsystem: Subsystem,
        metric: &str,
        value: f64,
        tags: Tags,
    ) -> u64 {
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let record = AddbRecord {
            t,
            node,
            seq,
            subsystem,
            metric: sanitize(metric),
            value,
            tags,
        };
        let mut subs = lock(&self.subscriptions);
        lock(&self.records).push(record.clone());
        for sub in subs.values_mut() {
            if sub.filter.matches(&record) {
                (sub.callback)(&record);
            }
        }
        seq
    }

    /// Matching records with `t0 <= t < t1`, in emission order.
    pub fn query(&self, filter: &RecordFilter, t0: f64, t1: f64) -> Vec<AddbRecord> {
        lock(&self.records)
            .iter()
            .filter(|r| r.t >= t0 && r.t < t1 && filter.matches(r))
            .cloned()
            .collect()
    }

    pub fn records(&self) -> Vec<AddbRecord> {
        lock(&self.records).clone()
    }

    pub fn len(&self) -> usize {
        lock(&self.records).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fdmi_register(
        &self,
        plugin: &str,
        filter: RecordFilter,
        callback: FdmiCallback,
    ) -> Result<SubscriptionId> {
        let mut subs = lock(&self.subscriptions);
        if subs.values().any(|s| s.plugin == plugin) {
            return Err(Error::DuplicatePlugin(plugin.to_string()));
        }
        let id = SubscriptionId(self.next_sub.fetch_add(1, Ordering::SeqCst));
        subs.insert(
            id,
            Subscription {
                plugin: plugin.to_string(),
                filter,
                callback,
            },
        );
        Ok(id)
    }

    pub fn fdmi_deregister(&self, id: SubscriptionId) -> bool {
        lock(&self.subscriptions).remove(&id).is_some()
    }

    pub fn export_tsv(&self) -> String {
        let records = lock(&self.records);
        let mut out = String::new();
        for r in records.iter() {
            out.push_str(&r.to_tsv_line());
            out.push('\n');
        }
        out
    }

    pub fn export_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.export_tsv().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn trace_hash(&self) -> u64 {
        let mut h = Fnv1a64::default();
        h.update(self.export_tsv().as_bytes());
        h.finish()
    }
}

/// Parses an `addb.tsv` export. Sequence numbers follow line order.
pub fn parse_tsv(text: &str) -> Result<Vec<AddbRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::CorruptExport(format!("line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let t: f64 = fields[0].parse().map_err(|_| bad("bad time"))?;
        let node: u32 = fields[1].parse().map_err(|_| bad("bad node"))?;
        let subsystem: Subsystem = fields[2].parse()?;
        let value: f64 = fields[4].parse().map_err(|_| bad("bad value"))?;
        let mut tags = Tags::new();
        if fields[5] != "-" {
            for pair in fields[5].split(',') {
                let (k, v) = pair.split_once('=').ok_or_else(|| bad("bad tag"))?;
                tags.insert(k.to_string(), v.to_string());
            }
        }
        out.push(AddbRecord {
            t,
            node: NodeId(node),
            seq: out.len() as u64,
            subsystem,
            metric: fields[3].to_string(),
            value,
            tags,
        });
    }
    Ok(out)
}
