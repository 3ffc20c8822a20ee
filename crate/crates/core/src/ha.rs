//! Failure-event history, repair decisions and parity rebuild.
//!
//! A device is declared failed when it reports a crash or offline event, or
//! when `k` io-error/timeout events for it fall inside the last `window`
//! virtual seconds. A declared device is rebuilt onto a same-tier spare if
//! one is left, otherwise each affected object is re-replicated onto some
//! other device of the tier. Events sourced from nodes or services are kept
//! in the history but never declare a device.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Cluster;
use crate::model::{DeviceId, Layout, NodeId, ObjectId, TierId, UnitKey};
use crate::object::{xor_into, ObjectMeta};
use crate::store::Store;
use crate::telemetry::{tags, Subsystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventSource {
    Device(DeviceId),
    Node(NodeId),
    Service(u32),
}

impl std::fmt::Display for EventSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventSource::Device(d) => write!(f, "{d}"),
            EventSource::Node(n) => write!(f, "{n}"),
            EventSource::Service(s) => write!(f, "s{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    IoError,
    Timeout,
    Crash,
    Offline,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::IoError => "io_error",
            EventKind::Timeout => "timeout",
            EventKind::Crash => "crash",
            EventKind::Offline => "offline",
        }
    }

    fn is_transient(&self) -> bool {
        matches!(self, EventKind::IoError | EventKind::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub t: f64,
    pub source: EventSource,
    pub seq: u64,
    pub kind: EventKind,
}

impl FailureEvent {
    fn identity(&self) -> (u64, EventSource, u64) {
        (self.t.to_bits(), self.source, self.seq)
    }

    fn order(&self, other: &Self) -> std::cmp::Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.source.cmp(&other.source))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Events of the last `window` virtual seconds, ordered by `(t, source, seq)`.
#[derive(Debug, Clone, Default)]
pub struct EventHistory {
    window: f64,
    latest: f64,
    events: Vec<FailureEvent>,
}

impl EventHistory {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            latest: f64::NEG_INFINITY,
            events: Vec::new(),
        }
    }

    /// Appends `event` and prunes. Returns false for a duplicate.
    pub fn ingest(&mut self, event: FailureEvent) -> bool {
        if self.events.iter().any(|e| e.identity() == event.identity()) {
            return false;
        }
        let at = self
            .events
            .partition_point(|e| e.order(&event) == std::cmp::Ordering::Less);
        self.events.insert(at, event);
        self.latest = self.latest.max(event.t);
        self.prune(self.latest);
        true
    }

    /// Drops events older than `now - window`.
    pub fn prune(&mut self, now: f64) {
        let horizon = now - self.window;
        self.events.retain(|e| e.t >= horizon);
    }

    pub fn latest(&self) -> f64 {
        self.latest
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn events(&self) -> &[FailureEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaConfig {
    pub k: usize,
    pub window: f64,
    pub auto_repair: bool,
}

impl Default for HaConfig {
    fn default() -> Self {
        Self {
            k: 3,
            window: 60.0,
            auto_repair: true,
        }
    }
}

impl HaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.window > 0.0) {
            return Err(Error::BadConfig("ha: k and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairProcedure {
    RebuildDevice { target: DeviceId, spare: DeviceId },
    ReReplicate { device: DeviceId },
    MarkPermanentLoss { objects: Vec<ObjectId> },
}

impl RepairProcedure {
    pub fn device(&self) -> Option<DeviceId> {
        match self {
            RepairProcedure::RebuildDevice { target, .. } => Some(*target),
            RepairProcedure::ReReplicate { device } => Some(*device),
            RepairProcedure::MarkPermanentLoss { .. } => None,
        }
    }
}

/// What the decision rule needs to know about the cluster.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub device_tier: BTreeMap<DeviceId, TierId>,
    pub spares: BTreeSet<DeviceId>,
    /// Devices that already have a procedure.
    pub declared: BTreeSet<DeviceId>,
}

/// Devices the history says are failed, as of the latest event.
pub fn failed_devices(history: &EventHistory, config: &HaConfig) -> BTreeSet<DeviceId> {
    let horizon = history.latest() - config.window;
    let mut transient: BTreeMap<DeviceId, usize> = BTreeMap::new();
    let mut out = BTreeSet::new();
    for e in history.events().iter().filter(|e| e.t >= horizon) {
        let EventSource::Device(d) = e.source else {
            continue;
        };
        if e.kind.is_transient() {
            let n = transient.entry(d).or_default();
            *n += 1;
            if *n >= config.k {
                out.insert(d);
            }
        } else {
            out.insert(d);
        }
    }
    out
}

/// Procedures for newly failed devices, in device order. Pure. An empty
/// result means nothing to do.
pub fn decide(
    history: &EventHistory,
    config: &HaConfig,
    topology: &Topology,
) -> Vec<RepairProcedure> {
    let mut spares = topology.spares.clone();
    let mut out = Vec::new();
    for d in failed_devices(history, config) {
        if topology.declared.contains(&d) {
            continue;
        }
        let tier = topology.device_tier.get(&d);
        let spare = spares
            .iter()
            .copied()
            .find(|s| tier.is_some() && topology.device_tier.get(s) == tier);
        match spare {
            Some(spare) => {
                spares.remove(&spare);
                out.push(RepairProcedure::RebuildDevice { target: d, spare });
            }
            None => out.push(RepairProcedure::ReReplicate { device: d }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebuildReport {
    pub objects: u64,
    pub units: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairRecord {
    pub t: f64,
    pub procedure: RepairProcedure,
    pub outcome: std::result::Result<RebuildReport, String>,
}

/// Decision-loop state owned by the cluster.
#[derive(Debug, Clone)]
pub struct HaState {
    config: HaConfig,
    history: EventHistory,
    declared: BTreeSet<DeviceId>,
    next_seq: u64,
    repairs: Vec<RepairRecord>,
    busy: bool,
}

impl HaState {
    pub fn new(config: HaConfig) -> Self {
        Self {
            history: EventHistory::new(config.window),
            config,
            declared: BTreeSet::new(),
            next_seq: 0,
            repairs: Vec::new(),
            busy: false,
        }
    }

    pub fn config(&self) -> &HaConfig {
        &self.config
    }

    pub fn history(&self) -> &EventHistory {
        &self.history
    }

    pub fn declared(&self) -> &BTreeSet<DeviceId> {
        &self.declared
    }

    pub fn repairs(&self) -> &[RepairRecord] {
        &self.repairs
    }
}

impl Cluster {
    pub(crate) fn report_event(&mut self, source: EventSource, kind: EventKind) {
        let event = FailureEvent {
            t: self.now(),
            source,
            seq: self.ha.next_seq,
            kind,
        };
        self.ha.next_seq += 1;
        self.ingest_event(event);
    }

    /// Adds an externally observed event (an io error seen by a client,
    /// say) and runs the decision loop if automatic repair is on.
    pub fn ingest_event(&mut self, event: FailureEvent) {
        self.ha.next_seq = self.ha.next_seq.max(event.seq + 1);
        if !self.ha.history.ingest(event) {
            return;
        }
        self.addb.emit(
            event.t,
            self.meta_node(),
            Subsystem::Ha,
            "event",
            1.0,
            tags([
                ("source", event.source.to_string()),
                ("kind", event.kind.as_str().to_string()),
            ]),
        );
        if self.ha.config.auto_repair {
            self.ha_step();
        }
    }

    pub fn ha_topology(&self) -> Topology {
        Topology {
            device_tier: self.devices.iter().map(|d| (d.id(), d.tier())).collect(),
            spares: self.spares.clone(),
            declared: self.ha.declared.clone(),
        }
    }

    /// Decides and executes until no new procedure comes up. Does nothing
    /// while the store is down or a repair is already running.
    pub fn ha_step(&mut self) -> Vec<RepairRecord> {
        if self.ha.busy || self.store.is_none() {
            return Vec::new();
        }
        self.ha.busy = true;
        let mut done = Vec::new();
        loop {
            let procedures = decide(&self.ha.history, &self.ha.config, &self.ha_topology());
            if procedures.is_empty() {
                break;
            }
            for p in procedures {
                if let Some(d) = p.device() {
                    self.ha.declared.insert(d);
                }
                let start = self.repairs_len();
                let _ = self.execute_repair(p);
                done.extend(self.ha.repairs[start..].iter().cloned());
            }
        }
        self.ha.busy = false;
        done
    }

    fn repairs_len(&self) -> usize {
        self.ha.repairs.len()
    }

    fn record_repair(
        &mut self,
        procedure: RepairProcedure,
        outcome: std::result::Result<RebuildReport, String>,
    ) {
        let name = match &procedure {
            RepairProcedure::RebuildDevice { .. } => "rebuild_device",
            RepairProcedure::ReReplicate { .. } => "re_replicate",
            RepairProcedure::MarkPermanentLoss { .. } => "permanent_loss",
        };
        let value = match (&procedure, &outcome) {
            (RepairProcedure::MarkPermanentLoss { objects }, _) => objects.len() as f64,
            (_, Ok(r)) => r.bytes as f64,
            (_, Err(_)) => -1.0,
        };
        let mut t = tags([("ok", outcome.is_ok().to_string())]);
        if let Some(d) = procedure.device() {
            t.insert("device".into(), d.to_string());
        }
        self.addb
            .emit(self.now(), self.meta_node(), Subsystem::Ha, name, value, t);
        self.ha.repairs.push(RepairRecord {
            t: self.now(),
            procedure,
            outcome,
        });
    }

    /// Runs one procedure. A rebuild that cannot reconstruct some objects
    /// still repairs the rest, then records a permanent loss for those.
    pub fn execute_repair(&mut self, procedure: RepairProcedure) -> Result<RebuildReport> {
        let meta = self.meta_node();
        let result = match &procedure {
            RepairProcedure::RebuildDevice { target, spare } => {
                let (target, spare) = (*target, *spare);
                if self.spares.remove(&spare) {
                    let spares = self.spares.clone();
                    self.store_mut()?.set_reserved(spares);
                }
                self.with_store(meta, |s| s.rebuild_device(target, Some(spare)))
            }
            RepairProcedure::ReReplicate { device } => {
                let device = *device;
                self.with_store(meta, |s| s.rebuild_device(device, None))
            }
            RepairProcedure::MarkPermanentLoss { .. } => {
                self.record_repair(procedure, Ok(RebuildReport::default()));
                return Ok(RebuildReport::default());
            }
        };
        self.record_repair(
            procedure,
            result.as_ref().map(|r| *r).map_err(|e| e.to_string()),
        );
        if let Err(Error::UnrecoverableLoss { objects }) = &result {
            self.record_repair(
                RepairProcedure::MarkPermanentLoss {
                    objects: objects.clone(),
                },
                Ok(RebuildReport::default()),
            );
        }
        result
    }
}

impl Store {
    /// Reconstructs every unit held by `failed` onto `spare`, or, without a
    /// spare, onto the emptiest placeable device of the same tier that the
    /// object does not use yet. Each object is repointed in its own
    /// transaction.
    pub fn rebuild_device(
        &mut self,
        failed: DeviceId,
        spare: Option<DeviceId>,
    ) -> Result<RebuildReport> {
        self.ensure_alive()?;
        let tier = self.devices.get(failed)?.tier();
        if let Some(s) = spare {
            if self.devices.get(s)?.tier() != tier {
                return Err(Error::InvalidLayout(format!(
                    "spare {s} is not in tier {}",
                    tier.0
                )));
            }
        }
        let affected: Vec<ObjectId> = self
            .catalog
            .objects
            .values()
            .filter(|m| m.layout.devices().contains(&failed))
            .map(|m| m.id)
            .collect();
        let mut report = RebuildReport::default();
        let mut lost = Vec::new();
        for id in affected {
            let used = self.obj_meta(id)?.layout.devices();
            let target = match spare {
                Some(s) if !used.contains(&s) => Some(s),
                Some(_) => None,
                None => self
                    .devices
                    .in_tier(tier)
                    .map(|d| d.id())
                    .filter(|d| !used.contains(d) && self.device_placeable(*d))
                    .max_by_key(|d| (self.device_free_blocks(*d), std::cmp::Reverse(*d))),
            };
            let Some(target) = target else {
                lost.push(id);
                continue;
            };
            match self.rebuild_object(id, failed, target) {
                Ok((units, bytes)) => {
                    report.objects += 1;
                    report.units += units;
                    report.bytes += bytes;
                }
                Err(Error::UnrecoverableLoss { .. }) | Err(Error::OutOfCapacity { .. }) => {
                    lost.push(id)
                }
                Err(e) => return Err(e),
            }
        }
        if lost.is_empty() {
            Ok(report)
        } else {
            Err(Error::UnrecoverableLoss { objects: lost })
        }
    }

    /// Moves one object's units from `from` to `to`, reconstructing them.
    /// Returns `(units, bytes)` rebuilt.
    pub fn rebuild_object(
        &mut self,
        id: ObjectId,
        from: DeviceId,
        to: DeviceId,
    ) -> Result<(u64, u64)> {
        let old = self.obj_meta(id)?.clone();
        let mut new = old.clone();
        new.layout.replace_device(from, to);
        new.layout.validate()?;
        let lost: Vec<UnitKey> = old
            .units
            .keys()
            .filter(|k| k.device == from)
            .copied()
            .collect();
        let bs = old.spec.block_size();
        let mut added = Vec::new();
        for key in &lost {
            let data = match self.reconstruct_unit(&old, *key) {
                Ok(d) => d,
                Err(e) => {
                    self.discard_units(&old.spec, &added);
                    return Err(e);
                }
            };
            new.units.remove(key);
            let nk = UnitKey { device: to, ..*key };
            if let Err(e) = self.write_unit(&mut new, nk, &data) {
                self.discard_units(&old.spec, &added);
                return Err(e);
            }
            added.push((nk, new.units[&nk]));
        }
        self.install_meta(&old, new)?;
        Ok((lost.len() as u64, lost.len() as u64 * bs))
    }

    fn reconstruct_unit(&mut self, meta: &ObjectMeta, key: UnitKey) -> Result<Vec<u8>> {
        let loss = || Error::UnrecoverableLoss {
            objects: vec![meta.id],
        };
        if let Some(group) = meta.layout.group_of_unit(key) {
            if group.parity == Some(key) {
                let mut acc = vec![0u8; meta.spec.block_size() as usize];
                for pos in 0..group.data.len() {
                    let unit = self.read_group_unit(meta, &group, pos)?;
                    xor_into(&mut acc, &unit);
                }
                return Ok(acc);
            }
            let pos = group.data.iter().position(|u| *u == key).ok_or_else(loss)?;
            return self.read_group_unit(meta, &group, pos);
        }
        let (_, flat) = meta.layout.resolve(key.segment)?;
        let Layout::Mirrored { devices, .. } = flat else {
            return Err(loss());
        };
        for &d in devices.iter().filter(|d| **d != key.device) {
            if self.device_available(d) {
                return self.read_unit(meta, UnitKey { device: d, ..key });
            }
        }
        Err(loss())
    }
}
