//! Deterministic simulated cluster: nodes and ranks, a costed message
//! transport, one virtual clock and scheduled faults.
//!
//! Everything runs on the caller's thread. Ranks are plain numbers mapped
//! onto nodes; an operation issued "by" a node is charged the device time
//! of the devices it touches plus the network time of every byte that
//! leaves or enters that node.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::CrashInjector;
use crate::ha::{EventKind, EventSource, HaConfig, HaState};
use crate::hsm::{Hsm, HsmPolicy, MigrationAction};
use crate::model::{validate_block_size, DeviceId, NodeId, TierId};
use crate::ship::FunctionRegistry;
use crate::store::{IoTrace, Store, StoreConfig};
use crate::stream::StreamTable;
use crate::telemetry::{tags, Addb, Clock, Subsystem};
use crate::tier::{DeviceProfile, DeviceSet};
use crate::window::WindowTable;

/// Accounting overhead added to every message.
pub const ENVELOPE_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Storage,
    Compute,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub tier: TierId,
    #[serde(default)]
    pub spare: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub roles: Vec<Role>,
    #[serde(default = "one")]
    pub ranks: u32,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
}

fn one() -> u32 {
    1
}

impl NodeSpec {
    pub fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkProfile {
    /// virtual seconds per message
    pub latency: f64,
    /// bytes per virtual second
    pub bandwidth: f64,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self {
            latency: 10e-6,
            bandwidth: 1e9,
        }
    }
}

impl NetworkProfile {
    pub fn cost(&self, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierProfile {
    pub tier: TierId,
    #[serde(flatten)]
    pub profile: DeviceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreSection {
    pub log_cap_bytes: u64,
    pub meta_node: NodeId,
    pub fsync: bool,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            log_cap_bytes: 64 << 20,
            meta_node: NodeId(0),
            fsync: false,
        }
    }
}

/// Cost of rank-local memory, used by memory-backed windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryProfile {
    pub latency: f64,
    pub bandwidth: f64,
}

impl Default for MemoryProfile {
    fn default() -> Self {
        Self {
            latency: 100e-9,
            bandwidth: 20e9,
        }
    }
}

impl MemoryProfile {
    pub fn cost(&self, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

/// Speed at which a node runs shipped functions over local data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeProfile {
    pub bytes_per_second: f64,
}

impl Default for ComputeProfile {
    fn default() -> Self {
        Self {
            bytes_per_second: 4e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultAction {
    Crash {
        node: NodeId,
        t: f64,
    },
    Restart {
        node: NodeId,
        t: f64,
    },
    FailDevice {
        device: DeviceId,
        t: f64,
    },
    /// Cuts `nodes` off from everyone else during `[t0, t1)`.
    Partition {
        nodes: Vec<NodeId>,
        t0: f64,
        t1: f64,
    },
}

impl FaultAction {
    pub fn time(&self) -> f64 {
        match self {
            FaultAction::Crash { t, .. }
            | FaultAction::Restart { t, .. }
            | FaultAction::FailDevice { t, .. } => *t,
            FaultAction::Partition { t0, .. } => *t0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default)]
    pub seed: u64,
    /// Device block size in bytes.
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    #[serde(default)]
    pub network: NetworkProfile,
    #[serde(default = "default_nodes")]
    pub nodes: Vec<NodeSpec>,
    /// Overrides of the built-in per-tier device profiles.
    #[serde(default)]
    pub profiles: Vec<TierProfile>,
    #[serde(default)]
    pub store: StoreSection,
    #[serde(default)]
    pub hsm: HsmPolicy,
    #[serde(default)]
    pub ha: HaConfig,
    #[serde(default)]
    pub memory: MemoryProfile,
    #[serde(default)]
    pub compute: ComputeProfile,
    #[serde(default)]
    pub faults: Vec<FaultAction>,
}

fn default_block_size() -> u64 {
    4096
}

impl Default for ClusterConfig {
    /// Four storage nodes with devices in every tier (one tier-2 spare) and
    /// one compute/consumer node with 16 ranks.
    fn default() -> Self {
        let mut nodes = Vec::new();
        for i in 0..4u32 {
            let dev = |k: u32, tier: u8| DeviceSpec {
                id: DeviceId(10 * i + k),
                tier: TierId(tier),
                spare: false,
                capacity_bytes: None,
            };
            let mut devices = vec![dev(1, 1), dev(2, 2), dev(3, 2), dev(4, 3), dev(5, 4)];
            if i == 3 {
                devices.push(DeviceSpec {
                    spare: true,
                    ..dev(6, 2)
                });
            }
            nodes.push(NodeSpec {
                id: NodeId(i),
                roles: vec![Role::Storage, Role::Compute],
                ranks: 4,
                devices,
            });
        }
        nodes.push(NodeSpec {
            id: NodeId(4),
            roles: vec![Role::Compute, Role::Consumer],
            ranks: 16,
            devices: Vec::new(),
        });
        Self {
            seed: 0,
            block_size: default_block_size(),
            network: NetworkProfile::default(),
            nodes,
            profiles: Vec::new(),
            store: StoreSection::default(),
            hsm: HsmPolicy::default(),
            ha: HaConfig::default(),
            memory: MemoryProfile::default(),
            compute: ComputeProfile::default(),
            faults: Vec::new(),
        }
    }
}

fn default_nodes() -> Vec<NodeSpec> {
    ClusterConfig::default().nodes
}

impl ClusterConfig {
    /// One node holding `devices_per_tier` devices in each listed tier.
    pub fn single_node(tiers: &[u8], devices_per_tier: u32) -> Self {
        let mut devices = Vec::new();
        for &t in tiers {
            for k in 0..devices_per_tier {
                devices.push(DeviceSpec {
                    id: DeviceId(t as u32 * 100 + k),
                    tier: TierId(t),
                    spare: false,
                    capacity_bytes: None,
                });
            }
        }
        Self {
            nodes: vec![NodeSpec {
                id: NodeId(0),
                roles: vec![Role::Storage, Role::Compute, Role::Consumer],
                ranks: 16,
                devices,
            }],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::BadConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn profile_for(&self, tier: TierId) -> DeviceProfile {
        self.profiles
            .iter()
            .rev()
            .find(|p| p.tier == tier)
            .map(|p| p.profile)
            .unwrap_or_else(|| DeviceProfile::default_for(tier))
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn total_ranks(&self) -> u32 {
        self.nodes.iter().map(|n| n.ranks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        validate_block_size(self.block_size).map_err(|e| Error::BadConfig(e.to_string()))?;
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut node_ids = BTreeSet::new();
        let mut device_ids = BTreeSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id) {
                return bad(format!("duplicate node {}", n.id));
            }
            if n.has(Role::Storage) && n.devices.is_empty() {
                return bad(format!("storage node {} has no devices", n.id));
            }
            if !n.has(Role::Storage) && !n.devices.is_empty() {
                return bad(format!("node {} has devices but no storage role", n.id));
            }
            for d in &n.devices {
                if !device_ids.insert(d.id) {
                    return bad(format!("duplicate device {}", d.id));
                }
                TierId::new(d.tier.0).map_err(|e| Error::BadConfig(e.to_string()))?;
                if d.capacity_bytes == Some(0) {
                    return bad(format!("device {} has zero capacity", d.id));
                }
            }
        }
        if self.total_ranks() == 0 {
            return bad("no ranks".into());
        }
        match self.node(self.store.meta_node) {
            Some(n) if n.has(Role::Storage) => {}
            _ => {
                return bad(format!(
                    "meta node {} is not a storage node",
                    self.store.meta_node
                ))
            }
        }
        if !(self.network.latency >= 0.0 && self.network.bandwidth > 0.0) {
            return bad("network profile must be positive".into());
        }
        if !(self.memory.latency >= 0.0 && self.memory.bandwidth > 0.0) {
            return bad("memory profile must be positive".into());
        }
        if !(self.compute.bytes_per_second > 0.0) {
            return bad("compute speed must be positive".into());
        }
        for p in &self.profiles {
            TierId::new(p.tier.0).map_err(|e| Error::BadConfig(e.to_string()))?;
            p.profile.validate()?;
        }
        if self.store.log_cap_bytes == 0 {
            return bad("log cap must be positive".into());
        }
        self.hsm.validate()?;
        self.ha.validate()?;
        for f in &self.faults {
            let t = f.time();
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("fault time {t} out of range"));
            }
            match f {
                FaultAction::Crash { node, .. } | FaultAction::Restart { node, .. } => {
                    if !node_ids.contains(node) {
                        return bad(format!("fault names unknown node {node}"));
                    }
                }
                FaultAction::FailDevice { device, .. } => {
                    if !device_ids.contains(device) {
                        return bad(format!("fault names unknown device {device}"));
                    }
                }
                FaultAction::Partition { nodes, t0, t1 } => {
                    if !(t1 > t0 && t1.is_finite()) {
                        return bad("partition must end after it starts".into());
                    }
                    if let Some(n) = nodes.iter().find(|n| !node_ids.contains(n)) {
                        return bad(format!("partition names unknown node {n}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub t: f64,
    pub from: NodeId,
    pub to: NodeId,
    pub verb: String,
    /// Payload plus envelope.
    pub bytes: u64,
    pub delivered: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetCounters {
    pub messages: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub bytes_dropped: u64,
}

/// Message log and byte counters. Loopback messages are logged but cost
/// nothing.
#[derive(Debug, Clone, Default)]
pub struct Network {
    profile: NetworkProfile,
    log: Vec<Message>,
    counters: NetCounters,
}

impl Network {
    pub fn new(profile: NetworkProfile) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn profile(&self) -> &NetworkProfile {
        &self.profile
    }

    pub fn log(&self) -> &[Message] {
        &self.log
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    /// Records one message and returns its transfer time.
    fn record(
        &mut self,
        t: f64,
        from: NodeId,
        to: NodeId,
        verb: &str,
        payload: u64,
        delivered: bool,
    ) -> (f64, Message) {
        let bytes = payload + ENVELOPE_BYTES;
        let msg = Message {
            seq: self.log.len() as u64,
            t,
            from,
            to,
            verb: verb.to_string(),
            bytes,
            delivered,
        };
        self.log.push(msg.clone());
        self.counters.messages += 1;
        self.counters.bytes_sent += bytes;
        if delivered {
            self.counters.bytes_received += bytes;
        } else {
            self.counters.bytes_dropped += bytes;
        }
        let cost = if from == to || !delivered {
            0.0
        } else {
            self.profile.cost(bytes)
        };
        (cost, msg)
    }
}

#[derive(Debug, Clone)]
struct Partition {
    nodes: BTreeSet<NodeId>,
    t0: f64,
    t1: f64,
}

/// A running simulated cluster. Owns the only [`Store`], which lives on the
/// metadata node and disappears while that node is down.
pub struct Cluster {
    pub(crate) config: ClusterConfig,
    dir: PathBuf,
    pub(crate) clock: Clock,
    pub(crate) addb: Arc<Addb>,
    pub(crate) injector: Arc<CrashInjector>,
    pub(crate) devices: Arc<DeviceSet>,
    pub(crate) device_node: BTreeMap<DeviceId, NodeId>,
    pub(crate) spares: BTreeSet<DeviceId>,
    rank_nodes: Vec<NodeId>,
    down: BTreeSet<NodeId>,
    partitions: Vec<Partition>,
    pub(crate) store: Option<Store>,
    pub(crate) net: Network,
    pub(crate) rng: ChaCha8Rng,
    pending: Vec<FaultAction>,
    pub(crate) hsm: Hsm,
    pub(crate) ha: HaState,
    pub(crate) functions: FunctionRegistry,
    pub(crate) windows: WindowTable,
    pub(crate) streams: StreamTable,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("dir", &self.dir)
            .field("now", &self.clock.now())
            .field("down", &self.down)
            .finish()
    }
}

impl Cluster {
    /// Validates `config`, opens (or recovers) the devices and store under
    /// `dir`, and schedules the config's fault plan.
    pub fn spawn(config: ClusterConfig, dir: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let injector = Arc::new(CrashInjector::new());
        let mut specs = Vec::new();
        let mut device_node = BTreeMap::new();
        let mut spares = BTreeSet::new();
        for n in &config.nodes {
            for d in &n.devices {
                let mut profile = config.profile_for(d.tier);
                if let Some(c) = d.capacity_bytes {
                    profile.capacity_bytes = c;
                }
                specs.push((d.id, d.tier, profile));
                device_node.insert(d.id, n.id);
                if d.spare {
                    spares.insert(d.id);
                }
            }
        }
        let devices = Arc::new(DeviceSet::open_dir(
            &dir.join("devices"),
            config.block_size,
            &specs,
            injector.clone(),
        )?);
        let rank_nodes = config
            .nodes
            .iter()
            .flat_map(|n| std::iter::repeat_n(n.id, n.ranks as usize))
            .collect();
        let mut hsm = Hsm::new(config.hsm.clone())?;
        let addb = Arc::new(Addb::new());
        hsm.attach(&addb)?;
        let mut pending = config.faults.clone();
        pending.sort_by(|a, b| a.time().total_cmp(&b.time()));
        let mut cluster = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net: Network::new(config.network),
            ha: HaState::new(config.ha.clone()),
            dir,
            clock: Clock::new(),
            addb,
            injector,
            devices,
            device_node,
            spares,
            rank_nodes,
            down: BTreeSet::new(),
            partitions: Vec::new(),
            store: None,
            pending,
            hsm,
            functions: FunctionRegistry::new(),
            windows: WindowTable::default(),
            streams: StreamTable::default(),
            config,
        };
        cluster.open_store()?;
        Ok(cluster)
    }

    fn open_store(&mut self) -> Result<()> {
        let store_config = StoreConfig {
            device_block_size: self.config.block_size,
            log_cap_bytes: self.config.store.log_cap_bytes,
            log_profile: self.config.profile_for(TierId::FASTEST),
            fsync: self.config.store.fsync,
            node: self.config.store.meta_node,
        };
        let mut store = Store::open(
            self.dir.join("meta"),
            store_config,
            self.devices.clone(),
            self.injector.clone(),
            self.clock.clone(),
            self.addb.clone(),
        )?;
        store.set_reserved(self.spares.clone());
        self.store = Some(store);
        self.refresh_reachability();
        self.windows
            .reload(self.store.as_ref().expect("just opened"))?;
        Ok(())
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn addb(&self) -> &Arc<Addb> {
        &self.addb
    }

    pub fn injector(&self) -> &Arc<CrashInjector> {
        &self.injector
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn devices(&self) -> &Arc<DeviceSet> {
        &self.devices
    }

    pub fn hsm(&self) -> &Hsm {
        &self.hsm
    }

    pub fn ha(&self) -> &HaState {
        &self.ha
    }

    /// The cluster's seeded generator; all workload randomness should come
    /// from here.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn meta_node(&self) -> NodeId {
        self.config.store.meta_node
    }

    pub fn device_node(&self, device: DeviceId) -> Result<NodeId> {
        self.device_node
            .get(&device)
            .copied()
            .ok_or(Error::UnknownDevice(device))
    }

    pub fn spares(&self) -> &BTreeSet<DeviceId> {
        &self.spares
    }

    pub fn total_ranks(&self) -> u32 {
        self.rank_nodes.len() as u32
    }

    /// Node hosting `rank`. Ranks beyond the configured count wrap around.
    pub fn rank_node(&self, rank: u32) -> NodeId {
        self.rank_nodes[rank as usize % self.rank_nodes.len()]
    }

    pub fn nodes_with(&self, role: Role) -> Vec<NodeId> {
        self.config
            .nodes
            .iter()
            .filter(|n| n.has(role))
            .map(|n| n.id)
            .collect()
    }

    pub fn is_up(&self, node: NodeId) -> bool {
        !self.down.contains(&node)
    }

    pub fn store(&self) -> Result<&Store> {
        self.store.as_ref().ok_or(Error::NodeDown(self.meta_node()))
    }

    pub fn store_mut(&mut self) -> Result<&mut Store> {
        let meta = self.meta_node();
        self.store.as_mut().ok_or(Error::NodeDown(meta))
    }

    fn partitioned(&self, a: NodeId, b: NodeId, t: f64) -> bool {
        self.partitions
            .iter()
            .any(|p| t >= p.t0 && t < p.t1 && p.nodes.contains(&a) != p.nodes.contains(&b))
    }

    pub fn can_reach(&self, from: NodeId, to: NodeId) -> Result<()> {
        if !self.is_up(from) {
            return Err(Error::NodeDown(from));
        }
        if !self.is_up(to) {
            return Err(Error::NodeDown(to));
        }
        if self.partitioned(from, to, self.now()) {
            return Err(Error::Partitioned { from, to });
        }
        Ok(())
    }

    /// Sends one message without moving the clock; returns its transfer
    /// time. Failed sends are logged as dropped.
    pub fn send(&mut self, from: NodeId, to: NodeId, verb: &str, payload: u64) -> Result<f64> {
        let reach = self.can_reach(from, to);
        let t = self.now();
        let (cost, msg) = self.net.record(t, from, to, verb, payload, reach.is_ok());
        self.addb.emit(
            t,
            from,
            Subsystem::Net,
            "msg",
            msg.bytes as f64,
            tags([
                ("to", to.to_string()),
                ("verb", verb.to_string()),
                ("ok", reach.is_ok().to_string()),
            ]),
        );
        if let Err(Error::Partitioned { .. }) = reach {
            self.report_event(EventSource::Node(to), EventKind::Timeout);
        }
        reach.map(|_| cost)
    }

    /// Request and reply; the clock moves by both transfer times.
    pub fn rpc(
        &mut self,
        from: NodeId,
        to: NodeId,
        verb: &str,
        request: u64,
        reply: u64,
    ) -> Result<f64> {
        self.fire_due()?;
        let a = self.send(from, to, verb, request)?;
        let b = self.send(to, from, verb, reply)?;
        self.clock.advance(a + b);
        Ok(a + b)
    }

    /// Bulk data movement that is not subject to reachability checks: the
    /// devices involved were already filtered by the store.
    pub(crate) fn account(&mut self, from: NodeId, to: NodeId, verb: &str, payload: u64) -> f64 {
        let t = self.now();
        let (cost, msg) = self.net.record(t, from, to, verb, payload, true);
        self.addb.emit(
            t,
            from,
            Subsystem::Net,
            "msg",
            msg.bytes as f64,
            tags([
                ("to", to.to_string()),
                ("verb", verb.to_string()),
                ("ok", "true".to_string()),
            ]),
        );
        cost
    }

    /// Time for `client` to perform the device and log activity in `trace`.
    /// Devices work in parallel; remote devices add network transfers.
    pub(crate) fn charge(&mut self, client: NodeId, trace: &IoTrace) -> f64 {
        let mut slowest: f64 = 0.0;
        for (dev, time) in &trace.device_time {
            let node = self.device_node.get(dev).copied().unwrap_or(client);
            let mut t = *time;
            if node != client {
                let read = trace.bytes_read.get(dev).copied().unwrap_or(0);
                let written = trace.bytes_written.get(dev).copied().unwrap_or(0);
                if read > 0 {
                    t += self.account(node, client, "DATA", read);
                }
                if written > 0 {
                    t += self.account(client, node, "DATA", written);
                }
            }
            slowest = slowest.max(t);
        }
        slowest + trace.log_time
    }

    /// Runs `f` against the store on behalf of `client`, charging virtual
    /// time for the metadata round trip, device work and data transfers.
    pub fn with_store<T>(
        &mut self,
        client: NodeId,
        f: impl FnOnce(&mut Store) -> Result<T>,
    ) -> Result<T> {
        self.fire_due()?;
        let meta = self.meta_node();
        let request = self.send(client, meta, "STORE_OP", 0)?;
        self.refresh_reachability();
        let store = self.store.as_mut().ok_or(Error::NodeDown(meta))?;
        let before = store.trace().clone();
        let out = f(store);
        let trace = store.trace().since(&before);
        let reply = self.send(meta, client, "STORE_OP", 0).unwrap_or(0.0);
        let work = self.charge(client, &trace);
        self.clock.advance(request + work + reply);
        if matches!(out, Err(Error::Crashed)) {
            self.crash_node(meta);
        }
        out
    }

    pub(crate) fn refresh_reachability(&mut self) {
        let meta = self.meta_node();
        let now = self.now();
        let unreachable = self
            .device_node
            .iter()
            .filter(|(_, n)| self.down.contains(n) || self.partitioned(meta, **n, now))
            .map(|(d, _)| *d)
            .collect();
        if let Some(s) = self.store.as_mut() {
            s.set_unreachable(unreachable);
        }
    }

    /// Up to `count` placeable devices of `tier`, spread across nodes.
    pub fn pick_devices(&self, tier: TierId, count: usize) -> Result<Vec<DeviceId>> {
        let store = self.store()?;
        let mut per_node: BTreeMap<NodeId, Vec<DeviceId>> = BTreeMap::new();
        for d in self.devices.in_tier(tier) {
            if store.device_placeable(d.id()) {
                per_node
                    .entry(self.device_node[&d.id()])
                    .or_default()
                    .push(d.id());
            }
        }
        let mut out = Vec::new();
        let mut round = 0;
        while out.len() < count {
            let before = out.len();
            for devs in per_node.values() {
                if let Some(d) = devs.get(round) {
                    if out.len() < count {
                        out.push(*d);
                    }
                }
            }
            if out.len() == before {
                return Err(Error::InvalidLayout(format!(
                    "tier {} has only {} usable devices, need {count}",
                    tier.0,
                    out.len()
                )));
            }
            round += 1;
        }
        Ok(out)
    }

    // ---- faults ----

    pub fn schedule(&mut self, fault: FaultAction) {
        let t = fault.time();
        let at = self.pending.partition_point(|f| f.time() <= t);
        self.pending.insert(at, fault);
    }

    pub fn pending_faults(&self) -> &[FaultAction] {
        &self.pending
    }

    /// Moves the clock forward by `dt`, firing due faults in time order.
    pub fn advance(&mut self, dt: f64) -> Result<f64> {
        let to = self.now() + dt.max(0.0);
        self.advance_to(to)
    }

    pub fn advance_to(&mut self, to: f64) -> Result<f64> {
        while let Some(f) = self.pending.first() {
            if f.time() > to {
                break;
            }
            let f = self.pending.remove(0);
            self.clock.advance_to(f.time());
            self.apply_fault(f)?;
        }
        self.clock.advance_to(to);
        self.refresh_reachability();
        Ok(self.now())
    }

    /// Fires every fault whose time has passed.
    pub fn fire_due(&mut self) -> Result<()> {
        let now = self.now();
        if self.pending.first().is_some_and(|f| f.time() <= now) {
            self.advance_to(now)?;
        }
        Ok(())
    }

    fn apply_fault(&mut self, fault: FaultAction) -> Result<()> {
        match fault {
            FaultAction::Crash { node, .. } => {
                self.crash_node(node);
                Ok(())
            }
            FaultAction::Restart { node, .. } => self.restart_node(node),
            FaultAction::FailDevice { device, .. } => self.fail_device(device),
            FaultAction::Partition { nodes, t0, t1 } => {
                self.partitions.push(Partition {
                    nodes: nodes.into_iter().collect(),
                    t0,
                    t1,
                });
                self.addb.emit(
                    t0,
                    self.meta_node(),
                    Subsystem::Net,
                    "partition",
                    t1 - t0,
                    tags::<&str, &str>([]),
                );
                self.refresh_reachability();
                Ok(())
            }
        }
    }

    /// Cuts `nodes` off from the rest during `[t0, t1)`.
    pub fn partition(&mut self, nodes: Vec<NodeId>, t0: f64, t1: f64) -> Result<()> {
        if !(t1 > t0) {
            return Err(Error::BadConfig(
                "partition must end after it starts".into(),
            ));
        }
        self.schedule(FaultAction::Partition { nodes, t0, t1 });
        self.fire_due()
    }

    /// Drops the node's volatile state. Device files survive.
    pub fn crash_node(&mut self, node: NodeId) {
        if !self.down.insert(node) {
            return;
        }
        let meta = node == self.meta_node();
        if meta {
            self.store = None;
        }
        let ranks: BTreeSet<u32> = (0..self.total_ranks())
            .filter(|r| self.rank_node(*r) == node)
            .collect();
        self.windows.on_crash(&ranks, meta);
        self.streams.on_crash(&ranks);
        self.addb.emit(
            self.now(),
            node,
            Subsystem::Ha,
            "crash",
            1.0,
            tags::<&str, &str>([]),
        );
        self.report_event(EventSource::Node(node), EventKind::Crash);
        self.refresh_reachability();
    }

    /// Brings a node back; the metadata node recovers its store from disk.
    pub fn restart_node(&mut self, node: NodeId) -> Result<()> {
        if self.config.node(node).is_none() {
            return Err(Error::BadConfig(format!("unknown node {node}")));
        }
        if !self.down.remove(&node) {
            return Ok(());
        }
        self.addb.emit(
            self.now(),
            node,
            Subsystem::Ha,
            "restart",
            1.0,
            tags::<&str, &str>([]),
        );
        if node == self.meta_node() {
            self.injector.reset();
            self.open_store()?;
            if self.ha.config().auto_repair {
                self.ha_step();
            }
        }
        self.refresh_reachability();
        Ok(())
    }

    /// Crash and restart every node, metadata node last.
    pub fn restart_all(&mut self) -> Result<()> {
        let ids: Vec<NodeId> = self.config.nodes.iter().map(|n| n.id).collect();
        for &n in &ids {
            self.crash_node(n);
        }
        let meta = self.meta_node();
        for &n in ids.iter().filter(|n| **n != meta) {
            self.restart_node(n)?;
        }
        self.restart_node(meta)
    }

    pub fn fail_device(&mut self, device: DeviceId) -> Result<()> {
        self.devices.get(device)?.fail();
        self.addb.emit(
            self.now(),
            self.device_node(device)?,
            Subsystem::Ha,
            "device_failed",
            1.0,
            tags([("device", device.to_string())]),
        );
        self.refresh_reachability();
        self.report_event(EventSource::Device(device), EventKind::Offline);
        Ok(())
    }

    // ---- hsm ----

    /// One HSM evaluate/migrate pass at the current virtual time, charged
    /// to the metadata node.
    pub fn hsm_pass(&mut self) -> Result<Vec<MigrationAction>> {
        let now = self.now();
        let meta = self.meta_node();
        let hsm = std::mem::replace(&mut self.hsm, Hsm::new(HsmPolicy::default())?);
        let out = self.with_store(meta, |s| hsm.run_pass(s, now));
        self.hsm = hsm;
        out
    }

    /// Writes the ADDB export (`addb.tsv`) to `path`.
    pub fn export_addb(&self, path: &Path) -> Result<()> {
        self.addb.export_to(path)
    }
}
