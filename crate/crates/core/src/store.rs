//! The storage core: objects, indices, containers and transactions over one
//! device set, with redo-log recovery.
//!
//! Every mutation runs inside a [`Txn`]. Commit validates the ops against
//! current state, appends them plus a COMMIT record to the log, then applies
//! them. Recovery loads the last checkpoint and replays committed
//! transactions whose sequence number is newer than the checkpoint.
//!
//! Checkpoint file: `SAGECKP1 | version u32 | catalog_len u64 | catalog |
//! index_count u64 | SAGEIDX1 image* | fnv1a64(all preceding) u64`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checksum::{fnv1a64, Fnv1a64};
use crate::error::{Error, Result};
use crate::fault::{CrashInjector, WriteGate};
use crate::index::{DelAck, Index, Record};
use crate::model::{
    BlockSpec, Container, ContainerId, DeviceId, IndexId, Layout, NodeId, ObjectId, TierId, UnitKey,
};
use crate::object::{Allocator, ObjectMeta};
use crate::telemetry::{tags, Addb, Clock, Subsystem};
use crate::tier::{DeviceProfile, DeviceSet};
use crate::txn::{LogBody, LogRecord, Txn, TxnLog, TxnOp, TxnState};

/// Holds object metadata, keyed by the big-endian object id.
pub const SYSTEM_INDEX: IndexId = IndexId(0);
const FIRST_USER_INDEX: u64 = 16;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAGECKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub device_block_size: u64,
    /// Log size that triggers a checkpoint.
    pub log_cap_bytes: u64,
    /// Cost profile of the device hosting the log (the fastest tier).
    pub log_profile: DeviceProfile,
    pub fsync: bool,
    /// Node that hosts the store's metadata and log.
    pub node: NodeId,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            device_block_size: 4096,
            log_cap_bytes: 64 << 20,
            log_profile: DeviceProfile::default_for(TierId::FASTEST),
            fsync: false,
            node: NodeId(0),
        }
    }
}

/// Device and log activity accumulated since the last [`Store::take_trace`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoTrace {
    pub device_time: BTreeMap<DeviceId, f64>,
    pub bytes_read: BTreeMap<DeviceId, u64>,
    pub bytes_written: BTreeMap<DeviceId, u64>,
    pub log_bytes: u64,
    pub log_time: f64,
}

impl IoTrace {
    pub(crate) fn read(&mut self, device: DeviceId, bytes: u64, cost: f64) {
        *self.device_time.entry(device).or_default() += cost;
        *self.bytes_read.entry(device).or_default() += bytes;
    }

    pub(crate) fn write(&mut self, device: DeviceId, bytes: u64, cost: f64) {
        *self.device_time.entry(device).or_default() += cost;
        *self.bytes_written.entry(device).or_default() += bytes;
    }

    /// Everything done one after another.
    pub fn serial_time(&self) -> f64 {
        self.device_time.values().sum::<f64>() + self.log_time
    }

    /// Devices work concurrently; the log append precedes them.
    pub fn parallel_time(&self) -> f64 {
        self.device_time.values().copied().fold(0.0, f64::max) + self.log_time
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_read.values().sum::<u64>() + self.bytes_written.values().sum::<u64>()
    }

    /// Activity recorded after `earlier` was cloned from this trace.
    pub fn since(&self, earlier: &IoTrace) -> IoTrace {
        fn diff<V: Copy + std::ops::Sub<Output = V> + Default + PartialEq>(
            now: &BTreeMap<DeviceId, V>,
            then: &BTreeMap<DeviceId, V>,
        ) -> BTreeMap<DeviceId, V> {
            now.iter()
                .map(|(k, v)| (*k, *v - then.get(k).copied().unwrap_or_default()))
                .filter(|(_, v)| *v != V::default())
                .collect()
        }
        IoTrace {
            device_time: diff(&self.device_time, &earlier.device_time),
            bytes_read: diff(&self.bytes_read, &earlier.bytes_read),
            bytes_written: diff(&self.bytes_written, &earlier.bytes_written),
            log_bytes: self.log_bytes - earlier.log_bytes,
            log_time: self.log_time - earlier.log_time,
        }
    }

    pub fn merge(&mut self, other: &IoTrace) {
        for (k, v) in &other.device_time {
            *self.device_time.entry(*k).or_default() += v;
        }
        for (k, v) in &other.bytes_read {
            *self.bytes_read.entry(*k).or_default() += v;
        }
        for (k, v) in &other.bytes_written {
            *self.bytes_written.entry(*k).or_default() += v;
        }
        self.log_bytes += other.log_bytes;
        self.log_time += other.log_time;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct Catalog {
    pub objects: BTreeMap<ObjectId, ObjectMeta>,
    pub deleted: BTreeSet<ObjectId>,
    pub containers: BTreeMap<ContainerId, Container>,
    pub next_object_id: u128,
    pub next_index_id: u64,
    pub next_container_id: u64,
    pub next_txn_id: u64,
    /// Sequence number of the last applied commit.
    pub commit_seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveryReport {
    pub from_checkpoint: bool,
    pub txns_replayed: u64,
    pub truncated_at: Option<u64>,
    pub discarded_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommitInfo {
    pub txn_id: u64,
    pub seq: u64,
    pub log_bytes: u64,
}

pub struct Store {
    pub(crate) dir: PathBuf,
    pub(crate) config: StoreConfig,
    pub(crate) devices: Arc<DeviceSet>,
    pub(crate) injector: Arc<CrashInjector>,
    pub(crate) clock: Clock,
    pub(crate) addb: Arc<Addb>,
    pub(crate) catalog: Catalog,
    pub(crate) indices: BTreeMap<IndexId, Index>,
    pub(crate) alloc: BTreeMap<DeviceId, Allocator>,
    pub(crate) log: TxnLog,
    pub(crate) unreachable: BTreeSet<DeviceId>,
    pub(crate) reserved: BTreeSet<DeviceId>,
    pub(crate) trace: IoTrace,
    pub(crate) replaying: bool,
    pub(crate) applying: bool,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.dir)
            .field("objects", &self.catalog.objects.len())
            .field("indices", &self.indices.len())
            .finish()
    }
}

impl Store {
    /// Opens the store in `dir`, recovering from checkpoint and log.
    pub fn open(
        dir: impl AsRef<Path>,
        config: StoreConfig,
        devices: Arc<DeviceSet>,
        injector: Arc<CrashInjector>,
        clock: Clock,
        addb: Arc<Addb>,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut recovery = RecoveryReport::default();
        let (catalog, indices) = match read_checkpoint(&dir.join("checkpoint"))? {
            Some(c) => {
                recovery.from_checkpoint = true;
                c
            }
            None => {
                let catalog = Catalog {
                    next_object_id: 1,
                    next_index_id: FIRST_USER_INDEX,
                    next_container_id: 1,
                    next_txn_id: 1,
                    ..Catalog::default()
                };
                (catalog, BTreeMap::new())
            }
        };
        let (log, scan) = TxnLog::open(dir.join("txn.log"), config.fsync, injector.clone())?;
        let alloc = devices
            .iter()
            .map(|d| (d.id(), Allocator::new(d.capacity_blocks())))
            .collect();
        let mut store = Self {
            dir,
            config,
            devices,
            injector,
            clock,
            addb,
            catalog,
            indices,
            alloc,
            log,
            unreachable: BTreeSet::new(),
            reserved: BTreeSet::new(),
            trace: IoTrace::default(),
            replaying: true,
            applying: false,
            recovery: RecoveryReport::default(),
        };
        store.rebuild_allocators();
        recovery.truncated_at = scan.truncated_at;
        recovery.discarded_bytes = scan.discarded_bytes;
        if let Some(max) = scan.max_txn_id {
            store.catalog.next_txn_id = store.catalog.next_txn_id.max(max + 1);
        }
        for txn in scan.committed {
            if txn.seq <= store.catalog.commit_seq {
                continue;
            }
            for op in txn.ops {
                store.apply_op(op)?;
            }
            store.catalog.commit_seq = txn.seq;
            recovery.txns_replayed += 1;
        }
        store.replaying = false;
        if recovery.txns_replayed > 0 {
            store.checkpoint()?;
        }
        store.trace = IoTrace::default();
        store.recovery = recovery;
        Ok(store)
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn devices(&self) -> &Arc<DeviceSet> {
        &self.devices
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub(crate) fn ensure_alive(&self) -> Result<()> {
        if self.injector.crashed() {
            Err(Error::Crashed)
        } else {
            Ok(())
        }
    }

    fn rebuild_allocators(&mut self) {
        let mut alloc: BTreeMap<DeviceId, Allocator> = self
            .devices
            .iter()
            .map(|d| (d.id(), Allocator::new(d.capacity_blocks())))
            .collect();
        for meta in self.catalog.objects.values() {
            let run = meta
                .spec
                .block_size()
                .div_ceil(self.config.device_block_size);
            for (key, &phys) in &meta.units {
                if let Some(a) = alloc.get_mut(&key.device) {
                    a.mark(phys, run);
                }
            }
        }
        self.alloc = alloc;
    }

    /// Marks devices that cannot be reached (their node is down).
    pub fn set_unreachable(&mut self, devices: BTreeSet<DeviceId>) {
        self.unreachable = devices;
    }

    /// Devices kept out of automatic placement (spares).
    pub fn set_reserved(&mut self, devices: BTreeSet<DeviceId>) {
        self.reserved = devices;
    }

    /// Available and not reserved.
    pub fn device_placeable(&self, device: DeviceId) -> bool {
        !self.reserved.contains(&device) && self.device_available(device)
    }

    /// Returns and clears the accumulated I/O trace.
    pub fn take_trace(&mut self) -> IoTrace {
        std::mem::take(&mut self.trace)
    }

    pub fn trace(&self) -> &IoTrace {
        &self.trace
    }

    pub fn device_live_blocks(&self, device: DeviceId) -> u64 {
        self.alloc.get(&device).map_or(0, |a| a.live())
    }

    pub fn device_free_blocks(&self, device: DeviceId) -> u64 {
        self.alloc.get(&device).map_or(0, |a| a.free())
    }

    pub fn new_object_id(&mut self) -> ObjectId {
        let id = ObjectId(self.catalog.next_object_id);
        self.catalog.next_object_id += 1;
        id
    }

    pub fn new_index_id(&mut self) -> IndexId {
        let id = IndexId(self.catalog.next_index_id);
        self.catalog.next_index_id += 1;
        id
    }

    pub fn new_container_id(&mut self) -> ContainerId {
        let id = ContainerId(self.catalog.next_container_id);
        self.catalog.next_container_id += 1;
        id
    }

    // ---- transactions ----

    pub fn begin(&mut self) -> Txn {
        let id = self.catalog.next_txn_id;
        self.catalog.next_txn_id += 1;
        Txn::new(id)
    }

    pub fn abort(&mut self, txn: &mut Txn) -> Result<()> {
        if txn.state() != TxnState::Open {
            return Err(Error::InvalidState(txn.id()));
        }
        txn.set_state(TxnState::Aborted);
        Ok(())
    }

    pub fn commit(&mut self, txn: &mut Txn) -> Result<CommitInfo> {
        self.ensure_alive()?;
        if txn.state() != TxnState::Open {
            return Err(Error::InvalidState(txn.id()));
        }
        if let Err(e) = self.validate(txn.ops()).and_then(|need| self.reserve(need)) {
            txn.set_state(TxnState::Aborted);
            return Err(e);
        }
        let seq = self.catalog.commit_seq + 1;
        let mut records: Vec<LogRecord> = txn
            .ops()
            .iter()
            .map(|op| LogRecord {
                txn_id: txn.id(),
                body: LogBody::Op(op.clone()),
            })
            .collect();
        records.push(LogRecord {
            txn_id: txn.id(),
            body: LogBody::Commit { seq },
        });
        let log_bytes = match self.log.append(&records) {
            Ok(b) => b,
            Err(e) => {
                txn.set_state(TxnState::Aborted);
                return Err(e);
            }
        };
        self.trace.log_bytes += log_bytes;
        self.trace.log_time += self.config.log_profile.write_cost(log_bytes);
        txn.set_state(TxnState::Committed);
        self.applying = true;
        let applied = txn
            .ops()
            .to_vec()
            .into_iter()
            .try_for_each(|op| self.apply_op(op));
        self.applying = false;
        applied?;
        self.catalog.commit_seq = seq;
        self.addb.emit(
            self.clock.now(),
            self.config.node,
            Subsystem::Txn,
            "commit",
            txn.ops().len() as f64,
            tags([("txn", txn.id()), ("log_bytes", log_bytes)]),
        );
        if self.log.len() > self.config.log_cap_bytes {
            self.checkpoint()?;
        }
        Ok(CommitInfo {
            txn_id: txn.id(),
            seq,
            log_bytes,
        })
    }

    /// Makes sure every device has room for `need` blocks, releasing parked
    /// runs through a checkpoint if that is what it takes.
    fn reserve(&mut self, need: BTreeMap<DeviceId, u64>) -> Result<()> {
        let short = |s: &Self| {
            need.iter()
                .find(|(d, n)| s.alloc.get(d).is_none_or(|a| a.unused() < **n))
                .map(|(d, _)| *d)
        };
        let Some(device) = short(self) else {
            return Ok(());
        };
        if self
            .alloc
            .get(&device)
            .is_some_and(|a| a.pending_blocks() > 0)
        {
            self.checkpoint()?;
        }
        match short(self) {
            None => Ok(()),
            Some(device) => Err(Error::OutOfCapacity { device }),
        }
    }

    /// Checks `ops` against current state; returns device blocks the ops
    /// will allocate.
    fn validate(&self, ops: &[TxnOp]) -> Result<BTreeMap<DeviceId, u64>> {
        let mut new_units: BTreeSet<(ObjectId, UnitKey)> = BTreeSet::new();
        let mut need: BTreeMap<DeviceId, u64> = BTreeMap::new();
        let mut objects: BTreeMap<ObjectId, Option<ObjectMeta>> = BTreeMap::new();
        let mut indices: BTreeSet<IndexId> = BTreeSet::new();
        let mut containers = self.catalog.containers.clone();
        let mut deleted_here = BTreeSet::new();
        let lookup = |objects: &BTreeMap<ObjectId, Option<ObjectMeta>>, id: ObjectId| match objects
            .get(&id)
        {
            Some(m) => m.clone(),
            None => self.catalog.objects.get(&id).cloned(),
        };
        for op in ops {
            match op {
                TxnOp::ObjCreate { id, spec, layout } => {
                    if lookup(&objects, *id).is_some()
                        || self.catalog.deleted.contains(id)
                        || deleted_here.contains(id)
                    {
                        return Err(Error::AlreadyExists(*id));
                    }
                    layout.validate()?;
                    for d in layout.devices() {
                        self.devices
                            .get(d)
                            .map_err(|_| Error::InvalidLayout(format!("unknown device {d}")))?;
                    }
                    objects.insert(*id, Some(ObjectMeta::new(*id, *spec, layout.clone(), 0.0)));
                }
                TxnOp::ObjWrite {
                    id,
                    start_block,
                    data,
                } => {
                    let meta = lookup(&objects, *id).ok_or(Error::UnknownObject(*id))?;
                    let bs = meta.spec.block_size();
                    if !(data.len() as u64).is_multiple_of(bs) {
                        return Err(Error::BadLength {
                            expected: (data.len() as u64).div_ceil(bs) * bs,
                            actual: data.len() as u64,
                        });
                    }
                    let count = data.len() as u64 / bs;
                    for b in [*start_block, start_block + count.max(1) - 1] {
                        if count > 0 {
                            meta.layout.locate(b)?;
                        }
                    }
                    if let Layout::Tiered { .. } = meta.layout {
                        for b in *start_block..start_block + count {
                            meta.layout.resolve(b)?;
                        }
                    }
                    self.check_writable(&meta, *start_block, count)?;
                    let run = self.unit_device_blocks(&meta.spec);
                    for unit in self.units_for_write(&meta, *start_block, count)? {
                        if new_units.insert((*id, unit)) {
                            *need.entry(unit.device).or_default() += run;
                        }
                    }
                }
                TxnOp::ObjDelete { id } => {
                    lookup(&objects, *id).ok_or(Error::UnknownObject(*id))?;
                    objects.insert(*id, None);
                    deleted_here.insert(*id);
                }
                TxnOp::SetMeta { meta } => {
                    lookup(&objects, meta.id).ok_or(Error::UnknownObject(meta.id))?;
                    meta.layout.validate()?;
                    objects.insert(meta.id, Some(meta.clone()));
                }
                TxnOp::IdxCreate { index } => {
                    if *index == SYSTEM_INDEX {
                        return Err(Error::ReservedIndex(*index));
                    }
                    if self.indices.contains_key(index) || !indices.insert(*index) {
                        return Err(Error::IndexExists(*index));
                    }
                }
                TxnOp::IdxPut { index, records } => {
                    self.check_user_index(*index, &indices)?;
                    Index::check_keys(records.iter().map(|r| r.key.as_slice()))?;
                }
                TxnOp::IdxDel { index, keys } => {
                    self.check_user_index(*index, &indices)?;
                    Index::check_keys(keys.iter().map(Vec::as_slice))?;
                }
                TxnOp::ContainerCreate { id, label, hint } => {
                    if containers.contains_key(id) {
                        return Err(Error::BadConfig(format!("container {id} exists")));
                    }
                    let mut c = Container::new(*id, label.clone());
                    c.placement_hint = *hint;
                    containers.insert(*id, c);
                }
                TxnOp::ContainerAdd { id, object } => {
                    let c = containers.get_mut(id).ok_or(Error::UnknownContainer(*id))?;
                    lookup(&objects, *object).ok_or(Error::UnknownObject(*object))?;
                    c.add_member(*object);
                }
                TxnOp::ContainerRemove { id, object } => {
                    containers
                        .get_mut(id)
                        .ok_or(Error::UnknownContainer(*id))?
                        .remove_member(*object)?;
                }
            }
        }
        Ok(need)
    }

    fn check_user_index(&self, index: IndexId, created: &BTreeSet<IndexId>) -> Result<()> {
        if index == SYSTEM_INDEX {
            return Err(Error::ReservedIndex(index));
        }
        if self.indices.contains_key(&index) || created.contains(&index) {
            Ok(())
        } else {
            Err(Error::UnknownIndex(index))
        }
    }

    pub(crate) fn apply_op(&mut self, op: TxnOp) -> Result<()> {
        match op {
            TxnOp::ObjCreate { id, spec, layout } => {
                let meta = ObjectMeta::new(id, spec, layout, self.clock.now());
                self.catalog.objects.insert(id, meta);
                if id.0 >= self.catalog.next_object_id {
                    self.catalog.next_object_id = id.0 + 1;
                }
            }
            TxnOp::ObjWrite {
                id,
                start_block,
                data,
            } => self.apply_obj_write(id, start_block, &data)?,
            TxnOp::ObjDelete { id } => self.apply_obj_delete(id)?,
            TxnOp::SetMeta { meta } => self.apply_set_meta(meta)?,
            TxnOp::IdxCreate { index } => {
                self.indices.insert(index, Index::new(index));
                if index.0 >= self.catalog.next_index_id {
                    self.catalog.next_index_id = index.0 + 1;
                }
            }
            TxnOp::IdxPut { index, records } => {
                let idx = self
                    .indices
                    .get_mut(&index)
                    .ok_or(Error::UnknownIndex(index))?;
                idx.put(&records)?;
            }
            TxnOp::IdxDel { index, keys } => {
                let idx = self
                    .indices
                    .get_mut(&index)
                    .ok_or(Error::UnknownIndex(index))?;
                idx.del(&keys);
            }
            TxnOp::ContainerCreate { id, label, hint } => {
                let mut c = Container::new(id, label);
                c.placement_hint = hint;
                self.catalog.containers.insert(id, c);
                if id.0 >= self.catalog.next_container_id {
                    self.catalog.next_container_id = id.0 + 1;
                }
            }
            TxnOp::ContainerAdd { id, object } => {
                if let Some(c) = self.catalog.containers.get_mut(&id) {
                    c.add_member(object);
                }
            }
            TxnOp::ContainerRemove { id, object } => {
                if let Some(c) = self.catalog.containers.get_mut(&id) {
                    c.members.remove(&object);
                }
            }
        }
        Ok(())
    }

    fn run_single(&mut self, op: TxnOp) -> Result<CommitInfo> {
        let mut txn = self.begin();
        txn.push(op);
        self.commit(&mut txn)
    }

    // ---- auto-committed object operations ----

    pub fn obj_create(
        &mut self,
        id: ObjectId,
        spec: BlockSpec,
        layout: Layout,
    ) -> Result<ObjectMeta> {
        self.run_single(TxnOp::ObjCreate { id, spec, layout })?;
        Ok(self.catalog.objects[&id].clone())
    }

    pub fn obj_write(&mut self, id: ObjectId, start_block: u64, data: Vec<u8>) -> Result<()> {
        self.run_single(TxnOp::ObjWrite {
            id,
            start_block,
            data,
        })
        .map(|_| ())
    }

    pub fn obj_delete(&mut self, id: ObjectId) -> Result<()> {
        self.run_single(TxnOp::ObjDelete { id }).map(|_| ())
    }

    /// Commits `new` (whose added units are already written) in place of
    /// `old`. On failure the added units are released again.
    pub(crate) fn install_meta(&mut self, old: &ObjectMeta, new: ObjectMeta) -> Result<CommitInfo> {
        let added: Vec<(UnitKey, u64)> = new
            .units
            .iter()
            .filter(|(k, p)| old.units.get(k) != Some(p))
            .map(|(k, p)| (*k, *p))
            .collect();
        let result = self.run_single(TxnOp::SetMeta { meta: new.clone() });
        if result.is_err() {
            self.discard_units(&new.spec, &added);
        }
        result
    }

    /// Frees units that were written but never published.
    pub(crate) fn discard_units(&mut self, spec: &BlockSpec, units: &[(UnitKey, u64)]) {
        let run = self.unit_device_blocks(spec);
        for (key, phys) in units {
            if let Some(a) = self.alloc.get_mut(&key.device) {
                a.unmark(*phys, run);
            }
        }
    }

    /// Bytes of device space held by live units, per tier.
    pub fn tier_usage(&self) -> BTreeMap<TierId, (u64, u64)> {
        let mut out: BTreeMap<TierId, (u64, u64)> = BTreeMap::new();
        for d in self.devices.iter() {
            let e = out.entry(d.tier()).or_default();
            e.0 += self.device_live_blocks(d.id()) * d.block_size();
            e.1 += d.capacity_blocks() * d.block_size();
        }
        out
    }

    // ---- indices ----

    pub fn idx_create(&mut self, index: IndexId) -> Result<()> {
        self.run_single(TxnOp::IdxCreate { index }).map(|_| ())
    }

    pub fn idx_exists(&self, index: IndexId) -> bool {
        index == SYSTEM_INDEX || self.indices.contains_key(&index)
    }

    pub fn idx_put(&mut self, index: IndexId, records: Vec<Record>) -> Result<()> {
        if records.is_empty() {
            self.check_user_index(index, &BTreeSet::new())?;
            return Ok(());
        }
        self.run_single(TxnOp::IdxPut { index, records })
            .map(|_| ())
    }

    pub fn idx_del(&mut self, index: IndexId, keys: Vec<Vec<u8>>) -> Result<Vec<DelAck>> {
        self.check_user_index(index, &BTreeSet::new())?;
        let acks = {
            let idx = &self.indices[&index];
            keys.iter()
                .map(|k| {
                    if idx.get(&[k])[0].is_some() {
                        DelAck::Deleted
                    } else {
                        DelAck::NotFound
                    }
                })
                .collect::<Vec<_>>()
        };
        let mut seen = BTreeSet::new();
        let acks = acks
            .into_iter()
            .zip(&keys)
            .map(|(a, k)| {
                if seen.insert(k.clone()) {
                    a
                } else {
                    DelAck::NotFound
                }
            })
            .collect();
        if !keys.is_empty() {
            self.run_single(TxnOp::IdxDel { index, keys })?;
        }
        Ok(acks)
    }

    pub fn idx_get<K: AsRef<[u8]>>(
        &self,
        index: IndexId,
        keys: &[K],
    ) -> Result<Vec<Option<Vec<u8>>>> {
        if index == SYSTEM_INDEX {
            return keys
                .iter()
                .map(|k| {
                    let Ok(raw) = <[u8; 16]>::try_from(k.as_ref()) else {
                        return Ok(None);
                    };
                    let id = ObjectId(u128::from_be_bytes(raw));
                    self.catalog
                        .objects
                        .get(&id)
                        .map(|m| bincode::serialize(m).map_err(Error::from))
                        .transpose()
                })
                .collect();
        }
        let idx = self.indices.get(&index).ok_or(Error::UnknownIndex(index))?;
        Ok(idx.get(keys))
    }

    pub fn idx_next<K: AsRef<[u8]>>(
        &self,
        index: IndexId,
        keys: &[K],
        count: usize,
    ) -> Result<Vec<Vec<Record>>> {
        if index == SYSTEM_INDEX {
            let all = self.system_index();
            return Ok(all.next(keys, count));
        }
        let idx = self.indices.get(&index).ok_or(Error::UnknownIndex(index))?;
        Ok(idx.next(keys, count))
    }

    /// The system index materialized from the object catalog.
    pub fn system_index(&self) -> Index {
        let mut idx = Index::new(SYSTEM_INDEX);
        let records: Vec<Record> = self
            .catalog
            .objects
            .values()
            .map(|m| {
                Record::new(
                    m.id.to_key().to_vec(),
                    bincode::serialize(m).unwrap_or_default(),
                )
            })
            .collect();
        idx.put(&records).expect("object keys are never empty");
        idx
    }

    pub fn index(&self, index: IndexId) -> Result<&Index> {
        self.indices.get(&index).ok_or(Error::UnknownIndex(index))
    }

    // ---- containers ----

    pub fn container_create(&mut self, label: &str, hint: Option<TierId>) -> Result<ContainerId> {
        let id = self.new_container_id();
        self.run_single(TxnOp::ContainerCreate {
            id,
            label: label.to_string(),
            hint,
        })?;
        Ok(id)
    }

    pub fn container_add(&mut self, id: ContainerId, object: ObjectId) -> Result<()> {
        self.run_single(TxnOp::ContainerAdd { id, object })
            .map(|_| ())
    }

    pub fn container_remove(&mut self, id: ContainerId, object: ObjectId) -> Result<()> {
        self.run_single(TxnOp::ContainerRemove { id, object })
            .map(|_| ())
    }

    pub fn container_list(&self, id: ContainerId) -> Result<Vec<ObjectId>> {
        self.catalog
            .containers
            .get(&id)
            .map(Container::list_members)
            .ok_or(Error::UnknownContainer(id))
    }

    pub fn container(&self, id: ContainerId) -> Result<&Container> {
        self.catalog
            .containers
            .get(&id)
            .ok_or(Error::UnknownContainer(id))
    }

    // ---- checkpoint ----

    /// Persists all metadata, truncates the log and releases parked blocks.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.ensure_alive()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let catalog = bincode::serialize(&self.catalog)?;
        buf.extend_from_slice(&(catalog.len() as u64).to_le_bytes());
        buf.extend_from_slice(&catalog);
        buf.extend_from_slice(&(self.indices.len() as u64).to_le_bytes());
        for idx in self.indices.values() {
            buf.extend_from_slice(&idx.encode());
        }
        let sum = fnv1a64(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        let tmp = self.dir.join("checkpoint.tmp");
        std::fs::write(&tmp, &buf)?;
        if self.injector.gate()? == WriteGate::Torn {
            return Err(Error::Crashed);
        }
        std::fs::rename(&tmp, self.dir.join("checkpoint"))?;
        self.log.reset()?;
        for a in self.alloc.values_mut() {
            a.release_pending();
        }
        self.trace.log_time += self.config.log_profile.write_cost(buf.len() as u64);
        Ok(())
    }

    /// Hash over metadata, index contents and every object's bytes.
    pub fn state_digest(&mut self) -> Result<u64> {
        let mut h = Fnv1a64::default();
        let ids: Vec<ObjectId> = self.catalog.objects.keys().copied().collect();
        for id in ids {
            let size = self.catalog.objects[&id].size_blocks;
            h.update(&id.to_key());
            h.update(&size.to_le_bytes());
            h.update(&self.obj_read(id, 0, size)?);
        }
        for idx in self.indices.values() {
            h.update(&idx.encode());
        }
        for c in self.catalog.containers.values() {
            h.update(&bincode::serialize(c)?);
        }
        h.update(&bincode::serialize(&self.catalog.deleted)?);
        Ok(h.finish())
    }
}

type CheckpointImage = (Catalog, BTreeMap<IndexId, Index>);

fn read_checkpoint(path: &Path) -> Result<Option<CheckpointImage>> {
    let buf = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let corrupt = |what: &str| Error::CorruptCheckpoint(what.to_string());
    if buf.len() < 28 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, sum) = buf.split_at(buf.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(sum.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let clen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let catalog: Catalog = bincode::deserialize(
        body.get(20..20 + clen)
            .ok_or_else(|| corrupt("truncated"))?,
    )?;
    let mut pos = 20 + clen;
    let count = u64::from_le_bytes(
        body.get(pos..pos + 8)
            .ok_or_else(|| corrupt("truncated"))?
            .try_into()
            .unwrap(),
    );
    pos += 8;
    let mut indices = BTreeMap::new();
    for _ in 0..count {
        let (idx, used) = Index::decode(&body[pos..])?;
        pos += used;
        indices.insert(idx.id(), idx);
    }
    Ok(Some((catalog, indices)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Extent;

    struct Rig {
        _dir: tempfile::TempDir,
        path: PathBuf,
        devices: Arc<DeviceSet>,
        injector: Arc<CrashInjector>,
    }

    fn rig(n: u32) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let injector = Arc::new(CrashInjector::new());
        let profile = DeviceProfile {
            capacity_bytes: 4096 * 256,
            ..DeviceProfile::default_for(TierId(2))
        };
        let specs: Vec<_> = (0..n).map(|i| (DeviceId(i), TierId(2), profile)).collect();
        let devices = Arc::new(
            DeviceSet::open_dir(&path.join("dev"), 4096, &specs, injector.clone()).unwrap(),
        );
        Rig {
            _dir: dir,
            path,
            devices,
            injector,
        }
    }

    fn open(r: &Rig) -> Store {
        Store::open(
            r.path.join("meta"),
            StoreConfig::default(),
            r.devices.clone(),
            r.injector.clone(),
            Clock::new(),
            Arc::new(Addb::new()),
        )
        .unwrap()
    }

    fn spec() -> BlockSpec {
        BlockSpec::new(4096).unwrap()
    }

    fn pattern(blocks: usize, seed: u8) -> Vec<u8> {
        (0..blocks * 4096)
            .map(|i| (i as u8).wrapping_mul(31) ^ seed)
            .collect()
    }

    #[test]
    fn write_read_and_reopen() {
        let r = rig(3);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(
            id,
            spec(),
            Layout::striped(2, 1, vec![DeviceId(0), DeviceId(1), DeviceId(2)]),
        )
        .unwrap();
        let data = pattern(5, 1);
        s.obj_write(id, 0, data.clone()).unwrap();
        assert!(s.obj_read(id, 0, 5).unwrap() == data);
        assert_eq!(s.obj_read(id, 5, 1).unwrap(), vec![0; 4096]);
        drop(s);
        let mut s = open(&r);
        assert_eq!(s.recovery_report().txns_replayed, 2);
        assert!(s.obj_read(id, 0, 5).unwrap() == data);
        drop(s);
        let mut s = open(&r);
        assert!(s.recovery_report().from_checkpoint);
        assert_eq!(s.recovery_report().txns_replayed, 0);
        assert!(s.obj_read(id, 0, 5).unwrap() == data);
    }

    #[test]
    fn degraded_reads_and_writes() {
        let r = rig(3);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(
            id,
            spec(),
            Layout::striped(2, 1, vec![DeviceId(0), DeviceId(1), DeviceId(2)]),
        )
        .unwrap();
        let mut data = pattern(6, 7);
        s.obj_write(id, 0, data.clone()).unwrap();
        for d in 0..3 {
            r.devices.get(DeviceId(d)).unwrap().fail();
            assert!(s.obj_read(id, 0, 6).unwrap() == data, "device {d} down");
            r.devices.get(DeviceId(d)).unwrap().restore(false).unwrap();
        }
        r.devices.get(DeviceId(1)).unwrap().fail();
        let patch = pattern(1, 99);
        s.obj_write(id, 3, patch.clone()).unwrap();
        data[3 * 4096..4 * 4096].copy_from_slice(&patch);
        assert!(s.obj_read(id, 0, 6).unwrap() == data);
        r.devices.get(DeviceId(2)).unwrap().fail();
        assert!(matches!(
            s.obj_read(id, 0, 6),
            Err(Error::UnrecoverableLoss { .. })
        ));
        assert!(matches!(
            s.obj_write(id, 0, pattern(1, 3)),
            Err(Error::UnrecoverableLoss { .. })
        ));
    }

    #[test]
    fn tiered_and_mirrored_layouts() {
        let r = rig(4);
        let mut s = open(&r);
        let id = s.new_object_id();
        let layout = Layout::Tiered {
            extents: vec![
                (
                    Extent::new(0, 3),
                    Layout::striped(2, 1, vec![DeviceId(0), DeviceId(1), DeviceId(2)]),
                ),
                (
                    Extent::new(3, 4),
                    Layout::mirrored(vec![DeviceId(2), DeviceId(3)]),
                ),
            ],
        };
        s.obj_create(id, spec(), layout).unwrap();
        let data = pattern(7, 5);
        s.obj_write(id, 0, data.clone()).unwrap();
        assert!(s.obj_read(id, 0, 7).unwrap() == data);
        r.devices.get(DeviceId(2)).unwrap().fail();
        assert!(s.obj_read(id, 0, 7).unwrap() == data);
        assert!(matches!(
            s.obj_write(id, 7, pattern(1, 0)),
            Err(Error::ExtentOutsideLayout { block: 7 })
        ));
    }

    #[test]
    fn txn_is_atomic_on_validation_failure() {
        let r = rig(1);
        let mut s = open(&r);
        let id = s.new_object_id();
        let mut t = s.begin();
        t.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .obj_write(id, 0, vec![1; 4096])
            .obj_write(ObjectId(999), 0, vec![1; 4096]);
        assert!(matches!(s.commit(&mut t), Err(Error::UnknownObject(_))));
        assert_eq!(t.state(), TxnState::Aborted);
        assert!(s.obj_meta(id).is_err());
        assert!(matches!(s.commit(&mut t), Err(Error::InvalidState(_))));
        assert!(matches!(
            s.obj_write(id, 0, vec![0; 10]),
            Err(Error::UnknownObject(_))
        ));
    }

    #[test]
    fn bad_length_and_reused_ids() {
        let r = rig(1);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        assert!(matches!(
            s.obj_write(id, 0, vec![0; 100]),
            Err(Error::BadLength {
                expected: 4096,
                actual: 100
            })
        ));
        s.obj_delete(id).unwrap();
        assert!(matches!(
            s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)])),
            Err(Error::AlreadyExists(_))
        ));
    }

    #[test]
    fn crash_before_commit_record_loses_txn() {
        let r = rig(1);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        s.obj_write(id, 0, vec![1; 4096]).unwrap();
        r.injector.arm(1);
        assert!(matches!(
            s.obj_write(id, 0, vec![2; 4096]),
            Err(Error::Crashed)
        ));
        assert!(matches!(s.obj_read(id, 0, 1), Err(Error::Crashed)));
        drop(s);
        r.injector.reset();
        let mut s = open(&r);
        assert!(s.recovery_report().truncated_at.is_some());
        assert_eq!(s.obj_read(id, 0, 1).unwrap(), vec![1; 4096]);
    }

    #[test]
    fn crash_after_commit_record_is_redone() {
        let r = rig(1);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        // op record and commit record land, the data block write is torn
        r.injector.arm(3);
        assert!(matches!(
            s.obj_write(id, 0, vec![9; 4096]),
            Err(Error::Crashed)
        ));
        drop(s);
        r.injector.reset();
        let mut s = open(&r);
        assert_eq!(s.obj_read(id, 0, 1).unwrap(), vec![9; 4096]);
    }

    #[test]
    fn indices_and_system_index() {
        let r = rig(1);
        let mut s = open(&r);
        let idx = s.new_index_id();
        s.idx_create(idx).unwrap();
        assert!(matches!(s.idx_create(idx), Err(Error::IndexExists(_))));
        assert!(matches!(
            s.idx_create(SYSTEM_INDEX),
            Err(Error::ReservedIndex(_))
        ));
        assert!(matches!(
            s.idx_put(SYSTEM_INDEX, vec![Record::new("k", "v")]),
            Err(Error::ReservedIndex(_))
        ));
        s.idx_put(idx, vec![Record::new("a", "1"), Record::new("b", "2")])
            .unwrap();
        assert_eq!(
            s.idx_del(idx, vec![b"a".to_vec(), b"a".to_vec(), b"z".to_vec()])
                .unwrap(),
            vec![DelAck::Deleted, DelAck::NotFound, DelAck::NotFound]
        );
        assert_eq!(
            s.idx_get(idx, &["a", "b"]).unwrap(),
            vec![None, Some(b"2".to_vec())]
        );
        assert!(matches!(
            s.idx_get(IndexId(99), &["a"]),
            Err(Error::UnknownIndex(_))
        ));
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        let raw = s.idx_get(SYSTEM_INDEX, &[id.to_key()]).unwrap()[0]
            .clone()
            .unwrap();
        let meta: ObjectMeta = bincode::deserialize(&raw).unwrap();
        assert_eq!(meta.id, id);
        drop(s);
        let s = open(&r);
        assert_eq!(s.idx_get(idx, &["b"]).unwrap(), vec![Some(b"2".to_vec())]);
        assert_eq!(
            s.idx_next(SYSTEM_INDEX, &[[0u8; 1]], 10).unwrap()[0].len(),
            1
        );
    }

    #[test]
    fn containers() {
        let r = rig(1);
        let mut s = open(&r);
        let c = s.container_create("hot", Some(TierId(1))).unwrap();
        let a = s.new_object_id();
        let b = s.new_object_id();
        for id in [a, b] {
            s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
                .unwrap();
            s.container_add(c, id).unwrap();
        }
        assert_eq!(s.container_list(c).unwrap(), vec![a, b]);
        s.container_remove(c, a).unwrap();
        assert!(matches!(
            s.container_remove(c, a),
            Err(Error::UnknownObject(_))
        ));
        s.obj_delete(b).unwrap();
        assert!(s.container_list(c).unwrap().is_empty());
        assert!(matches!(
            s.container_list(ContainerId(77)),
            Err(Error::UnknownContainer(_))
        ));
    }

    #[test]
    fn freed_blocks_are_reused_after_checkpoint() {
        let r = rig(1);
        let mut s = open(&r);
        // 256 blocks of capacity
        for round in 0..5u8 {
            let id = s.new_object_id();
            s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
                .unwrap();
            s.obj_write(id, 0, pattern(200, round)).unwrap();
            assert!(s.obj_read(id, 0, 200).unwrap() == pattern(200, round));
            s.obj_delete(id).unwrap();
        }
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        assert!(matches!(
            s.obj_write(id, 0, pattern(300, 0)),
            Err(Error::OutOfCapacity { .. })
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let r = rig(1);
        let mut s = open(&r);
        let id = s.new_object_id();
        s.obj_create(id, spec(), Layout::striped(1, 0, vec![DeviceId(0)]))
            .unwrap();
        let d0 = s.state_digest().unwrap();
        s.obj_write(id, 0, vec![1; 4096]).unwrap();
        let d1 = s.state_digest().unwrap();
        assert_ne!(d0, d1);
        drop(s);
        assert_eq!(open(&r).state_digest().unwrap(), d1);
    }
}
