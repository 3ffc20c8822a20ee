//! One-sided windows backed by rank memory or by a storage object.
//!
//! Storage windows keep a write-back page cache at the owner: a put lands
//! in the cache and is visible to every later get; `win_sync` writes the
//! dirty pages in one transaction. Only synced bytes survive a crash of the
//! metadata node or of the owner. Memory windows die with their owner.
//!
//! The registry of storage windows lives in index 1, keyed by the
//! big-endian window id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Cluster;
use crate::index::Record;
use crate::model::{BlockSpec, IndexId, Layout, ObjectId, TierId};
use crate::store::Store;
use crate::telemetry::{tags, Subsystem};

pub const WINDOW_REGISTRY: IndexId = IndexId(1);
pub const PAGE_SIZE: u64 = 4096;
/// Most devices a storage window is striped across.
const MAX_STRIPE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backing {
    Memory,
    Storage { tier: TierId },
}

impl Backing {
    /// Storage on the fastest tier.
    pub fn storage() -> Self {
        Backing::Storage {
            tier: TierId::FASTEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowInfo {
    pub id: u64,
    pub owner: u32,
    pub size: u64,
    pub backing: Backing,
    pub object: Option<ObjectId>,
}

#[derive(Debug, Clone, Default)]
struct PageCache {
    pages: BTreeMap<u64, Vec<u8>>,
    dirty: BTreeSet<u64>,
}

#[derive(Debug, Default)]
pub struct WindowTable {
    infos: BTreeMap<u64, WindowInfo>,
    memory: BTreeMap<u64, Vec<u8>>,
    caches: BTreeMap<u64, PageCache>,
    next_id: u64,
}

impl WindowTable {
    pub(crate) fn reload(&mut self, store: &Store) -> Result<()> {
        if !store.idx_exists(WINDOW_REGISTRY) {
            return Ok(());
        }
        for (_, value) in store.index(WINDOW_REGISTRY)?.iter() {
            let info: WindowInfo = bincode::deserialize(value)?;
            self.next_id = self.next_id.max(info.id + 1);
            self.infos.entry(info.id).or_insert(info);
        }
        Ok(())
    }

    /// Volatile state of the crashed ranks goes away; a metadata crash also
    /// drops every page cache.
    pub(crate) fn on_crash(&mut self, ranks: &BTreeSet<u32>, meta: bool) {
        let lost: Vec<u64> = self
            .infos
            .values()
            .filter(|w| ranks.contains(&w.owner))
            .map(|w| w.id)
            .collect();
        for id in lost {
            if self.infos[&id].backing == Backing::Memory {
                self.infos.remove(&id);
                self.memory.remove(&id);
            }
            self.caches.remove(&id);
        }
        if meta {
            self.caches.clear();
            self.infos.retain(|_, w| w.backing == Backing::Memory);
        }
    }

    fn info(&self, id: u64) -> Result<&WindowInfo> {
        self.infos.get(&id).ok_or(Error::UnknownWindow(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelStats {
    pub bytes: u64,
    pub time: f64,
}

impl KernelStats {
    /// Bytes per virtual second.
    pub fn bandwidth(&self) -> f64 {
        if self.time > 0.0 {
            self.bytes as f64 / self.time
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamKernelReport {
    pub copy: KernelStats,
    pub scale: KernelStats,
    pub add: KernelStats,
    pub triad: KernelStats,
}

impl StreamKernelReport {
    pub fn kernels(&self) -> [(&'static str, KernelStats); 4] {
        [
            ("copy", self.copy),
            ("scale", self.scale),
            ("add", self.add),
            ("triad", self.triad),
        ]
    }
}

fn check_bounds(info: &WindowInfo, offset: u64, len: u64) -> Result<()> {
    match offset.checked_add(len) {
        Some(end) if end <= info.size => Ok(()),
        _ => Err(Error::OutOfBounds {
            offset,
            len,
            size: info.size,
        }),
    }
}

impl Cluster {
    pub fn window(&self, id: u64) -> Result<&WindowInfo> {
        self.windows.info(id)
    }

    pub fn windows(&self) -> impl Iterator<Item = &WindowInfo> {
        self.windows.infos.values()
    }

    /// Allocates a zero-filled window owned by `rank`.
    pub fn win_alloc(&mut self, rank: u32, size: u64, backing: Backing) -> Result<u64> {
        if size == 0 {
            return Err(Error::ZeroSizeWindow);
        }
        self.fire_due()?;
        let owner = self.rank_node(rank);
        if !self.is_up(owner) {
            return Err(Error::NodeDown(owner));
        }
        let id = self.windows.next_id;
        let mut info = WindowInfo {
            id,
            owner: rank,
            size,
            backing,
            object: None,
        };
        match backing {
            Backing::Memory => {
                self.windows.memory.insert(id, vec![0; size as usize]);
            }
            Backing::Storage { tier } => {
                let available = self
                    .devices
                    .in_tier(tier)
                    .filter(|d| self.store().is_ok_and(|s| s.device_placeable(d.id())))
                    .count();
                let devices = self.pick_devices(tier, available.clamp(1, MAX_STRIPE))?;
                let pages = size.div_ceil(PAGE_SIZE);
                let per_device = pages.div_ceil(devices.len() as u64);
                let store = self.store()?;
                if let Some(&short) = devices
                    .iter()
                    .find(|d| store.device_free_blocks(**d) < per_device)
                {
                    return Err(Error::OutOfCapacity { device: short });
                }
                let layout = Layout::striped(devices.len() as u32, 0, devices);
                let window_info = &mut info;
                self.with_store(owner, |s| {
                    let object = s.new_object_id();
                    window_info.object = Some(object);
                    let mut txn = s.begin();
                    if !s.idx_exists(WINDOW_REGISTRY) {
                        txn.idx_create(WINDOW_REGISTRY);
                    }
                    txn.obj_create(object, BlockSpec::new(PAGE_SIZE)?, layout);
                    txn.idx_put(
                        WINDOW_REGISTRY,
                        vec![Record::new(
                            id.to_be_bytes(),
                            bincode::serialize(&*window_info)?,
                        )],
                    );
                    s.commit(&mut txn).map(|_| ())
                })?;
                self.windows.caches.insert(id, PageCache::default());
            }
        }
        self.windows.next_id += 1;
        self.windows.infos.insert(id, info);
        self.addb.emit(
            self.now(),
            owner,
            Subsystem::Window,
            "alloc",
            size as f64,
            tags([
                ("window", id.to_string()),
                ("backing", backing_name(backing)),
            ]),
        );
        Ok(id)
    }

    /// Releases a window and, for storage backing, its object.
    pub fn win_free(&mut self, id: u64) -> Result<()> {
        let info = self.windows.info(id)?.clone();
        if let Some(object) = info.object {
            let owner = self.rank_node(info.owner);
            self.with_store(owner, |s| {
                let mut txn = s.begin();
                txn.obj_delete(object);
                txn.idx_del(WINDOW_REGISTRY, vec![id.to_be_bytes().to_vec()]);
                s.commit(&mut txn).map(|_| ())
            })?;
        }
        self.windows.infos.remove(&id);
        self.windows.memory.remove(&id);
        self.windows.caches.remove(&id);
        Ok(())
    }

    /// Time for `rank` to move `bytes` to or from the owner's node.
    fn window_hop(&mut self, rank: u32, info: &WindowInfo, verb: &str, bytes: u64) -> Result<f64> {
        let from = self.rank_node(rank);
        let owner = self.rank_node(info.owner);
        let net = self.send(from, owner, verb, bytes)?;
        Ok(net + self.config.memory.cost(bytes))
    }

    pub fn win_put(&mut self, rank: u32, id: u64, offset: u64, data: &[u8]) -> Result<()> {
        self.fire_due()?;
        let info = self.windows.info(id)?.clone();
        check_bounds(&info, offset, data.len() as u64)?;
        let mut cost = self.window_hop(rank, &info, "WIN_PUT", data.len() as u64)?;
        match info.object {
            None => {
                let mem = self
                    .windows
                    .memory
                    .get_mut(&id)
                    .ok_or(Error::UnknownWindow(id))?;
                mem[offset as usize..offset as usize + data.len()].copy_from_slice(data);
            }
            Some(object) => {
                let end = offset + data.len() as u64;
                let first = offset / PAGE_SIZE;
                let last = end.div_ceil(PAGE_SIZE);
                let cache = self.windows.caches.entry(id).or_default();
                let missing: Vec<u64> = (first..last)
                    .filter(|p| {
                        !cache.pages.contains_key(p)
                            && (p * PAGE_SIZE < offset || (p + 1) * PAGE_SIZE > end)
                    })
                    .collect();
                let before = self.now();
                let filled = self.read_pages(info.owner, object, &missing)?;
                cost += self.now() - before;
                let cache = self.windows.caches.entry(id).or_default();
                cache.pages.extend(filled);
                for p in first..last {
                    let page = cache
                        .pages
                        .entry(p)
                        .or_insert_with(|| vec![0; PAGE_SIZE as usize]);
                    let lo = offset.max(p * PAGE_SIZE);
                    let hi = end.min((p + 1) * PAGE_SIZE);
                    page[(lo - p * PAGE_SIZE) as usize..(hi - p * PAGE_SIZE) as usize]
                        .copy_from_slice(&data[(lo - offset) as usize..(hi - offset) as usize]);
                    cache.dirty.insert(p);
                }
            }
        }
        self.clock.advance(cost);
        Ok(())
    }

    pub fn win_get(&mut self, rank: u32, id: u64, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.fire_due()?;
        let info = self.windows.info(id)?.clone();
        check_bounds(&info, offset, len)?;
        let cost = self.window_hop(rank, &info, "WIN_GET", len)?;
        let out = match info.object {
            None => {
                let mem = self
                    .windows
                    .memory
                    .get(&id)
                    .ok_or(Error::UnknownWindow(id))?;
                mem[offset as usize..(offset + len) as usize].to_vec()
            }
            Some(object) => {
                let end = offset + len;
                let first = offset / PAGE_SIZE;
                let last = end.div_ceil(PAGE_SIZE);
                let cache = self.windows.caches.entry(id).or_default();
                let missing: Vec<u64> = (first..last)
                    .filter(|p| !cache.pages.contains_key(p))
                    .collect();
                let fetched = self.read_pages(info.owner, object, &missing)?;
                let cache = self.windows.caches.entry(id).or_default();
                let mut out = Vec::with_capacity(len as usize);
                for p in first..last {
                    let page = cache
                        .pages
                        .get(&p)
                        .or_else(|| fetched.get(&p))
                        .expect("page loaded");
                    let lo = offset.max(p * PAGE_SIZE);
                    let hi = end.min((p + 1) * PAGE_SIZE);
                    out.extend_from_slice(
                        &page[(lo - p * PAGE_SIZE) as usize..(hi - p * PAGE_SIZE) as usize],
                    );
                }
                out
            }
        };
        self.clock.advance(cost);
        Ok(out)
    }

    /// Reads pages from the backing object in contiguous runs, charged to
    /// the owner's node. Pages are not cached.
    fn read_pages(
        &mut self,
        owner: u32,
        object: ObjectId,
        pages: &[u64],
    ) -> Result<BTreeMap<u64, Vec<u8>>> {
        let mut out = BTreeMap::new();
        let node = self.rank_node(owner);
        for run in runs(pages) {
            let (start, count) = (run[0], run.len() as u64);
            let bytes = self.with_store(node, |s| s.obj_read(object, start, count))?;
            for (i, chunk) in bytes.chunks_exact(PAGE_SIZE as usize).enumerate() {
                out.insert(start + i as u64, chunk.to_vec());
            }
        }
        Ok(out)
    }

    /// Makes every put so far durable. A no-op for memory windows and for
    /// windows without dirty pages.
    pub fn win_sync(&mut self, rank: u32, id: u64) -> Result<()> {
        self.fire_due()?;
        let info = self.windows.info(id)?.clone();
        let Some(object) = info.object else {
            return Ok(());
        };
        let cache = self.windows.caches.entry(id).or_default();
        if cache.dirty.is_empty() {
            return Ok(());
        }
        let dirty: Vec<u64> = cache.dirty.iter().copied().collect();
        let mut writes = Vec::new();
        let mut bytes = 0u64;
        for run in runs(&dirty) {
            let mut data = Vec::with_capacity(run.len() * PAGE_SIZE as usize);
            for p in run {
                data.extend_from_slice(&cache.pages[p]);
            }
            bytes += data.len() as u64;
            writes.push((run[0], data));
        }
        let from = self.rank_node(rank);
        let owner = self.rank_node(info.owner);
        let hop = self.send(from, owner, "WIN_SYNC", 0)?;
        self.clock.advance(hop);
        self.with_store(owner, |s| {
            let mut txn = s.begin();
            for (start, data) in writes {
                txn.obj_write(object, start, data);
            }
            s.commit(&mut txn).map(|_| ())
        })?;
        if let Some(cache) = self.windows.caches.get_mut(&id) {
            cache.dirty.clear();
        }
        self.addb.emit(
            self.now(),
            owner,
            Subsystem::Window,
            "sync",
            bytes as f64,
            tags([("window", id.to_string())]),
        );
        Ok(())
    }

    /// Drops clean cached pages of a window so later gets go to storage.
    pub fn win_evict_clean(&mut self, id: u64) {
        if let Some(cache) = self.windows.caches.get_mut(&id) {
            let dirty = cache.dirty.clone();
            cache.pages.retain(|p, _| dirty.contains(p));
        }
    }

    pub fn win_put_f64s(&mut self, rank: u32, id: u64, first: u64, values: &[f64]) -> Result<()> {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.win_put(rank, id, first * 8, &bytes)
    }

    pub fn win_get_f64s(&mut self, rank: u32, id: u64, first: u64, count: u64) -> Result<Vec<f64>> {
        let bytes = self.win_get(rank, id, first * 8, count * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// The four STREAM kernels over windows `a`, `b`, `c` of `n` f64
    /// elements each, issued by `rank` in chunks and synced after every
    /// kernel. Byte counts follow STREAM: 16n for copy and scale, 24n for
    /// add and triad.
    pub fn stream_kernels(
        &mut self,
        rank: u32,
        windows: [u64; 3],
        q: f64,
        n: u64,
    ) -> Result<StreamKernelReport> {
        for w in windows {
            let size = self.windows.info(w)?.size;
            if size != n * 8 {
                return Err(Error::SizeMismatch(format!(
                    "window {w} holds {size} bytes, need {}",
                    n * 8
                )));
            }
        }
        let [a, b, c] = windows;
        const CHUNK: u64 = 8192;
        let kernel = |cl: &mut Cluster,
                      srcs: &[u64],
                      dst: u64,
                      op: &dyn Fn(&[Vec<f64>], usize) -> f64,
                      bytes: u64|
         -> Result<KernelStats> {
            let t0 = cl.now();
            let mut i = 0;
            while i < n {
                let count = CHUNK.min(n - i);
                let inputs: Vec<Vec<f64>> = srcs
                    .iter()
                    .map(|s| cl.win_get_f64s(rank, *s, i, count))
                    .collect::<Result<_>>()?;
                let out: Vec<f64> = (0..count as usize).map(|j| op(&inputs, j)).collect();
                cl.win_put_f64s(rank, dst, i, &out)?;
                i += count;
            }
            cl.win_sync(rank, dst)?;
            Ok(KernelStats {
                bytes,
                time: cl.now() - t0,
            })
        };
        let copy = kernel(self, &[a], c, &|x, j| x[0][j], 16 * n)?;
        let scale = kernel(self, &[c], b, &|x, j| q * x[0][j], 16 * n)?;
        let add = kernel(self, &[a, b], c, &|x, j| x[0][j] + x[1][j], 24 * n)?;
        let triad = kernel(self, &[b, c], a, &|x, j| x[0][j] + q * x[1][j], 24 * n)?;
        let report = StreamKernelReport {
            copy,
            scale,
            add,
            triad,
        };
        for (name, k) in report.kernels() {
            self.addb.emit(
                self.now(),
                self.rank_node(rank),
                Subsystem::Window,
                "stream_kernel",
                k.time,
                tags([("kernel", name.to_string()), ("bytes", k.bytes.to_string())]),
            );
        }
        Ok(report)
    }
}

fn backing_name(b: Backing) -> String {
    match b {
        Backing::Memory => "memory".into(),
        Backing::Storage { tier } => format!("storage{}", tier.0),
    }
}

/// Splits sorted page numbers into runs of consecutive pages.
fn runs(pages: &[u64]) -> Vec<&[u64]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pages.len() {
        if i == pages.len() || pages[i] != pages[i - 1] + 1 {
            if i > start {
                out.push(&pages[start..i]);
            }
            start = i;
        }
    }
    out
}
