//! Block-granular objects over tier devices, with XOR parity maintenance
//! and degraded reads.
//!
//! Object blocks map to units through the object's [`Layout`]; each unit is
//! backed by a run of device blocks allocated on first write. An unallocated
//! unit reads as zeros. With at most one unavailable device per parity group
//! every read and write still succeeds, using
//! `unit = parity ^ xor(other data units)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BlockLocation, BlockSpec, DeviceId, Extent, Layout, ObjectId, StripeGroup, TierId, UnitKey,
};
use crate::store::Store;
use crate::telemetry::{tags, Subsystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub id: ObjectId,
    pub spec: BlockSpec,
    pub layout: Layout,
    pub size_blocks: u64,
    pub created_at: f64,
    /// Unit -> first device block of its allocation.
    pub units: BTreeMap<UnitKey, u64>,
}

impl ObjectMeta {
    pub fn new(id: ObjectId, spec: BlockSpec, layout: Layout, created_at: f64) -> Self {
        Self {
            id,
            spec,
            layout,
            size_blocks: 0,
            created_at,
            units: BTreeMap::new(),
        }
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_blocks * self.spec.block_size()
    }

    /// Start of the extent holding `block` (0 for flat layouts).
    pub fn extent_of(&self, block: u64) -> Option<Extent> {
        match &self.layout {
            Layout::Tiered { extents } => extents
                .iter()
                .find(|(e, _)| e.contains(block))
                .map(|(e, _)| *e),
            _ => Some(Extent::new(0, self.size_blocks.max(1))),
        }
    }
}

/// First-fit bitmap allocator over one device's blocks.
///
/// Freed runs are parked until the next checkpoint so that a block whose
/// previous contents are still reachable by log replay is never handed out
/// to a write that the log does not carry.
#[derive(Debug, Clone)]
pub struct Allocator {
    bits: Vec<u64>,
    capacity: u64,
    used: u64,
    pending: Vec<(u64, u64)>,
    pending_blocks: u64,
    hint: u64,
}

impl Allocator {
    pub fn new(capacity: u64) -> Self {
        Self {
            bits: vec![0; capacity.div_ceil(64) as usize],
            capacity,
            used: 0,
            pending: Vec::new(),
            pending_blocks: 0,
            hint: 0,
        }
    }

    fn get(&self, i: u64) -> bool {
        self.bits[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    fn set(&mut self, i: u64, v: bool) {
        let w = &mut self.bits[(i / 64) as usize];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Blocks held by live data, excluding runs parked for release.
    pub fn live(&self) -> u64 {
        self.used - self.pending_blocks
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.live()
    }

    /// Blocks that can be handed out right now.
    pub fn unused(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn pending_blocks(&self) -> u64 {
        self.pending_blocks
    }

    pub fn allocate(&mut self, len: u64) -> Option<u64> {
        if len == 0 || len > self.capacity {
            return None;
        }
        let try_from = |a: &Self, from: u64, to: u64| -> Option<u64> {
            let mut start = from;
            while start + len <= to {
                match (start..start + len).find(|&i| a.get(i)) {
                    None => return Some(start),
                    Some(busy) => start = busy + 1,
                }
            }
            None
        };
        let found = try_from(self, self.hint, self.capacity)
            .or_else(|| try_from(self, 0, (self.hint + len).min(self.capacity)))?;
        self.mark(found, len);
        self.hint = found + len;
        Some(found)
    }

    /// Marks a run as used. Idempotent.
    pub fn mark(&mut self, start: u64, len: u64) {
        for i in start..start + len {
            if !self.get(i) {
                self.set(i, true);
                self.used += 1;
            }
        }
    }

    /// Parks a run until [`Allocator::release_pending`].
    pub fn retire(&mut self, start: u64, len: u64) {
        self.pending.push((start, len));
        self.pending_blocks += len;
    }

    pub fn release_pending(&mut self) {
        for (start, len) in std::mem::take(&mut self.pending) {
            for i in start..start + len {
                if self.get(i) {
                    self.set(i, false);
                    self.used -= 1;
                }
            }
        }
        self.pending_blocks = 0;
        self.hint = 0;
    }

    /// Immediately frees a run that was never published.
    pub fn unmark(&mut self, start: u64, len: u64) {
        for i in start..start + len {
            if self.get(i) {
                self.set(i, false);
                self.used -= 1;
            }
        }
    }
}

pub(crate) fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= *b;
    }
}

impl Store {
    pub(crate) fn unit_device_blocks(&self, spec: &BlockSpec) -> u64 {
        spec.block_size().div_ceil(self.config.device_block_size)
    }

    pub fn device_available(&self, device: DeviceId) -> bool {
        !self.unreachable.contains(&device)
            && self
                .devices
                .get(device)
                .map(|d| d.is_online())
                .unwrap_or(false)
    }

    pub(crate) fn read_unit(&mut self, meta: &ObjectMeta, key: UnitKey) -> Result<Vec<u8>> {
        let bs = meta.spec.block_size() as usize;
        let Some(&phys) = meta.units.get(&key) else {
            return Ok(vec![0; bs]);
        };
        if self.unreachable.contains(&key.device) {
            return Err(Error::DeviceFailed(key.device));
        }
        let device = self.devices.get(key.device)?.clone();
        let mut out = Vec::with_capacity(bs.max(device.block_size() as usize));
        for i in 0..self.unit_device_blocks(&meta.spec) {
            let (block, cost) = device.read_block(phys + i)?;
            self.trace.read(key.device, device.block_size(), cost);
            out.extend_from_slice(&block);
        }
        out.truncate(bs);
        Ok(out)
    }

    pub(crate) fn write_unit(
        &mut self,
        meta: &mut ObjectMeta,
        key: UnitKey,
        data: &[u8],
    ) -> Result<()> {
        if self.unreachable.contains(&key.device) {
            return Err(Error::DeviceFailed(key.device));
        }
        let device = self.devices.get(key.device)?.clone();
        let run = self.unit_device_blocks(&meta.spec);
        let phys = match meta.units.get(&key) {
            Some(&p) => p,
            None => {
                let p = self.allocate(key.device, run)?;
                meta.units.insert(key, p);
                p
            }
        };
        let dbs = device.block_size() as usize;
        for i in 0..run as usize {
            let lo = i * dbs;
            let cost = if lo + dbs <= data.len() {
                device.write_block(phys + i as u64, &data[lo..lo + dbs])?
            } else {
                let mut padded = vec![0u8; dbs];
                padded[..data.len() - lo].copy_from_slice(&data[lo..]);
                device.write_block(phys + i as u64, &padded)?
            };
            self.trace.write(key.device, dbs as u64, cost);
        }
        Ok(())
    }

    pub(crate) fn allocate(&mut self, device: DeviceId, run: u64) -> Result<u64> {
        let alloc = self
            .alloc
            .get_mut(&device)
            .ok_or(Error::UnknownDevice(device))?;
        if let Some(p) = alloc.allocate(run) {
            return Ok(p);
        }
        if alloc.pending_blocks > 0 && !self.replaying && !self.applying {
            self.checkpoint()?;
            if let Some(p) = self.alloc.get_mut(&device).and_then(|a| a.allocate(run)) {
                return Ok(p);
            }
        }
        Err(Error::OutOfCapacity { device })
    }

    pub(crate) fn retire_units<'a>(
        &mut self,
        spec: &BlockSpec,
        units: impl IntoIterator<Item = (&'a UnitKey, &'a u64)>,
    ) {
        let run = self.unit_device_blocks(spec);
        for (key, &phys) in units {
            if let Some(a) = self.alloc.get_mut(&key.device) {
                a.retire(phys, run);
            }
        }
    }

    /// Reads one object block, reconstructing it if its device is gone.
    pub(crate) fn read_block_of(&mut self, meta: &ObjectMeta, block: u64) -> Result<Vec<u8>> {
        match meta.layout.locate(block)? {
            BlockLocation::Striped { position, .. } => {
                let group = meta.layout.stripe_group(block)?.expect("striped");
                self.read_group_unit(meta, &group, position as usize)
            }
            BlockLocation::Mirrored { replicas } => {
                let mut any_available = false;
                for unit in &replicas {
                    if self.device_available(unit.device) {
                        any_available = true;
                        if meta.units.contains_key(unit) {
                            return self.read_unit(meta, *unit);
                        }
                    }
                }
                if any_available {
                    Ok(vec![0; meta.spec.block_size() as usize])
                } else {
                    Err(Error::UnrecoverableLoss {
                        objects: vec![meta.id],
                    })
                }
            }
        }
    }

    /// Reads data unit `pos` of a parity group, reconstructing if needed.
    pub(crate) fn read_group_unit(
        &mut self,
        meta: &ObjectMeta,
        group: &StripeGroup,
        pos: usize,
    ) -> Result<Vec<u8>> {
        let target = group.data[pos];
        if self.device_available(target.device) {
            return self.read_unit(meta, target);
        }
        let loss = || Error::UnrecoverableLoss {
            objects: vec![meta.id],
        };
        let Some(parity) = group.parity else {
            return Err(loss());
        };
        let mut acc = self.read_available(meta, parity).ok_or_else(loss)??;
        for unit in group.data.iter().filter(|u| **u != target) {
            let other = self.read_available(meta, *unit).ok_or_else(loss)??;
            xor_into(&mut acc, &other);
        }
        Ok(acc)
    }

    fn read_available(&mut self, meta: &ObjectMeta, unit: UnitKey) -> Option<Result<Vec<u8>>> {
        self.device_available(unit.device)
            .then(|| self.read_unit(meta, unit))
    }

    /// Units a write of `count` blocks at `start` would newly allocate.
    pub(crate) fn units_for_write(
        &self,
        meta: &ObjectMeta,
        start: u64,
        count: u64,
    ) -> Result<BTreeSet<UnitKey>> {
        let mut out = BTreeSet::new();
        for block in start..start + count {
            match meta.layout.locate(block)? {
                BlockLocation::Mirrored { replicas } => {
                    out.extend(
                        replicas
                            .into_iter()
                            .filter(|u| self.device_available(u.device)),
                    );
                }
                BlockLocation::Striped { position, .. } => {
                    let group = meta.layout.stripe_group(block)?.expect("striped");
                    out.insert(group.data[position as usize]);
                    out.extend(group.parity);
                }
            }
        }
        out.retain(|u| !meta.units.contains_key(u) && self.device_available(u.device));
        Ok(out)
    }

    /// Checks that a write of `count` blocks at `start` can be placed.
    pub(crate) fn check_writable(&self, meta: &ObjectMeta, start: u64, count: u64) -> Result<()> {
        let loss = || Error::UnrecoverableLoss {
            objects: vec![meta.id],
        };
        let mut block = start;
        while block < start + count {
            match meta.layout.locate(block)? {
                BlockLocation::Mirrored { replicas } => {
                    if !replicas.iter().any(|u| self.device_available(u.device)) {
                        return Err(loss());
                    }
                    block += 1;
                }
                BlockLocation::Striped { .. } => {
                    let group = meta.layout.stripe_group(block)?.expect("striped");
                    let down = group
                        .data
                        .iter()
                        .chain(group.parity.iter())
                        .filter(|u| !self.device_available(u.device))
                        .count();
                    let tolerated = group.parity.is_some() as usize;
                    if down > tolerated {
                        return Err(loss());
                    }
                    let seg_end = meta.layout.segment_bounds(block)?.end_block();
                    block = (group.first_block + group.data.len() as u64).min(seg_end);
                }
            }
        }
        Ok(())
    }

    /// Writes whole blocks into `meta`, maintaining parity.
    pub(crate) fn write_blocks(
        &mut self,
        meta: &mut ObjectMeta,
        start: u64,
        data: &[u8],
    ) -> Result<()> {
        let bs = meta.spec.block_size() as usize;
        if !data.len().is_multiple_of(bs) {
            return Err(Error::BadLength {
                expected: (data.len().div_ceil(bs) * bs) as u64,
                actual: data.len() as u64,
            });
        }
        let count = (data.len() / bs) as u64;
        let end = start + count;
        let slice = |b: u64| &data[((b - start) as usize) * bs..((b - start) as usize + 1) * bs];
        let mut block = start;
        while block < end {
            match meta.layout.locate(block)? {
                BlockLocation::Mirrored { replicas } => {
                    let mut wrote = false;
                    for unit in replicas {
                        if self.device_available(unit.device) {
                            self.write_unit(meta, unit, slice(block))?;
                            wrote = true;
                        }
                    }
                    if !wrote {
                        return Err(Error::UnrecoverableLoss {
                            objects: vec![meta.id],
                        });
                    }
                    block += 1;
                }
                BlockLocation::Striped { .. } => {
                    let group = meta.layout.stripe_group(block)?.expect("striped");
                    let n = group.data.len() as u64;
                    let seg_end = meta.layout.segment_bounds(block)?.end_block();
                    let group_end = (group.first_block + n).min(end).min(seg_end);
                    let touched = |pos: u64| {
                        let b = group.first_block + pos;
                        b >= block && b < group_end
                    };
                    match group.parity {
                        None => {
                            for pos in (block - group.first_block)..(group_end - group.first_block)
                            {
                                let unit = group.data[pos as usize];
                                if !self.device_available(unit.device) {
                                    return Err(Error::UnrecoverableLoss {
                                        objects: vec![meta.id],
                                    });
                                }
                                self.write_unit(meta, unit, slice(group.first_block + pos))?;
                            }
                        }
                        Some(parity_unit) => {
                            let mut values = Vec::with_capacity(n as usize);
                            for pos in 0..n {
                                if touched(pos) {
                                    values.push(None);
                                } else {
                                    values.push(Some(self.read_group_unit(
                                        meta,
                                        &group,
                                        pos as usize,
                                    )?));
                                }
                            }
                            let mut parity = vec![0u8; bs];
                            for pos in 0..n {
                                let v = match &values[pos as usize] {
                                    Some(v) => v.as_slice(),
                                    None => slice(group.first_block + pos),
                                };
                                xor_into(&mut parity, v);
                            }
                            for pos in 0..n {
                                let unit = group.data[pos as usize];
                                if touched(pos) && self.device_available(unit.device) {
                                    self.write_unit(meta, unit, slice(group.first_block + pos))?;
                                }
                            }
                            if self.device_available(parity_unit.device) {
                                self.write_unit(meta, parity_unit, &parity)?;
                            }
                        }
                    }
                    block = group_end;
                }
            }
        }
        meta.size_blocks = meta.size_blocks.max(end);
        Ok(())
    }

    pub(crate) fn emit_access(&self, meta: &ObjectMeta, start: u64, count: u64, kind: &str) {
        if self.replaying || count == 0 {
            return;
        }
        let now = self.clock.now();
        let mut seen = BTreeSet::new();
        for b in start..start + count {
            if let Some(e) = meta.extent_of(b) {
                if seen.insert(e.start_block) {
                    let blocks = (start + count).min(e.end_block()).saturating_sub(b).max(1);
                    self.addb.emit(
                        now,
                        self.config.node,
                        Subsystem::Object,
                        "access",
                        blocks as f64,
                        tags([
                            ("object", meta.id.to_string()),
                            ("extent", e.start_block.to_string()),
                            ("kind", kind.to_string()),
                        ]),
                    );
                }
            }
        }
    }

    pub fn obj_read(
        &mut self,
        id: ObjectId,
        start_block: u64,
        block_count: u64,
    ) -> Result<Vec<u8>> {
        self.ensure_alive()?;
        let meta = self
            .catalog
            .objects
            .get(&id)
            .cloned()
            .ok_or(Error::UnknownObject(id))?;
        let bs = meta.spec.block_size() as usize;
        let mut out = Vec::with_capacity(block_count as usize * bs);
        let before = self.trace.clone();
        for b in start_block..start_block + block_count {
            if b >= meta.size_blocks {
                out.resize(out.len() + bs, 0);
                continue;
            }
            out.extend(self.read_block_of(&meta, b)?);
        }
        self.emit_access(
            &meta,
            start_block,
            block_count.min(meta.size_blocks.saturating_sub(start_block)),
            "read",
        );
        self.emit_tier_bytes(&before, "read");
        Ok(out)
    }

    pub fn obj_meta(&self, id: ObjectId) -> Result<&ObjectMeta> {
        self.catalog
            .objects
            .get(&id)
            .ok_or(Error::UnknownObject(id))
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectMeta> {
        self.catalog.objects.values()
    }

    /// Tier holding the extent that starts at `segment`.
    pub fn extent_tier(&self, meta: &ObjectMeta, segment: u64) -> Option<TierId> {
        let (_, flat) = meta.layout.resolve(segment).ok()?;
        let dev = *flat.devices().iter().next()?;
        self.devices.get(dev).ok().map(|d| d.tier())
    }

    fn emit_tier_bytes(&self, before: &crate::store::IoTrace, kind: &str) {
        if self.replaying {
            return;
        }
        let delta = self.trace.since(before);
        let map = if kind == "read" {
            &delta.bytes_read
        } else {
            &delta.bytes_written
        };
        let mut per_tier: BTreeMap<TierId, u64> = BTreeMap::new();
        for (dev, bytes) in map {
            if let Ok(d) = self.devices.get(*dev) {
                *per_tier.entry(d.tier()).or_default() += bytes;
            }
        }
        let now = self.clock.now();
        for (tier, bytes) in per_tier {
            self.addb.emit(
                now,
                self.config.node,
                Subsystem::Object,
                if kind == "read" {
                    "tier_read_bytes"
                } else {
                    "tier_write_bytes"
                },
                bytes as f64,
                tags([("tier", tier.0)]),
            );
        }
    }

    pub(crate) fn apply_obj_write(&mut self, id: ObjectId, start: u64, data: &[u8]) -> Result<()> {
        let mut meta = self
            .catalog
            .objects
            .remove(&id)
            .ok_or(Error::UnknownObject(id))?;
        let before = self.trace.clone();
        let result = self.write_blocks(&mut meta, start, data);
        let count = data.len() as u64 / meta.spec.block_size();
        if result.is_ok() {
            self.emit_access(&meta, start, count, "write");
        }
        self.emit_tier_bytes(&before, "write");
        self.catalog.objects.insert(id, meta);
        result
    }

    pub(crate) fn apply_obj_delete(&mut self, id: ObjectId) -> Result<()> {
        let meta = self
            .catalog
            .objects
            .remove(&id)
            .ok_or(Error::UnknownObject(id))?;
        self.retire_units(&meta.spec, meta.units.iter());
        self.catalog.deleted.insert(id);
        for c in self.catalog.containers.values_mut() {
            c.members.remove(&id);
        }
        Ok(())
    }

    /// Installs new metadata whose new units were written before commit.
    pub(crate) fn apply_set_meta(&mut self, meta: ObjectMeta) -> Result<()> {
        let old = self
            .catalog
            .objects
            .remove(&meta.id)
            .ok_or(Error::UnknownObject(meta.id))?;
        let run = self.unit_device_blocks(&meta.spec);
        let new_phys: BTreeSet<(DeviceId, u64)> =
            meta.units.iter().map(|(k, &p)| (k.device, p)).collect();
        let stale: Vec<(UnitKey, u64)> = old
            .units
            .iter()
            .filter(|(k, p)| !new_phys.contains(&(k.device, **p)))
            .map(|(k, p)| (*k, *p))
            .collect();
        for (key, phys) in &stale {
            if let Some(a) = self.alloc.get_mut(&key.device) {
                a.retire(*phys, run);
            }
        }
        for (key, &phys) in &meta.units {
            if let Some(a) = self.alloc.get_mut(&key.device) {
                a.mark(phys, run);
            }
        }
        self.catalog.objects.insert(meta.id, meta);
        Ok(())
    }
}
