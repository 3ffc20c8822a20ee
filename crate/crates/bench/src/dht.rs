//! Distributed hash table over one-sided windows: each rank owns a local
//! volume of slots plus an overflow heap for collisions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use sage_core::checksum::fnv1a64;
use sage_core::window::Backing;
use sage_core::{Cluster, Error};

use crate::config::{BackingChoice, DhtParams, Workload};
use crate::error::Result;
use crate::results::emit_result;

/// key, value, next heap index (0 = none), occupied flag; u64 each.
pub const ENTRY_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhtCapacity {
    pub per_process: u64,
    pub global: u64,
    pub global_excluding_overflow: u64,
}

/// Element capacity of a table of `processes` ranks with `local_volume`
/// slots each and an overflow heap `overflow` times the local volume.
pub fn dht_capacity(processes: u64, local_volume: u64, overflow: u64) -> DhtCapacity {
    let per_process = local_volume * (1 + overflow);
    DhtCapacity {
        per_process,
        global: processes * per_process,
        global_excluding_overflow: processes * local_volume,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Entry {
    key: u64,
    value: u64,
    next: u64,
    occupied: bool,
}

impl Entry {
    fn encode(&self) -> Vec<u8> {
        [self.key, self.value, self.next, self.occupied as u64]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    fn decode(b: &[u8]) -> Self {
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        Entry {
            key: w(0),
            value: w(1),
            next: w(2),
            occupied: w(3) != 0,
        }
    }
}

/// The windows of one table. Heap entry 0 holds the bump counter.
#[derive(Debug, Clone)]
pub struct Dht {
    volumes: Vec<u64>,
    heaps: Vec<u64>,
    local_volume: u64,
    heap_entries: u64,
}

impl Dht {
    pub fn create(
        cl: &mut Cluster,
        processes: u32,
        local_volume: u64,
        overflow: u64,
        backing: Backing,
    ) -> Result<Self> {
        let heap_entries = local_volume * overflow;
        let mut volumes = Vec::new();
        let mut heaps = Vec::new();
        for rank in 0..processes {
            volumes.push(cl.win_alloc(rank, local_volume * ENTRY_BYTES, backing)?);
            heaps.push(cl.win_alloc(rank, (heap_entries + 1) * ENTRY_BYTES, backing)?);
        }
        Ok(Dht {
            volumes,
            heaps,
            local_volume,
            heap_entries,
        })
    }

    fn home(&self, key: u64) -> (usize, u64) {
        let h = fnv1a64(&key.to_le_bytes());
        let p = self.volumes.len() as u64;
        ((h % p) as usize, (h / p) % self.local_volume)
    }

    fn read(cl: &mut Cluster, rank: u32, window: u64, index: u64) -> Result<Entry> {
        Ok(Entry::decode(&cl.win_get(
            rank,
            window,
            index * ENTRY_BYTES,
            ENTRY_BYTES,
        )?))
    }

    fn write(cl: &mut Cluster, rank: u32, window: u64, index: u64, e: &Entry) -> Result<()> {
        Ok(cl.win_put(rank, window, index * ENTRY_BYTES, &e.encode())?)
    }

    /// Inserts or updates `key` with one-sided accesses issued by `rank`.
    pub fn put(&self, cl: &mut Cluster, rank: u32, key: u64, value: u64) -> Result<()> {
        let (owner, slot) = self.home(key);
        let (volume, heap) = (self.volumes[owner], self.heaps[owner]);
        let head = Self::read(cl, rank, volume, slot)?;
        if !head.occupied {
            let e = Entry {
                key,
                value,
                next: 0,
                occupied: true,
            };
            return Self::write(cl, rank, volume, slot, &e);
        }
        let (mut at_window, mut at_index, mut at) = (volume, slot, head);
        loop {
            if at.key == key {
                at.value = value;
                return Self::write(cl, rank, at_window, at_index, &at);
            }
            if at.next == 0 {
                break;
            }
            at_window = heap;
            at_index = at.next;
            at = Self::read(cl, rank, heap, at_index)?;
        }
        let mut header = Self::read(cl, rank, heap, 0)?;
        if header.key >= self.heap_entries {
            return Err(
                Error::CapacityExceeded(format!("overflow heap of rank {owner} is full")).into(),
            );
        }
        header.key += 1;
        let index = header.key;
        Self::write(cl, rank, heap, 0, &header)?;
        let e = Entry {
            key,
            value,
            next: 0,
            occupied: true,
        };
        Self::write(cl, rank, heap, index, &e)?;
        at.next = index;
        Self::write(cl, rank, at_window, at_index, &at)
    }

    pub fn get(&self, cl: &mut Cluster, rank: u32, key: u64) -> Result<Option<u64>> {
        let (owner, slot) = self.home(key);
        let mut at = Self::read(cl, rank, self.volumes[owner], slot)?;
        if !at.occupied {
            return Ok(None);
        }
        loop {
            if at.key == key {
                return Ok(Some(at.value));
            }
            if at.next == 0 {
                return Ok(None);
            }
            at = Self::read(cl, rank, self.heaps[owner], at.next)?;
        }
    }

    /// Entries taken from the overflow heaps.
    pub fn overflow_used(&self, cl: &mut Cluster) -> Result<u64> {
        let mut used = 0;
        for (rank, &heap) in self.heaps.iter().enumerate() {
            used += Self::read(cl, rank as u32, heap, 0)?.key;
        }
        Ok(used)
    }

    pub fn sync(&self, cl: &mut Cluster) -> Result<()> {
        for (rank, (&v, &h)) in self.volumes.iter().zip(&self.heaps).enumerate() {
            cl.win_sync(rank as u32, v)?;
            cl.win_sync(rank as u32, h)?;
        }
        Ok(())
    }

    pub fn free(self, cl: &mut Cluster) -> Result<()> {
        for w in self.volumes.into_iter().chain(self.heaps) {
            cl.win_free(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhtRun {
    pub backing: BackingChoice,
    pub inserted: u64,
    pub found: u64,
    pub overflow_used: u64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhtOutcome {
    pub verified: bool,
    pub capacity: DhtCapacity,
    pub runs: Vec<DhtRun>,
}

pub fn run_dht(cl: &mut Cluster, params: &DhtParams) -> Result<DhtOutcome> {
    let capacity = dht_capacity(
        params.processes as u64,
        params.local_volume,
        params.overflow,
    );
    emit_result(
        cl,
        Workload::Dht,
        "capacity.per_process",
        capacity.per_process as f64,
    );
    emit_result(cl, Workload::Dht, "capacity.global", capacity.global as f64);
    emit_result(
        cl,
        Workload::Dht,
        "capacity.global_excluding_overflow",
        capacity.global_excluding_overflow as f64,
    );
    let mut outcome = DhtOutcome {
        verified: true,
        capacity,
        runs: Vec::new(),
    };
    for &choice in &params.backings {
        let backing = match choice {
            BackingChoice::Memory => Backing::Memory,
            BackingChoice::Storage => Backing::storage(),
        };
        let pairs: Vec<(u64, u64)> = (0..params.ops)
            .map(|_| (cl.rng().gen(), cl.rng().gen()))
            .collect();
        let t0 = cl.now();
        let table = Dht::create(
            cl,
            params.processes,
            params.local_volume,
            params.overflow,
            backing,
        )?;
        let mut oracle = BTreeMap::new();
        for (i, &(k, v)) in pairs.iter().enumerate() {
            table.put(cl, i as u32 % params.processes, k, v)?;
            oracle.insert(k, v);
        }
        table.sync(cl)?;
        let mut found = 0;
        let mut ok = true;
        for (i, (k, v)) in oracle.iter().enumerate() {
            let got = table.get(cl, (i as u32 + 1) % params.processes, *k)?;
            found += got.is_some() as u64;
            ok &= got == Some(*v);
        }
        let time = cl.now() - t0;
        let overflow_used = table.overflow_used(cl)?;
        table.free(cl)?;
        let b = choice.as_str();
        emit_result(cl, Workload::Dht, &format!("{b}.time"), time);
        emit_result(
            cl,
            Workload::Dht,
            &format!("{b}.inserted"),
            oracle.len() as f64,
        );
        emit_result(cl, Workload::Dht, &format!("{b}.found"), found as f64);
        emit_result(
            cl,
            Workload::Dht,
            &format!("{b}.overflow_used"),
            overflow_used as f64,
        );
        emit_result(cl, Workload::Dht, &format!("{b}.verified"), ok as u8 as f64);
        outcome.verified &= ok;
        outcome.runs.push(DhtRun {
            backing: choice,
            inserted: oracle.len() as u64,
            found,
            overflow_used,
            time,
        });
    }
    emit_result(cl, Workload::Dht, "verified", outcome.verified as u8 as f64);
    Ok(outcome)
}
