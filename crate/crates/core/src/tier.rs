//! Emulated block devices grouped into storage tiers.
//!
//! Each device is one sparse backing file:
//!
//! ```text
//! [0..8)   magic "SAGEDEV1"
//! [8..12)  version u32 LE
//! [12..20) block_size u64 LE
//! [20..28) capacity (bytes) u64 LE
//! [64..)   blocks, block i at 64 + i * block_size
//! ```
//!
//! Performance is never real: every operation returns a virtual cost of
//! `latency + len / bandwidth` seconds.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{CrashInjector, WriteGate};
use crate::model::{DeviceId, TierId};

pub const DEVICE_MAGIC: &[u8; 8] = b"SAGEDEV1";
pub const DEVICE_VERSION: u32 = 1;
pub const DATA_OFFSET: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub capacity_bytes: u64,
    /// bytes per virtual second
    pub read_bw: f64,
    pub write_bw: f64,
    /// virtual seconds per operation
    pub latency: f64,
}

const GB: f64 = 1e9;
const MB: f64 = 1e6;
const MIB: u64 = 1 << 20;

impl DeviceProfile {
    /// Invented defaults that keep the tier ordering: NVRAM, flash, fast
    /// disk, archive.
    pub fn default_for(tier: TierId) -> Self {
        let (latency, bw, capacity) = match tier.0 {
            1 => (1e-6, 10.0 * GB, 256 * MIB),
            2 => (50e-6, 2.0 * GB, 1024 * MIB),
            3 => (5e-3, 200.0 * MB, 4096 * MIB),
            _ => (15e-3, 100.0 * MB, 16384 * MIB),
        };
        Self {
            capacity_bytes: capacity,
            read_bw: bw,
            write_bw: bw,
            latency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0
            || !(self.read_bw > 0.0)
            || !(self.write_bw > 0.0)
            || !(self.latency > 0.0)
        {
            return Err(Error::BadConfig(format!(
                "device profile values must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn write_cost(&self, len: u64) -> f64 {
        self.latency + len as f64 / self.write_bw
    }

    pub fn read_cost(&self, len: u64) -> f64 {
        self.latency + len as f64 / self.read_bw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceState {
    Online,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceCounters {
    pub reads: u64,
    pub writes: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub busy_time: f64,
}

struct DeviceInner {
    file: File,
    state: DeviceState,
    counters: DeviceCounters,
}

pub struct Device {
    id: DeviceId,
    tier: TierId,
    profile: DeviceProfile,
    block_size: u64,
    path: PathBuf,
    injector: Arc<CrashInjector>,
    inner: Mutex<DeviceInner>,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("id", &self.id)
            .field("tier", &self.tier)
            .field("path", &self.path)
            .finish()
    }
}

impl Device {
    /// Opens the backing file at `path`, creating it if absent.
    pub fn open(
        id: DeviceId,
        tier: TierId,
        profile: DeviceProfile,
        block_size: u64,
        path: impl Into<PathBuf>,
        injector: Arc<CrashInjector>,
    ) -> Result<Self> {
        profile.validate()?;
        crate::model::validate_block_size(block_size)?;
        let path = path.into();
        let exists = path.exists();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        if exists && file.metadata()?.len() >= DATA_OFFSET {
            let mut header = [0u8; 28];
            file.read_exact_at(&mut header, 0)?;
            if &header[..8] != DEVICE_MAGIC {
                return Err(Error::CorruptDevice(format!(
                    "{}: bad magic",
                    path.display()
                )));
            }
            let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
            let bs = u64::from_le_bytes(header[12..20].try_into().unwrap());
            let cap = u64::from_le_bytes(header[20..28].try_into().unwrap());
            if version != DEVICE_VERSION || bs != block_size || cap != profile.capacity_bytes {
                return Err(Error::CorruptDevice(format!(
                    "{}: header mismatch (version {version}, block {bs}, capacity {cap})",
                    path.display()
                )));
            }
        } else {
            write_header(&file, block_size, profile.capacity_bytes)?;
        }
        Ok(Self {
            id,
            tier,
            profile,
            block_size,
            path,
            injector,
            inner: Mutex::new(DeviceInner {
                file,
                state: DeviceState::Online,
                counters: DeviceCounters::default(),
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, DeviceInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn tier(&self) -> TierId {
        self.tier
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.profile.capacity_bytes / self.block_size
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn state(&self) -> DeviceState {
        self.lock().state
    }

    pub fn is_online(&self) -> bool {
        self.state() == DeviceState::Online
    }

    pub fn counters(&self) -> DeviceCounters {
        self.lock().counters
    }

    pub fn write_block(&self, index: u64, data: &[u8]) -> Result<f64> {
        let mut inner = self.lock();
        if inner.state == DeviceState::Failed {
            return Err(Error::DeviceFailed(self.id));
        }
        if index >= self.capacity_blocks() {
            return Err(Error::OutOfCapacity { device: self.id });
        }
        if data.len() as u64 != self.block_size {
            return Err(Error::BadLength {
                expected: self.block_size,
                actual: data.len() as u64,
            });
        }
        if self.injector.gate()? == WriteGate::Torn {
            return Err(Error::Crashed);
        }
        inner
            .file
            .write_all_at(data, DATA_OFFSET + index * self.block_size)?;
        let cost = self.profile.write_cost(data.len() as u64);
        inner.counters.writes += 1;
        inner.counters.bytes_written += data.len() as u64;
        inner.counters.busy_time += cost;
        Ok(cost)
    }

    pub fn read_block(&self, index: u64) -> Result<(Vec<u8>, f64)> {
        let mut inner = self.lock();
        if inner.state == DeviceState::Failed {
            return Err(Error::DeviceFailed(self.id));
        }
        if index >= self.capacity_blocks() {
            return Err(Error::OutOfCapacity { device: self.id });
        }
        let mut buf = vec![0u8; self.block_size as usize];
        let offset = DATA_OFFSET + index * self.block_size;
        let len = inner.file.metadata()?.len();
        if offset < len {
            let avail = ((len - offset) as usize).min(buf.len());
            inner.file.read_exact_at(&mut buf[..avail], offset)?;
        }
        let cost = self.profile.read_cost(self.block_size);
        inner.counters.reads += 1;
        inner.counters.bytes_read += self.block_size;
        inner.counters.busy_time += cost;
        Ok((buf, cost))
    }

    pub fn fail(&self) {
        self.lock().state = DeviceState::Failed;
    }

    /// Brings the device back. `wipe` models a replacement drive.
    pub fn restore(&self, wipe: bool) -> Result<()> {
        let mut inner = self.lock();
        if wipe {
            inner.file.set_len(0)?;
            write_header(&inner.file, self.block_size, self.profile.capacity_bytes)?;
        }
        inner.state = DeviceState::Online;
        Ok(())
    }
}

fn write_header(file: &File, block_size: u64, capacity: u64) -> Result<()> {
    let mut header = [0u8; DATA_OFFSET as usize];
    header[..8].copy_from_slice(DEVICE_MAGIC);
    header[8..12].copy_from_slice(&DEVICE_VERSION.to_le_bytes());
    header[12..20].copy_from_slice(&block_size.to_le_bytes());
    header[20..28].copy_from_slice(&capacity.to_le_bytes());
    file.write_all_at(&header, 0)?;
    Ok(())
}

/// All devices of a cluster, shared between the store and the harness.
#[derive(Debug, Default)]
pub struct DeviceSet {
    devices: BTreeMap<DeviceId, Arc<Device>>,
}

impl DeviceSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) `dev-<id>.img` in `dir` for every spec.
    pub fn open_dir(
        dir: &Path,
        block_size: u64,
        specs: &[(DeviceId, TierId, DeviceProfile)],
        injector: Arc<CrashInjector>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut set = Self::new();
        for (id, tier, profile) in specs {
            let path = dir.join(format!("dev-{}.img", id.0));
            set.insert(Device::open(
                *id,
                *tier,
                *profile,
                block_size,
                path,
                injector.clone(),
            )?);
        }
        Ok(set)
    }

    pub fn insert(&mut self, device: Device) {
        self.devices.insert(device.id(), Arc::new(device));
    }

    pub fn get(&self, id: DeviceId) -> Result<&Arc<Device>> {
        self.devices.get(&id).ok_or(Error::UnknownDevice(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Device>> {
        self.devices.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices.keys().copied()
    }

    pub fn in_tier(&self, tier: TierId) -> impl Iterator<Item = &Arc<Device>> {
        self.devices.values().filter(move |d| d.tier() == tier)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device(dir: &Path, injector: Arc<CrashInjector>) -> Device {
        let profile = DeviceProfile {
            capacity_bytes: 64 * 4096,
            read_bw: 1e9,
            write_bw: 5e8,
            latency: 1e-5,
        };
        Device::open(
            DeviceId(0),
            TierId(2),
            profile,
            4096,
            dir.join("d0.dev"),
            injector,
        )
        .unwrap()
    }

    #[test]
    fn write_cost_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dev = device(dir.path(), Arc::new(CrashInjector::new()));
        let data = vec![0xA5u8; 4096];
        let cost = dev.write_block(3, &data).unwrap();
        assert!((cost - (1e-5 + 4096.0 / 5e8)).abs() < 1e-15);
        let (back, rcost) = dev.read_block(3).unwrap();
        assert_eq!(back, data);
        assert!((rcost - (1e-5 + 4096.0 / 1e9)).abs() < 1e-15);
    }

    #[test]
    fn unwritten_blocks_are_zero() {
        let dir = tempfile::tempdir().unwrap();
        let dev = device(dir.path(), Arc::new(CrashInjector::new()));
        assert_eq!(dev.read_block(10).unwrap().0, vec![0u8; 4096]);
    }

    #[test]
    fn bad_length_and_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let dev = device(dir.path(), Arc::new(CrashInjector::new()));
        assert!(matches!(
            dev.write_block(0, &[0u8; 4095]),
            Err(Error::BadLength {
                expected: 4096,
                actual: 4095
            })
        ));
        assert!(matches!(
            dev.write_block(64, &[0u8; 4096]),
            Err(Error::OutOfCapacity { .. })
        ));
    }

    #[test]
    fn failure_and_restore() {
        let dir = tempfile::tempdir().unwrap();
        let dev = device(dir.path(), Arc::new(CrashInjector::new()));
        dev.write_block(1, &[7u8; 4096]).unwrap();
        dev.fail();
        assert!(matches!(dev.read_block(1), Err(Error::DeviceFailed(_))));
        assert!(matches!(
            dev.write_block(1, &[7u8; 4096]),
            Err(Error::DeviceFailed(_))
        ));
        dev.restore(false).unwrap();
        assert_eq!(dev.read_block(1).unwrap().0, vec![7u8; 4096]);
        dev.fail();
        dev.restore(true).unwrap();
        assert_eq!(dev.read_block(1).unwrap().0, vec![0u8; 4096]);
    }

    #[test]
    fn contents_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let inj = Arc::new(CrashInjector::new());
        {
            let dev = device(dir.path(), inj.clone());
            dev.write_block(5, &[9u8; 4096]).unwrap();
        }
        let dev = device(dir.path(), inj);
        assert_eq!(dev.read_block(5).unwrap().0, vec![9u8; 4096]);
        let mut raw = [0u8; 8];
        File::open(dir.path().join("d0.dev"))
            .unwrap()
            .read_exact_at(&mut raw, 0)
            .unwrap();
        assert_eq!(&raw, DEVICE_MAGIC);
    }

    #[test]
    fn default_profiles_are_ordered_by_tier() {
        let p: Vec<_> = TierId::all().map(DeviceProfile::default_for).collect();
        for w in p.windows(2) {
            assert!(w[0].latency < w[1].latency);
            assert!(w[0].capacity_bytes < w[1].capacity_bytes);
        }
    }

    #[test]
    fn identical_sequences_cost_the_same() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let dev = device(dir.path(), Arc::new(CrashInjector::new()));
            for i in 0..16 {
                dev.write_block(i, &[i as u8; 4096]).unwrap();
                dev.read_block(i / 2).unwrap();
            }
            dev.counters().busy_time
        };
        assert_eq!(run(), run());
    }
}
