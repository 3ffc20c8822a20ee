//! Hierarchical storage management: per-extent access statistics and
//! migration of extents between tiers.
//!
//! Access rates are exponentially weighted with decay `λ = ln 2 / half_life`:
//! an access at time `t` sets `rate = rate · e^{-λ (t - last)} + λ`, so a
//! steady stream of `r` accesses per second converges to `rate = r`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeviceId, Layout, ObjectId, TierId};
use crate::object::ObjectMeta;
use crate::store::Store;
use crate::telemetry::{tags, Addb, AddbRecord, RecordFilter, SubscriptionId, Subsystem};

/// `(object, first block of the extent)`.
pub type ExtentKey = (ObjectId, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessStats {
    pub read_count: u64,
    pub write_count: u64,
    pub last_access: f64,
    pub ewma_rate: f64,
}

impl AccessStats {
    pub fn record(&mut self, kind: AccessKind, t: f64, lambda: f64) {
        let t = t.max(self.last_access);
        self.ewma_rate = self.rate_at(t, lambda) + lambda;
        self.last_access = t;
        match kind {
            AccessKind::Read => self.read_count += 1,
            AccessKind::Write => self.write_count += 1,
        }
    }

    /// The rate decayed to time `t`.
    pub fn rate_at(&self, t: f64, lambda: f64) -> f64 {
        let dt = (t - self.last_access).max(0.0);
        self.ewma_rate * (-lambda * dt).exp()
    }
}

/// Occupancy fractions of one tier's capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Watermark {
    pub tier: TierId,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsmPolicy {
    /// accesses per virtual second
    pub promote_rate_threshold: f64,
    pub demote_rate_threshold: f64,
    /// virtual seconds without access after which an extent is cold
    pub demote_idle_threshold: f64,
    pub half_life: f64,
    pub watermarks: Vec<Watermark>,
}

impl Default for HsmPolicy {
    fn default() -> Self {
        Self {
            promote_rate_threshold: 0.05,
            demote_rate_threshold: 0.005,
            demote_idle_threshold: 300.0,
            half_life: 100.0,
            watermarks: TierId::all()
                .map(|tier| Watermark {
                    tier,
                    low: 0.7,
                    high: 0.9,
                })
                .collect(),
        }
    }
}

impl HsmPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(format!("hsm policy: {m}")));
        if !(self.half_life > 0.0) {
            return bad("half_life must be positive");
        }
        if !(self.demote_rate_threshold < self.promote_rate_threshold) {
            return bad("demote rate must be below promote rate");
        }
        if !(self.demote_idle_threshold >= 0.0) {
            return bad("negative idle threshold");
        }
        for w in &self.watermarks {
            if !(0.0 <= w.low && w.low < w.high && w.high <= 1.0) {
                return bad(&format!("tier {} watermarks out of order", w.tier.0));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        std::f64::consts::LN_2 / self.half_life
    }

    fn watermark(&self, tier: TierId) -> Option<&Watermark> {
        self.watermarks.iter().rev().find(|w| w.tier == tier)
    }

    fn high(&self, tier: TierId) -> f64 {
        self.watermark(tier).map_or(1.0, |w| w.high)
    }

    fn low(&self, tier: TierId) -> f64 {
        self.watermark(tier).map_or(1.0, |w| w.low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationAction {
    pub object: ObjectId,
    pub extent: u64,
    pub from_tier: TierId,
    pub to_tier: TierId,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtentInfo {
    pub key: ExtentKey,
    pub tier: TierId,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TierOccupancy {
    pub used: u64,
    pub capacity: u64,
}

/// Decides migrations. Pure: the output depends only on the arguments.
///
/// Order of work: cold extents move one tier down (coldest first), tiers
/// above their high watermark evict down to the low watermark, then hot
/// extents move to tier 1 (hottest first). An action is only emitted if its
/// target stays at or below the high watermark; the first refusal closes
/// that target for the rest of the pass.
pub fn evaluate(
    policy: &HsmPolicy,
    stats: &BTreeMap<ExtentKey, AccessStats>,
    extents: &[ExtentInfo],
    occupancy: &BTreeMap<TierId, TierOccupancy>,
    now: f64,
) -> Vec<MigrationAction> {
    let lambda = policy.lambda();
    let mut occ = occupancy.clone();
    let mut actions = Vec::new();
    let mut moved: BTreeSet<ExtentKey> = BTreeSet::new();
    let mut closed: BTreeSet<TierId> = BTreeSet::new();

    let stat = |k: &ExtentKey| stats.get(k).copied().unwrap_or_default();
    let rate = |k: &ExtentKey| stat(k).rate_at(now, lambda);
    let coldness = |a: &ExtentInfo, b: &ExtentInfo| {
        let (sa, sb) = (stat(&a.key), stat(&b.key));
        sa.last_access
            .total_cmp(&sb.last_access)
            .then(rate(&a.key).total_cmp(&rate(&b.key)))
            .then(a.key.cmp(&b.key))
    };

    let try_move = |info: &ExtentInfo,
                    to: TierId,
                    occ: &mut BTreeMap<TierId, TierOccupancy>,
                    closed: &mut BTreeSet<TierId>,
                    actions: &mut Vec<MigrationAction>|
     -> bool {
        if closed.contains(&to) {
            return false;
        }
        let target = occ.get(&to).copied().unwrap_or_default();
        if (target.used + info.bytes) as f64 > policy.high(to) * target.capacity as f64 {
            closed.insert(to);
            return false;
        }
        occ.entry(to).or_default().used += info.bytes;
        let from = occ.entry(info.tier).or_default();
        from.used = from.used.saturating_sub(info.bytes);
        actions.push(MigrationAction {
            object: info.key.0,
            extent: info.key.1,
            from_tier: info.tier,
            to_tier: to,
            bytes: info.bytes,
        });
        true
    };

    let mut cold: Vec<&ExtentInfo> = extents
        .iter()
        .filter(|e| e.tier != TierId::SLOWEST)
        .filter(|e| {
            now - stat(&e.key).last_access > policy.demote_idle_threshold
                || rate(&e.key) < policy.demote_rate_threshold
        })
        .collect();
    cold.sort_by(|a, b| coldness(a, b));
    for info in cold {
        let to = info.tier.lower().expect("not the slowest tier");
        if try_move(info, to, &mut occ, &mut closed, &mut actions) {
            moved.insert(info.key);
        }
    }

    for tier in TierId::all().filter(|t| *t != TierId::SLOWEST) {
        let o = occ.get(&tier).copied().unwrap_or_default();
        if o.used as f64 <= policy.high(tier) * o.capacity as f64 {
            continue;
        }
        let mut resident: Vec<&ExtentInfo> = extents
            .iter()
            .filter(|e| e.tier == tier && !moved.contains(&e.key))
            .collect();
        resident.sort_by(|a, b| coldness(a, b));
        let to = tier.lower().expect("not the slowest tier");
        for info in resident {
            let o = occ[&tier];
            if o.used as f64 <= policy.low(tier) * o.capacity as f64 {
                break;
            }
            if !try_move(info, to, &mut occ, &mut closed, &mut actions) {
                break;
            }
            moved.insert(info.key);
        }
    }

    let mut hot: Vec<&ExtentInfo> = extents
        .iter()
        .filter(|e| e.tier != TierId::FASTEST && !moved.contains(&e.key))
        .filter(|e| rate(&e.key) >= policy.promote_rate_threshold)
        .collect();
    hot.sort_by(|a, b| {
        rate(&b.key)
            .total_cmp(&rate(&a.key))
            .then(a.key.cmp(&b.key))
    });
    for info in hot {
        if !try_move(info, TierId::FASTEST, &mut occ, &mut closed, &mut actions) {
            break;
        }
    }
    actions
}

type StatMap = Arc<Mutex<BTreeMap<ExtentKey, AccessStats>>>;

fn lock(m: &StatMap) -> MutexGuard<'_, BTreeMap<ExtentKey, AccessStats>> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Statistics plus policy; fed either directly or through FDMI.
#[derive(Debug)]
pub struct Hsm {
    policy: HsmPolicy,
    stats: StatMap,
    subscription: Option<SubscriptionId>,
}

impl Hsm {
    pub const PLUGIN: &'static str = "hsm";

    pub fn new(policy: HsmPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            stats: Arc::default(),
            subscription: None,
        })
    }

    pub fn policy(&self) -> &HsmPolicy {
        &self.policy
    }

    pub fn record_access(
        &self,
        store: &Store,
        object: ObjectId,
        extent: u64,
        kind: AccessKind,
        t: f64,
    ) -> Result<AccessStats> {
        store.obj_meta(object)?;
        let mut stats = lock(&self.stats);
        let s = stats.entry((object, extent)).or_default();
        s.record(kind, t, self.policy.lambda());
        Ok(*s)
    }

    /// Subscribes to object access records so that every read and write is
    /// counted without the caller's help.
    pub fn attach(&mut self, addb: &Addb) -> Result<()> {
        let stats = self.stats.clone();
        let lambda = self.policy.lambda();
        let id = addb.fdmi_register(
            Self::PLUGIN,
            RecordFilter::metric(Subsystem::Object, "access"),
            Box::new(move |r: &AddbRecord| {
                if let Some((key, kind)) = parse_access(r) {
                    lock(&stats)
                        .entry(key)
                        .or_default()
                        .record(kind, r.t, lambda);
                }
            }),
        )?;
        self.subscription = Some(id);
        Ok(())
    }

    pub fn detach(&mut self, addb: &Addb) {
        if let Some(id) = self.subscription.take() {
            addb.fdmi_deregister(id);
        }
    }

    pub fn stats(&self) -> BTreeMap<ExtentKey, AccessStats> {
        lock(&self.stats).clone()
    }

    pub fn forget(&self, object: ObjectId) {
        lock(&self.stats).retain(|k, _| k.0 != object);
    }

    pub fn plan(&self, store: &Store, now: f64) -> Vec<MigrationAction> {
        let extents = extent_inventory(store);
        let occupancy = store
            .tier_usage()
            .into_iter()
            .map(|(t, (used, capacity))| (t, TierOccupancy { used, capacity }))
            .collect();
        evaluate(&self.policy, &self.stats(), &extents, &occupancy, now)
    }

    /// Moves one extent to the devices of its target tier.
    pub fn migrate(&self, store: &mut Store, action: &MigrationAction) -> Result<()> {
        let meta = store.obj_meta(action.object)?.clone();
        let (_, sub) = meta.layout.resolve(action.extent)?;
        let full = || Error::TargetFull {
            tier: action.to_tier.0,
        };
        let width = sub.devices().len();
        let targets = pick_devices(store, action.to_tier, width).ok_or_else(full)?;
        let new_sub = match sub {
            Layout::Striped {
                data_units,
                parity_units,
                ..
            } => Layout::striped(*data_units, *parity_units, targets),
            Layout::Mirrored { .. } => Layout::mirrored(targets),
            Layout::Tiered { .. } => return Err(Error::InvalidLayout("nested tiers".into())),
        };
        match store.relayout_extent(action.object, action.extent, new_sub) {
            Err(Error::OutOfCapacity { .. }) => Err(full()),
            other => other,
        }?;
        store.addb.emit(
            store.clock.now(),
            store.config.node,
            Subsystem::Hsm,
            "migrate",
            action.bytes as f64,
            tags([
                ("object", action.object.to_string()),
                ("extent", action.extent.to_string()),
                ("from", action.from_tier.0.to_string()),
                ("to", action.to_tier.0.to_string()),
            ]),
        );
        Ok(())
    }

    /// One evaluate/migrate round. Returns the actions that were applied.
    pub fn run_pass(&self, store: &mut Store, now: f64) -> Result<Vec<MigrationAction>> {
        let mut done = Vec::new();
        for action in self.plan(store, now) {
            match self.migrate(store, &action) {
                Ok(()) => done.push(action),
                Err(Error::TargetFull { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(done)
    }
}

fn parse_access(r: &AddbRecord) -> Option<(ExtentKey, AccessKind)> {
    let object = ObjectId(u128::from_str_radix(r.tag("object")?, 16).ok()?);
    let extent = r.tag("extent")?.parse().ok()?;
    let kind = match r.tag("kind")? {
        "read" => AccessKind::Read,
        "write" => AccessKind::Write,
        _ => return None,
    };
    Some(((object, extent), kind))
}

/// Allocated extents of every object with their tier and footprint.
pub fn extent_inventory(store: &Store) -> Vec<ExtentInfo> {
    let mut out = Vec::new();
    for meta in store.objects() {
        for (extent, _) in meta.layout.extents() {
            let bytes = extent_bytes(store, meta, extent.start_block);
            if bytes == 0 {
                continue;
            }
            if let Some(tier) = store.extent_tier(meta, extent.start_block) {
                out.push(ExtentInfo {
                    key: (meta.id, extent.start_block),
                    tier,
                    bytes,
                });
            }
        }
    }
    out
}

fn extent_bytes(store: &Store, meta: &ObjectMeta, segment: u64) -> u64 {
    let unit = store.unit_device_blocks(&meta.spec) * store.config.device_block_size;
    meta.units.keys().filter(|k| k.segment == segment).count() as u64 * unit
}

/// The `count` available devices of `tier` with the most free space.
fn pick_devices(store: &Store, tier: TierId, count: usize) -> Option<Vec<DeviceId>> {
    let mut candidates: Vec<(u64, DeviceId)> = store
        .devices
        .in_tier(tier)
        .filter(|d| store.device_placeable(d.id()))
        .map(|d| (store.device_free_blocks(d.id()), d.id()))
        .collect();
    if candidates.len() < count {
        return None;
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<DeviceId> = candidates[..count].iter().map(|c| c.1).collect();
    picked.sort();
    Some(picked)
}

impl Store {
    /// Rewrites one extent onto a new flat sub-layout and publishes the new
    /// layout in a single transaction. Readers see the old or the new copy,
    /// never a mix.
    pub fn relayout_extent(&mut self, id: ObjectId, segment: u64, sub: Layout) -> Result<()> {
        self.ensure_alive()?;
        if matches!(sub, Layout::Tiered { .. }) {
            return Err(Error::InvalidLayout("nested tiers".into()));
        }
        sub.validate()?;
        let old = self.obj_meta(id)?.clone();
        let mut new = old.clone();
        let (start, end) = match &mut new.layout {
            Layout::Tiered { extents } => {
                let slot = extents
                    .iter_mut()
                    .find(|(e, _)| e.start_block == segment)
                    .ok_or(Error::ExtentOutsideLayout { block: segment })?;
                slot.1 = sub;
                (slot.0.start_block, slot.0.end_block())
            }
            flat => {
                if segment != 0 {
                    return Err(Error::ExtentOutsideLayout { block: segment });
                }
                *flat = sub;
                (0, u64::MAX)
            }
        };
        let end = end.min(old.size_blocks);
        let mut data = Vec::new();
        for b in start..end {
            data.extend(self.read_block_of(&old, b)?);
        }
        new.units.retain(|k, _| k.segment != segment);
        if !data.is_empty() {
            if let Err(e) = self.write_blocks(&mut new, start, &data) {
                let added: Vec<_> = new
                    .units
                    .iter()
                    .filter(|(k, p)| old.units.get(k) != Some(p))
                    .map(|(k, p)| (*k, *p))
                    .collect();
                self.discard_units(&new.spec, &added);
                return Err(e);
            }
        }
        self.install_meta(&old, new)?;
        Ok(())
    }
}
