//! Identifiers, block geometry, containers and layout descriptors.
//!
//! A [`Layout`] maps object blocks onto *units*: one block-sized slot on a
//! device, addressed by `(device, segment, local_block)`. The segment is the
//! start block of the tiered extent the unit belongs to (zero for flat
//! layouts) so that sub-layouts of one object never collide on a device.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId(pub u128);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl ObjectId {
    pub fn to_key(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(DeviceId, u32, "d");
id_type!(NodeId, u32, "n");
id_type!(IndexId, u64, "idx");
id_type!(ContainerId, u64, "c");

/// Storage tier, 1 (NVRAM) through 4 (archive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TierId(pub u8);

impl TierId {
    pub const FASTEST: TierId = TierId(1);
    pub const SLOWEST: TierId = TierId(4);

    pub fn new(tier: u8) -> Result<Self> {
        if (1..=4).contains(&tier) {
            Ok(TierId(tier))
        } else {
            Err(Error::BadConfig(format!("tier {tier} outside 1..=4")))
        }
    }

    pub fn all() -> impl Iterator<Item = TierId> {
        (1..=4).map(TierId)
    }

    pub fn lower(self) -> Option<TierId> {
        (self.0 < 4).then(|| TierId(self.0 + 1))
    }
}

impl fmt::Display for TierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tier{}", self.0)
    }
}

pub fn validate_block_size(size: u64) -> Result<()> {
    if size > 0 && size.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(size))
    }
}

/// Block geometry of an object. Always a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    block_size: u64,
}

impl BlockSpec {
    pub fn new(block_size: u64) -> Result<Self> {
        validate_block_size(block_size)?;
        Ok(Self { block_size })
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    fn shift(&self) -> u32 {
        self.block_size.trailing_zeros()
    }
}

/// Splits a byte offset into `(block index, offset within block)`.
pub fn byte_to_block(offset: u64, spec: BlockSpec) -> (u64, u64) {
    (offset >> spec.shift(), offset & (spec.block_size - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub start_block: u64,
    pub block_count: u64,
}

impl Extent {
    pub fn new(start_block: u64, block_count: u64) -> Self {
        Self {
            start_block,
            block_count,
        }
    }

    pub fn end_block(&self) -> u64 {
        self.start_block + self.block_count
    }

    pub fn contains(&self, block: u64) -> bool {
        block >= self.start_block && block < self.end_block()
    }

    pub fn blocks(&self) -> std::ops::Range<u64> {
        self.start_block..self.end_block()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `data_units` data devices plus `parity_units` (0 or 1) XOR parity.
    Striped {
        data_units: u32,
        parity_units: u32,
        devices: Vec<DeviceId>,
    },
    Mirrored {
        replicas: u32,
        devices: Vec<DeviceId>,
    },
    /// Disjoint extents, each with its own flat sub-layout.
    Tiered { extents: Vec<(Extent, Layout)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitRole {
    Data,
    Parity,
}

/// Address of a unit relative to its owning object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitKey {
    pub device: DeviceId,
    pub segment: u64,
    pub local_block: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Placement {
    pub device: DeviceId,
    pub segment: u64,
    pub local_block: u64,
    pub role: UnitRole,
}

impl Placement {
    pub fn key(&self) -> UnitKey {
        UnitKey {
            device: self.device,
            segment: self.segment,
            local_block: self.local_block,
        }
    }
}

/// Where one object block lives under a flat layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockLocation {
    Striped {
        data: UnitKey,
        /// Parity group identity: `(segment, group)`.
        group: (u64, u64),
        position: u32,
    },
    Mirrored {
        replicas: Vec<UnitKey>,
    },
}

/// One striped parity group: its data units in position order plus the
/// parity unit, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripeGroup {
    pub segment: u64,
    pub group: u64,
    /// Object block index of position 0.
    pub first_block: u64,
    pub data: Vec<UnitKey>,
    pub parity: Option<UnitKey>,
}

impl Layout {
    pub fn striped(data_units: u32, parity_units: u32, devices: Vec<DeviceId>) -> Self {
        Layout::Striped {
            data_units,
            parity_units,
            devices,
        }
    }

    pub fn mirrored(devices: Vec<DeviceId>) -> Self {
        Layout::Mirrored {
            replicas: devices.len() as u32,
            devices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Layout::Striped {
                data_units,
                parity_units,
                devices,
            } => {
                if *data_units == 0 {
                    return Err(Error::InvalidLayout("striped layout needs N >= 1".into()));
                }
                if *parity_units > 1 {
                    return Err(Error::InvalidLayout("parity units must be 0 or 1".into()));
                }
                if devices.len() != (*data_units + *parity_units) as usize {
                    return Err(Error::InvalidLayout(format!(
                        "striped({data_units},{parity_units}) needs {} devices, got {}",
                        data_units + parity_units,
                        devices.len()
                    )));
                }
                distinct(devices)
            }
            Layout::Mirrored { replicas, devices } => {
                if *replicas == 0 {
                    return Err(Error::InvalidLayout("mirrored layout needs R >= 1".into()));
                }
                if devices.len() != *replicas as usize {
                    return Err(Error::InvalidLayout(format!(
                        "mirrored({replicas}) needs {replicas} devices, got {}",
                        devices.len()
                    )));
                }
                distinct(devices)
            }
            Layout::Tiered { extents } => {
                if extents.is_empty() {
                    return Err(Error::InvalidLayout("tiered layout has no extents".into()));
                }
                let mut prev_end = 0;
                for (i, (extent, sub)) in extents.iter().enumerate() {
                    if extent.block_count == 0 {
                        return Err(Error::InvalidLayout("empty extent".into()));
                    }
                    if i > 0 && extent.start_block < prev_end {
                        return Err(Error::InvalidLayout(
                            "tiered extents must be sorted and disjoint".into(),
                        ));
                    }
                    prev_end = extent.end_block();
                    if matches!(sub, Layout::Tiered { .. }) {
                        return Err(Error::InvalidLayout("nested tiered layouts".into()));
                    }
                    sub.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Every device referenced by the layout, ascending.
    pub fn devices(&self) -> BTreeSet<DeviceId> {
        match self {
            Layout::Striped { devices, .. } | Layout::Mirrored { devices, .. } => {
                devices.iter().copied().collect()
            }
            Layout::Tiered { extents } => extents.iter().flat_map(|(_, l)| l.devices()).collect(),
        }
    }

    pub fn parity_units(&self) -> u32 {
        match self {
            Layout::Striped { parity_units, .. } => *parity_units,
            Layout::Mirrored { replicas, .. } => replicas - 1,
            Layout::Tiered { extents } => extents
                .iter()
                .map(|(_, l)| l.parity_units())
                .min()
                .unwrap_or(0),
        }
    }

    /// Replaces `from` by `to` everywhere in the layout.
    pub fn replace_device(&mut self, from: DeviceId, to: DeviceId) {
        match self {
            Layout::Striped { devices, .. } | Layout::Mirrored { devices, .. } => {
                for d in devices.iter_mut().filter(|d| **d == from) {
                    *d = to;
                }
            }
            Layout::Tiered { extents } => {
                for (_, sub) in extents.iter_mut() {
                    sub.replace_device(from, to);
                }
            }
        }
    }

    /// Resolves the flat sub-layout covering `block`, with its segment start.
    pub fn resolve(&self, block: u64) -> Result<(u64, &Layout)> {
        match self {
            Layout::Tiered { extents } => extents
                .iter()
                .find(|(e, _)| e.contains(block))
                .map(|(e, l)| (e.start_block, l))
                .ok_or(Error::ExtentOutsideLayout { block }),
            flat => Ok((0, flat)),
        }
    }

    pub fn locate(&self, block: u64) -> Result<BlockLocation> {
        let (segment, flat) = self.resolve(block)?;
        let rel = block - segment;
        Ok(match flat {
            Layout::Striped {
                data_units,
                parity_units,
                devices,
            } => {
                let n = *data_units as u64;
                let group = rel / n;
                let position = (rel % n) as u32;
                let data_devs = data_device_order(*data_units, *parity_units, group);
                BlockLocation::Striped {
                    data: UnitKey {
                        device: devices[data_devs[position as usize]],
                        segment,
                        local_block: group,
                    },
                    group: (segment, group),
                    position,
                }
            }
            Layout::Mirrored { devices, .. } => BlockLocation::Mirrored {
                replicas: devices
                    .iter()
                    .map(|&device| UnitKey {
                        device,
                        segment,
                        local_block: rel,
                    })
                    .collect(),
            },
            Layout::Tiered { .. } => unreachable!("resolve returns flat layouts"),
        })
    }

    /// The parity group containing `block`, for striped layouts.
    pub fn stripe_group(&self, block: u64) -> Result<Option<StripeGroup>> {
        let (segment, flat) = self.resolve(block)?;
        let Layout::Striped {
            data_units,
            parity_units,
            devices,
        } = flat
        else {
            return Ok(None);
        };
        let n = *data_units as u64;
        let group = (block - segment) / n;
        Ok(Some(build_group(
            *data_units,
            *parity_units,
            devices,
            segment,
            group,
        )))
    }

    /// Reconstructs the group a unit belongs to from its key alone.
    pub fn group_of_unit(&self, key: UnitKey) -> Option<StripeGroup> {
        let flat = match self {
            Layout::Tiered { extents } => {
                &extents
                    .iter()
                    .find(|(e, _)| e.start_block == key.segment)?
                    .1
            }
            flat => flat,
        };
        match flat {
            Layout::Striped {
                data_units,
                parity_units,
                devices,
            } => Some(build_group(
                *data_units,
                *parity_units,
                devices,
                key.segment,
                key.local_block,
            )),
            _ => None,
        }
    }

    /// Bounds of the extent holding `block`; flat layouts are unbounded.
    pub fn segment_bounds(&self, block: u64) -> Result<Extent> {
        match self {
            Layout::Tiered { extents } => extents
                .iter()
                .find(|(e, _)| e.contains(block))
                .map(|(e, _)| *e)
                .ok_or(Error::ExtentOutsideLayout { block }),
            _ => Ok(Extent::new(0, u64::MAX)),
        }
    }

    /// The extents of a tiered layout, or a single unbounded pseudo-extent.
    pub fn extents(&self) -> Vec<(Extent, &Layout)> {
        match self {
            Layout::Tiered { extents } => extents.iter().map(|(e, l)| (*e, l)).collect(),
            flat => vec![(Extent::new(0, u64::MAX), flat)],
        }
    }
}

fn distinct(devices: &[DeviceId]) -> Result<()> {
    let set: BTreeSet<_> = devices.iter().collect();
    if set.len() == devices.len() {
        Ok(())
    } else {
        Err(Error::InvalidLayout("duplicate device in layout".into()))
    }
}

/// Index into the device list holding the parity unit of `group`.
pub fn parity_device_index(data_units: u32, group: u64) -> usize {
    let width = data_units as u64 + 1;
    ((data_units as u64 + group) % width) as usize
}

/// Device-list indices of the data units of `group`, by position.
fn data_device_order(data_units: u32, parity_units: u32, group: u64) -> Vec<usize> {
    let width = (data_units + parity_units) as usize;
    if parity_units == 0 {
        return (0..width).collect();
    }
    let parity = parity_device_index(data_units, group);
    (0..width).filter(|&i| i != parity).collect()
}

fn build_group(
    data_units: u32,
    parity_units: u32,
    devices: &[DeviceId],
    segment: u64,
    group: u64,
) -> StripeGroup {
    let key = |i: usize| UnitKey {
        device: devices[i],
        segment,
        local_block: group,
    };
    StripeGroup {
        segment,
        group,
        first_block: segment + group * data_units as u64,
        data: data_device_order(data_units, parity_units, group)
            .into_iter()
            .map(key)
            .collect(),
        parity: (parity_units == 1).then(|| key(parity_device_index(data_units, group))),
    }
}

/// Maps an extent of object blocks to unit placements.
///
/// Data placements come first in block order (every replica for mirrored
/// layouts), followed by one parity placement per touched parity group.
pub fn layout_map(layout: &Layout, extent: Extent) -> Result<Vec<Placement>> {
    layout.validate()?;
    let mut data = Vec::new();
    let mut parity = Vec::new();
    let mut seen_groups = BTreeSet::new();
    for block in extent.blocks() {
        match layout.locate(block)? {
            BlockLocation::Striped { data: unit, .. } => {
                data.push(placement(unit, UnitRole::Data));
                let group = layout.stripe_group(block)?.expect("striped");
                if let Some(p) = group.parity {
                    if seen_groups.insert((group.segment, group.group)) {
                        parity.push(placement(p, UnitRole::Parity));
                    }
                }
            }
            BlockLocation::Mirrored { replicas } => {
                data.extend(replicas.into_iter().map(|u| placement(u, UnitRole::Data)));
            }
        }
    }
    data.extend(parity);
    Ok(data)
}

fn placement(key: UnitKey, role: UnitRole) -> Placement {
    Placement {
        device: key.device,
        segment: key.segment,
        local_block: key.local_block,
        role,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub container_id: ContainerId,
    pub label: String,
    pub members: BTreeSet<ObjectId>,
    /// Advisory only.
    pub placement_hint: Option<TierId>,
}

impl Container {
    pub fn new(container_id: ContainerId, label: impl Into<String>) -> Self {
        Self {
            container_id,
            label: label.into(),
            members: BTreeSet::new(),
            placement_hint: None,
        }
    }

    pub fn add_member(&mut self, id: ObjectId) {
        self.members.insert(id);
    }

    pub fn remove_member(&mut self, id: ObjectId) -> Result<()> {
        if self.members.remove(&id) {
            Ok(())
        } else {
            Err(Error::UnknownObject(id))
        }
    }

    pub fn list_members(&self) -> Vec<ObjectId> {
        self.members.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn devs(ids: &[u32]) -> Vec<DeviceId> {
        ids.iter().map(|&i| DeviceId(i)).collect()
    }

    #[test]
    fn block_size_validation() {
        assert!(validate_block_size(4096).is_ok());
        assert!(validate_block_size(1).is_ok());
        assert!(matches!(
            validate_block_size(3000),
            Err(Error::NotPowerOfTwo(3000))
        ));
        assert!(validate_block_size(0).is_err());
    }

    #[test]
    fn byte_offsets_to_blocks() {
        let s4k = BlockSpec::new(4096).unwrap();
        assert_eq!(byte_to_block(8192, s4k), (2, 0));
        assert_eq!(byte_to_block(4097, s4k), (1, 1));
        assert_eq!(byte_to_block(0, BlockSpec::new(512).unwrap()), (0, 0));
    }

    #[test]
    fn striped_without_parity_is_round_robin() {
        let layout = Layout::striped(2, 0, devs(&[0, 1]));
        let map = layout_map(&layout, Extent::new(0, 4)).unwrap();
        let on = |d: u32| -> Vec<u64> {
            map.iter()
                .filter(|p| p.device == DeviceId(d))
                .map(|p| p.local_block)
                .collect()
        };
        // local blocks 0,1 on each device hold object blocks {0,2} and {1,3}
        assert_eq!(on(0), vec![0, 1]);
        assert_eq!(on(1), vec![0, 1]);
        for b in 0..4u64 {
            match layout.locate(b).unwrap() {
                BlockLocation::Striped { data, .. } => {
                    assert_eq!(data.device, DeviceId((b % 2) as u32));
                    assert_eq!(data.local_block, b / 2);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn striped_with_parity_first_group() {
        let layout = Layout::striped(2, 1, devs(&[0, 1, 2]));
        let map = layout_map(&layout, Extent::new(0, 2)).unwrap();
        assert_eq!(
            map,
            vec![
                Placement {
                    device: DeviceId(0),
                    segment: 0,
                    local_block: 0,
                    role: UnitRole::Data
                },
                Placement {
                    device: DeviceId(1),
                    segment: 0,
                    local_block: 0,
                    role: UnitRole::Data
                },
                Placement {
                    device: DeviceId(2),
                    segment: 0,
                    local_block: 0,
                    role: UnitRole::Parity
                },
            ]
        );
    }

    #[test]
    fn parity_rotates_across_groups() {
        // group g keeps parity on device (N + g) mod (N + 1)
        let layout = Layout::striped(2, 1, devs(&[0, 1, 2]));
        let parity_dev = |g: u64| layout.stripe_group(g * 2).unwrap().unwrap().parity.unwrap();
        assert_eq!(parity_dev(0).device, DeviceId(2));
        assert_eq!(parity_dev(1).device, DeviceId(0));
        assert_eq!(parity_dev(2).device, DeviceId(1));
        assert_eq!(parity_dev(3).device, DeviceId(2));
    }

    #[test]
    fn mirrored_places_block_on_every_replica() {
        let layout = Layout::mirrored(devs(&[3, 7]));
        let map = layout_map(&layout, Extent::new(5, 1)).unwrap();
        assert_eq!(map.len(), 2);
        assert!(map
            .iter()
            .all(|p| p.local_block == 5 && p.role == UnitRole::Data));
        assert_eq!(map[0].device, DeviceId(3));
        assert_eq!(map[1].device, DeviceId(7));
    }

    #[test]
    fn tiered_extents_use_their_own_segments() {
        let layout = Layout::Tiered {
            extents: vec![
                (Extent::new(0, 4), Layout::striped(1, 0, devs(&[0]))),
                (Extent::new(4, 4), Layout::striped(2, 0, devs(&[0, 1]))),
            ],
        };
        layout.validate().unwrap();
        let map = layout_map(&layout, Extent::new(0, 8)).unwrap();
        let keys: BTreeSet<_> = map.iter().map(|p| p.key()).collect();
        assert_eq!(keys.len(), 8);
        assert!(matches!(
            layout_map(&layout, Extent::new(6, 4)),
            Err(Error::ExtentOutsideLayout { block: 8 })
        ));
    }

    #[test]
    fn layout_validation() {
        assert!(Layout::striped(0, 0, vec![]).validate().is_err());
        assert!(Layout::striped(2, 2, devs(&[0, 1, 2, 3]))
            .validate()
            .is_err());
        assert!(Layout::striped(2, 1, devs(&[0, 1])).validate().is_err());
        assert!(Layout::striped(2, 0, devs(&[0, 0])).validate().is_err());
        assert!(Layout::Mirrored {
            replicas: 0,
            devices: vec![]
        }
        .validate()
        .is_err());
        let overlapping = Layout::Tiered {
            extents: vec![
                (Extent::new(0, 4), Layout::striped(1, 0, devs(&[0]))),
                (Extent::new(2, 4), Layout::striped(1, 0, devs(&[1]))),
            ],
        };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn container_set_semantics() {
        let mut c = Container::new(ContainerId(1), "hot");
        c.add_member(ObjectId(1));
        assert_eq!(c.list_members(), vec![ObjectId(1)]);
        c.add_member(ObjectId(1));
        assert_eq!(c.list_members(), vec![ObjectId(1)]);
        assert!(matches!(
            c.remove_member(ObjectId(2)),
            Err(Error::UnknownObject(ObjectId(2)))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn block_translation_round_trips(offset in 0u64..(1 << 48), shift in 0u32..20) {
                let spec = BlockSpec::new(1 << shift).unwrap();
                let (block, intra) = byte_to_block(offset, spec);
                prop_assert!(intra < spec.block_size());
                prop_assert_eq!(block * spec.block_size() + intra, offset);
            }

            #[test]
            fn parity_groups_never_share_a_device(n in 1u32..8, groups in 1u64..20) {
                let layout = Layout::striped(n, 1, (0..=n).map(DeviceId).collect());
                let map = layout_map(&layout, Extent::new(0, n as u64 * groups)).unwrap();
                prop_assert_eq!(map.clone(), layout_map(&layout, Extent::new(0, n as u64 * groups)).unwrap());
                for g in 0..groups {
                    let group = layout.stripe_group(g * n as u64).unwrap().unwrap();
                    let mut devices: Vec<_> = group.data.iter().map(|u| u.device).collect();
                    devices.push(group.parity.unwrap().device);
                    let distinct: BTreeSet<_> = devices.iter().collect();
                    prop_assert_eq!(distinct.len(), n as usize + 1);
                    let parities = map.iter().filter(|p| p.role == UnitRole::Parity && p.local_block == g).count();
                    prop_assert_eq!(parities, 1);
                }
            }
        }
    }
}
