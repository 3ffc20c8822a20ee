//! Core of a desk-scale tiered object store: devices, objects, indices,
//! transactions, tier management, function shipping, repair, windows,
//! streams, telemetry and a simulated cluster.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checksum;
pub mod error;
pub mod fault;
pub mod ha;
pub mod harness;
pub mod hsm;
pub mod index;
pub mod model;
pub mod object;
pub mod ship;
pub mod store;
pub mod stream;
pub mod telemetry;
pub mod tier;
pub mod txn;
pub mod window;

pub use error::{Error, Result};
pub use harness::{Cluster, ClusterConfig};
pub use model::{
    BlockSpec, Container, ContainerId, DeviceId, Extent, IndexId, Layout, NodeId, ObjectId, TierId,
};
pub use store::{Store, StoreConfig};
