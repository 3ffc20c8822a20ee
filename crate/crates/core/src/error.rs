use std::io;

use thiserror::Error;

use crate::model::{ContainerId, DeviceId, IndexId, NodeId, ObjectId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("block size {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("block {block} is not covered by the layout")]
    ExtentOutsideLayout { block: u64 },
    #[error("unknown container {0}")]
    UnknownContainer(ContainerId),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object {0} already exists")]
    AlreadyExists(ObjectId),
    #[error("unknown index {0}")]
    UnknownIndex(IndexId),
    #[error("index {0} already exists")]
    IndexExists(IndexId),
    #[error("index {0} is reserved")]
    ReservedIndex(IndexId),
    #[error("empty key")]
    EmptyKey,

    #[error("device {0} has failed")]
    DeviceFailed(DeviceId),
    #[error("device {device} out of capacity")]
    OutOfCapacity { device: DeviceId },
    #[error("bad length: expected {expected} bytes, got {actual}")]
    BadLength { expected: u64, actual: u64 },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("corrupt device file: {0}")]
    CorruptDevice(String),
    #[error("unrecoverable loss on objects {objects:?}")]
    UnrecoverableLoss { objects: Vec<ObjectId> },

    #[error("transaction {0} is not open")]
    InvalidState(u64),
    #[error("log write failed: {0}")]
    LogWriteFailed(String),
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("simulated crash")]
    Crashed,

    #[error("target tier {tier} is full")]
    TargetFull { tier: u8 },

    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("function {0} already registered")]
    DuplicateFunction(String),
    #[error("combiner of {0} is not associative")]
    CombinerNotAssociative(String),
    #[error("combiner of {0} is not commutative")]
    CombinerNotCommutative(String),
    #[error("unknown ship target")]
    UnknownTarget,
    #[error("invalid function parameters: {0}")]
    InvalidParams(String),
    #[error("partial result of {size} bytes exceeds the per-node limit")]
    ResultTooLarge { size: usize },

    #[error("node {0} is down")]
    NodeDown(NodeId),
    #[error("nodes {from} and {to} are partitioned")]
    Partitioned { from: NodeId, to: NodeId },
    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("window access out of bounds: offset {offset} len {len} size {size}")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("unknown window {0}")]
    UnknownWindow(u64),
    #[error("window size must be positive")]
    ZeroSizeWindow,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid stream descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("element of {actual} bytes does not match schema size {expected}")]
    SchemaMismatch { expected: usize, actual: usize },
    #[error("stream {0} terminated")]
    StreamTerminated(u64),
    #[error("rank {0} is not a producer of this stream")]
    NotAProducer(u32),
    #[error("rank {0} is not a consumer of this stream")]
    NotAConsumer(u32),
    #[error("producer {0} has crashed")]
    ProducerCrashed(u32),
    #[error("a computation is already attached to consumer {0}")]
    AlreadyAttached(u32),
    #[error("unknown stream {0}")]
    UnknownStream(u64),
    #[error("stream {0} still has active producers")]
    ProducersActive(u64),
    #[error("stream {0} has no live consumer")]
    NoLiveConsumer(u64),

    #[error("plugin {0} already registered")]
    DuplicatePlugin(String),
    #[error("corrupt telemetry export: {0}")]
    CorruptExport(String),

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("encoding: {0}")]
    Codec(#[from] bincode::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}
