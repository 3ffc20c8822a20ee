//! Transactions and the redo log.
//!
//! Log file layout: the 8-byte magic `SAGELOG1`, then records framed as
//! `len u32 LE | payload | fnv1a64(payload) u64 LE`. A transaction's op
//! records are followed by a COMMIT record; a transaction is committed iff
//! its COMMIT record is fully on disk with a valid checksum. Reading stops at
//! the first short or corrupt record and the file is truncated there.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::fault::{CrashInjector, WriteGate};
use crate::index::Record;
use crate::model::{BlockSpec, ContainerId, IndexId, Layout, ObjectId, TierId};
use crate::object::ObjectMeta;

pub const LOG_MAGIC: &[u8; 8] = b"SAGELOG1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TxnOp {
    ObjCreate {
        id: ObjectId,
        spec: BlockSpec,
        layout: Layout,
    },
    ObjWrite {
        id: ObjectId,
        start_block: u64,
        data: Vec<u8>,
    },
    ObjDelete {
        id: ObjectId,
    },
    IdxCreate {
        index: IndexId,
    },
    IdxPut {
        index: IndexId,
        records: Vec<Record>,
    },
    IdxDel {
        index: IndexId,
        keys: Vec<Vec<u8>>,
    },
    /// Replaces an object's metadata record in the system index. Used for
    /// layout changes whose data was placed before commit.
    SetMeta {
        meta: ObjectMeta,
    },
    ContainerCreate {
        id: ContainerId,
        label: String,
        hint: Option<TierId>,
    },
    ContainerAdd {
        id: ContainerId,
        object: ObjectId,
    },
    ContainerRemove {
        id: ContainerId,
        object: ObjectId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Open,
    Committed,
    Aborted,
}

/// A group of updates applied atomically on commit. Nothing is visible
/// until the store commits it.
#[derive(Debug)]
pub struct Txn {
    id: u64,
    ops: Vec<TxnOp>,
    state: TxnState,
}

impl Txn {
    pub(crate) fn new(id: u64) -> Self {
        Self {
            id,
            ops: Vec::new(),
            state: TxnState::Open,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> TxnState {
        self.state
    }

    pub fn ops(&self) -> &[TxnOp] {
        &self.ops
    }

    pub(crate) fn set_state(&mut self, state: TxnState) {
        self.state = state;
    }

    pub fn push(&mut self, op: TxnOp) -> &mut Self {
        if self.state == TxnState::Open {
            self.ops.push(op);
        }
        self
    }

    pub fn obj_create(&mut self, id: ObjectId, spec: BlockSpec, layout: Layout) -> &mut Self {
        self.push(TxnOp::ObjCreate { id, spec, layout })
    }

    pub fn obj_write(&mut self, id: ObjectId, start_block: u64, data: Vec<u8>) -> &mut Self {
        self.push(TxnOp::ObjWrite {
            id,
            start_block,
            data,
        })
    }

    pub fn obj_delete(&mut self, id: ObjectId) -> &mut Self {
        self.push(TxnOp::ObjDelete { id })
    }

    pub fn idx_create(&mut self, index: IndexId) -> &mut Self {
        self.push(TxnOp::IdxCreate { index })
    }

    pub fn idx_put(&mut self, index: IndexId, records: Vec<Record>) -> &mut Self {
        self.push(TxnOp::IdxPut { index, records })
    }

    pub fn idx_del(&mut self, index: IndexId, keys: Vec<Vec<u8>>) -> &mut Self {
        self.push(TxnOp::IdxDel { index, keys })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogBody {
    Op(TxnOp),
    Commit { seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub txn_id: u64,
    pub body: LogBody,
}

/// A transaction recovered from the log with a valid COMMIT.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittedTxn {
    pub txn_id: u64,
    pub seq: u64,
    pub ops: Vec<TxnOp>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogScan {
    pub committed: Vec<CommittedTxn>,
    /// Offset at which a short or corrupt record was cut off.
    pub truncated_at: Option<u64>,
    pub discarded_bytes: u64,
    pub max_txn_id: Option<u64>,
    pub records: u64,
}

pub struct TxnLog {
    path: PathBuf,
    file: File,
    len: u64,
    fsync: bool,
    injector: Arc<CrashInjector>,
}

impl std::fmt::Debug for TxnLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TxnLog")
            .field("path", &self.path)
            .field("len", &self.len)
            .finish()
    }
}

pub fn encode_record(record: &LogRecord) -> Result<Vec<u8>> {
    let payload = bincode::serialize(record)?;
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    Ok(out)
}

/// Parses a full log image. Never fails on a bad tail; only a bad magic is
/// an error.
pub fn scan_log(buf: &[u8]) -> Result<LogScan> {
    if buf.len() < LOG_MAGIC.len() || &buf[..LOG_MAGIC.len()] != LOG_MAGIC {
        return Err(Error::CorruptLog("bad magic".into()));
    }
    let mut scan = LogScan::default();
    let mut pending: BTreeMap<u64, Vec<TxnOp>> = BTreeMap::new();
    let mut pos = LOG_MAGIC.len();
    while pos < buf.len() {
        let Some(record) = parse_one(&buf[pos..]) else {
            scan.truncated_at = Some(pos as u64);
            scan.discarded_bytes = (buf.len() - pos) as u64;
            break;
        };
        let (record, used) = record;
        pos += used;
        scan.records += 1;
        scan.max_txn_id = Some(
            scan.max_txn_id
                .map_or(record.txn_id, |m| m.max(record.txn_id)),
        );
        match record.body {
            LogBody::Op(op) => pending.entry(record.txn_id).or_default().push(op),
            LogBody::Commit { seq } => scan.committed.push(CommittedTxn {
                txn_id: record.txn_id,
                seq,
                ops: pending.remove(&record.txn_id).unwrap_or_default(),
            }),
        }
    }
    Ok(scan)
}

fn parse_one(buf: &[u8]) -> Option<(LogRecord, usize)> {
    let len = u32::from_le_bytes(buf.get(..4)?.try_into().ok()?) as usize;
    let payload = buf.get(4..4 + len)?;
    let sum = u64::from_le_bytes(buf.get(4 + len..12 + len)?.try_into().ok()?);
    if fnv1a64(payload) != sum {
        return None;
    }
    let record = bincode::deserialize(payload).ok()?;
    Some((record, 12 + len))
}

impl TxnLog {
    /// Opens (or creates) the log, scanning and truncating any bad tail.
    pub fn open(
        path: impl AsRef<Path>,
        fsync: bool,
        injector: Arc<CrashInjector>,
    ) -> Result<(Self, LogScan)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        if buf.is_empty() {
            file.write_all(LOG_MAGIC)?;
            buf.extend_from_slice(LOG_MAGIC);
        }
        let scan = scan_log(&buf)?;
        let len = match scan.truncated_at {
            Some(at) => {
                file.set_len(at)?;
                at
            }
            None => buf.len() as u64,
        };
        file.seek(SeekFrom::Start(len))?;
        Ok((
            Self {
                path,
                file,
                len,
                fsync,
                injector,
            },
            scan,
        ))
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len <= LOG_MAGIC.len() as u64
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends records in order. Each record is one durable write; a crash
    /// tears the record in progress. Returns the bytes written.
    pub fn append(&mut self, records: &[LogRecord]) -> Result<u64> {
        let mut written = 0;
        for record in records {
            let bytes = encode_record(record)?;
            let gate = self.injector.gate()?;
            let take = match gate {
                WriteGate::Proceed => bytes.len(),
                WriteGate::Torn => bytes.len() / 2,
            };
            self.file
                .write_all(&bytes[..take])
                .map_err(|e| Error::LogWriteFailed(e.to_string()))?;
            self.len += take as u64;
            written += take as u64;
            if gate == WriteGate::Torn {
                return Err(Error::Crashed);
            }
        }
        if self.fsync {
            self.file
                .sync_data()
                .map_err(|e| Error::LogWriteFailed(e.to_string()))?;
        }
        Ok(written)
    }

    /// Drops every record, keeping the header. Called after a checkpoint.
    pub fn reset(&mut self) -> Result<()> {
        self.file.set_len(LOG_MAGIC.len() as u64)?;
        self.file.seek(SeekFrom::Start(LOG_MAGIC.len() as u64))?;
        self.len = LOG_MAGIC.len() as u64;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}
