//! Element streams from producer ranks to consumer ranks.
//!
//! Producer `i` of the descriptor sends to consumer `i mod |consumers|`.
//! Each consumer has a bounded FIFO channel; a send into a full channel
//! first makes the consumer process what is queued, so buffering never
//! exceeds the capacity. Consumers run an attached computation on every
//! element in arrival order and then discard it.
//!
//! Wire format per element: `len u32 | stream_id u64 | seq u64 | bytes`,
//! little-endian.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Cluster;
use crate::model::ObjectId;
use crate::telemetry::{tags, Subsystem};

pub const DEFAULT_CHANNEL_CAPACITY: usize = 1024;
/// Position, velocity, charge and id as eight little-endian f64/u64 words.
pub const PARTICLE_BYTES: usize = 64;
/// Blocks a write-to-object consumer buffers before writing.
const FLUSH_BLOCKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub stream_id: u64,
    pub producers: Vec<u32>,
    pub consumers: Vec<u32>,
    pub element_size: usize,
    pub capacity: usize,
}

impl StreamDescriptor {
    pub fn new(
        stream_id: u64,
        producers: Vec<u32>,
        consumers: Vec<u32>,
        element_size: usize,
    ) -> Self {
        Self {
            stream_id,
            producers,
            consumers,
            element_size,
            capacity: DEFAULT_CHANNEL_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDescriptor(m.to_string()));
        if self.producers.is_empty() || self.consumers.is_empty() {
            return bad("needs at least one producer and one consumer");
        }
        let p: BTreeSet<u32> = self.producers.iter().copied().collect();
        let c: BTreeSet<u32> = self.consumers.iter().copied().collect();
        if p.len() != self.producers.len() || c.len() != self.consumers.len() {
            return bad("duplicate rank");
        }
        if !p.is_disjoint(&c) {
            return bad("producer and consumer sets overlap");
        }
        if self.element_size == 0 || self.capacity == 0 {
            return bad("element size and capacity must be positive");
        }
        Ok(())
    }

    /// Default routing: producer index modulo consumer count.
    pub fn route(&self, producer: u32) -> Option<u32> {
        let i = self.producers.iter().position(|p| *p == producer)?;
        Some(self.consumers[i % self.consumers.len()])
    }
}

pub fn encode_element(stream_id: u64, seq: u64, bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + bytes.len());
    out.extend_from_slice(&(16 + bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&stream_id.to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(bytes);
    out
}

pub fn decode_element(wire: &[u8]) -> Result<(u64, u64, &[u8])> {
    let bad = || Error::InvalidDescriptor("malformed stream element".into());
    if wire.len() < 20 {
        return Err(bad());
    }
    let len = u32::from_le_bytes(wire[..4].try_into().expect("4 bytes")) as usize;
    if len < 16 || wire.len() != 4 + len {
        return Err(bad());
    }
    let id = u64::from_le_bytes(wire[4..12].try_into().expect("8 bytes"));
    let seq = u64::from_le_bytes(wire[12..20].try_into().expect("8 bytes"));
    Ok((id, seq, &wire[20..]))
}

/// Bin of `v` among `bins` equal bins over `[lo, hi)`; out-of-range values
/// are clamped to the edge bins.
pub fn histogram_bin(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let x = ((v - lo) / (hi - lo) * bins as f64).floor();
    if x.is_nan() || x < 0.0 {
        0
    } else {
        (x as usize).min(bins - 1)
    }
}

pub type ElementSink = Box<dyn FnMut(u32, u64, &[u8]) + Send>;

pub enum Computation {
    /// Appends elements, in arrival order, to an existing object.
    WriteToObject { object: ObjectId },
    /// Histogram of the little-endian f64 at `field_offset`.
    Histogram {
        field_offset: usize,
        bins: usize,
        lo: f64,
        hi: f64,
    },
    /// Called with `(producer, seq, element)`.
    Plugin(ElementSink),
}

impl std::fmt::Debug for Computation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Computation::WriteToObject { object } => write!(f, "WriteToObject({object})"),
            Computation::Histogram { bins, .. } => write!(f, "Histogram({bins})"),
            Computation::Plugin(_) => write!(f, "Plugin"),
        }
    }
}

#[derive(Default)]
struct ConsumerState {
    computation: Option<Computation>,
    channel: VecDeque<(u32, Vec<u8>)>,
    delivered: u64,
    buffer: Vec<u8>,
    block_size: usize,
    next_block: u64,
    written_bytes: u64,
    histogram: Vec<u64>,
    crashed: bool,
}

struct StreamState {
    desc: StreamDescriptor,
    route: BTreeMap<u32, u32>,
    consumers: BTreeMap<u32, ConsumerState>,
    next_seq: BTreeMap<u32, u64>,
    finished: BTreeSet<u32>,
    crashed_producers: BTreeSet<u32>,
    crash_plan: BTreeMap<u32, u64>,
    peak_buffer: usize,
    lost: u64,
    terminated: bool,
}

impl StreamState {
    fn crash_consumer(&mut self, rank: u32) {
        let Some(c) = self.consumers.get_mut(&rank) else {
            return;
        };
        if c.crashed {
            return;
        }
        c.crashed = true;
        self.lost += c.channel.len() as u64;
        c.channel.clear();
        c.buffer.clear();
        c.computation = None;
        let survivors: Vec<u32> = self
            .desc
            .consumers
            .iter()
            .copied()
            .filter(|r| !self.consumers[r].crashed)
            .collect();
        for (i, p) in self.desc.producers.iter().enumerate() {
            if self.route.get(p) == Some(&rank) {
                if survivors.is_empty() {
                    self.route.remove(p);
                } else {
                    self.route.insert(*p, survivors[i % survivors.len()]);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct StreamTable {
    streams: BTreeMap<u64, StreamState>,
}

impl std::fmt::Debug for StreamTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.streams.keys()).finish()
    }
}

impl StreamTable {
    pub(crate) fn on_crash(&mut self, ranks: &BTreeSet<u32>) {
        for st in self.streams.values_mut() {
            if st.terminated {
                continue;
            }
            for p in &st.desc.producers {
                if ranks.contains(p) {
                    st.crashed_producers.insert(*p);
                }
            }
            for c in st.desc.consumers.clone() {
                if ranks.contains(&c) {
                    st.crash_consumer(c);
                }
            }
        }
    }

    fn get(&mut self, id: u64) -> Result<&mut StreamState> {
        self.streams.get_mut(&id).ok_or(Error::UnknownStream(id))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DrainReport {
    pub per_consumer: BTreeMap<u32, u64>,
    pub total: u64,
    pub crashed_producers: Vec<u32>,
    pub crashed_consumers: Vec<u32>,
    /// Elements queued at consumers that crashed.
    pub lost_in_flight: u64,
    pub peak_buffer: usize,
    pub histograms: BTreeMap<u32, Vec<u64>>,
    /// Element bytes appended to each consumer's object.
    pub object_bytes: BTreeMap<u32, u64>,
}

impl Cluster {
    pub fn stream_create(&mut self, desc: StreamDescriptor) -> Result<u64> {
        desc.validate()?;
        if self.streams.streams.contains_key(&desc.stream_id) {
            return Err(Error::InvalidDescriptor(format!(
                "stream {} exists",
                desc.stream_id
            )));
        }
        let route = desc
            .producers
            .iter()
            .map(|p| (*p, desc.route(*p).expect("producer")))
            .collect();
        let consumers = desc
            .consumers
            .iter()
            .map(|c| (*c, ConsumerState::default()))
            .collect();
        let id = desc.stream_id;
        self.addb.emit(
            self.now(),
            self.rank_node(desc.consumers[0]),
            Subsystem::Stream,
            "create",
            desc.producers.len() as f64,
            tags([
                ("stream", id.to_string()),
                ("consumers", desc.consumers.len().to_string()),
            ]),
        );
        self.streams.streams.insert(
            id,
            StreamState {
                desc,
                route,
                consumers,
                next_seq: BTreeMap::new(),
                finished: BTreeSet::new(),
                crashed_producers: BTreeSet::new(),
                crash_plan: BTreeMap::new(),
                peak_buffer: 0,
                lost: 0,
                terminated: false,
            },
        );
        Ok(id)
    }

    pub fn stream_route(&self, stream: u64, producer: u32) -> Option<u32> {
        self.streams
            .streams
            .get(&stream)?
            .route
            .get(&producer)
            .copied()
    }

    pub fn stream_attach(
        &mut self,
        stream: u64,
        consumer: u32,
        computation: Computation,
    ) -> Result<()> {
        let block_size = match &computation {
            Computation::WriteToObject { object } => {
                self.store()?.obj_meta(*object)?.spec.block_size() as usize
            }
            Computation::Histogram {
                bins,
                lo,
                hi,
                field_offset,
            } => {
                let size = self.streams.get(stream)?.desc.element_size;
                if *bins == 0 || !(lo < hi) || field_offset + 8 > size {
                    return Err(Error::InvalidParams("bad histogram".into()));
                }
                0
            }
            Computation::Plugin(_) => 0,
        };
        let st = self.streams.get(stream)?;
        let c = st
            .consumers
            .get_mut(&consumer)
            .ok_or(Error::NotAConsumer(consumer))?;
        if c.computation.is_some() {
            return Err(Error::AlreadyAttached(consumer));
        }
        if let Computation::Histogram { bins, .. } = &computation {
            c.histogram = vec![0; *bins];
        }
        c.block_size = block_size;
        c.computation = Some(computation);
        Ok(())
    }

    /// Crash `producer` on its send with sequence number `seq`. That
    /// element may or may not reach the consumer; it is never acked.
    pub fn schedule_producer_crash(&mut self, stream: u64, producer: u32, seq: u64) -> Result<()> {
        self.streams.get(stream)?.crash_plan.insert(producer, seq);
        Ok(())
    }

    pub fn crash_consumer(&mut self, stream: u64, consumer: u32) -> Result<()> {
        let st = self.streams.get(stream)?;
        if !st.consumers.contains_key(&consumer) {
            return Err(Error::NotAConsumer(consumer));
        }
        st.crash_consumer(consumer);
        Ok(())
    }

    /// Enqueues one element; the returned sequence number is the ack.
    pub fn stream_send(&mut self, stream: u64, producer: u32, element: &[u8]) -> Result<u64> {
        let st = self.streams.get(stream)?;
        if st.terminated {
            return Err(Error::StreamTerminated(stream));
        }
        if !st.desc.producers.contains(&producer) {
            return Err(Error::NotAProducer(producer));
        }
        if st.crashed_producers.contains(&producer) {
            return Err(Error::ProducerCrashed(producer));
        }
        if st.finished.contains(&producer) {
            return Err(Error::StreamTerminated(stream));
        }
        if element.len() != st.desc.element_size {
            return Err(Error::SchemaMismatch {
                expected: st.desc.element_size,
                actual: element.len(),
            });
        }
        let consumer = *st
            .route
            .get(&producer)
            .ok_or(Error::NoLiveConsumer(stream))?;
        if st.consumers[&consumer].channel.len() >= st.desc.capacity {
            self.drain_consumer(stream, consumer, false)?;
        }
        let seq = {
            let st = self.streams.get(stream)?;
            *st.next_seq.entry(producer).or_default()
        };
        let wire = encode_element(stream, seq, element);
        let crash_now = self.streams.get(stream)?.crash_plan.get(&producer) == Some(&seq);
        if crash_now {
            let delivered = self.rng.gen_bool(0.5);
            let st = self.streams.get(stream)?;
            st.crashed_producers.insert(producer);
            if delivered {
                let c = st.consumers.get_mut(&consumer).expect("routed consumer");
                c.channel.push_back((producer, wire));
                st.peak_buffer = st.peak_buffer.max(c.channel.len());
            }
            return Err(Error::ProducerCrashed(producer));
        }
        let cost = self.send(
            self.rank_node(producer),
            self.rank_node(consumer),
            "STREAM",
            wire.len() as u64,
        )?;
        self.clock.advance(cost);
        let st = self.streams.get(stream)?;
        let c = st.consumers.get_mut(&consumer).expect("routed consumer");
        c.channel.push_back((producer, wire));
        st.peak_buffer = st.peak_buffer.max(c.channel.len());
        st.next_seq.insert(producer, seq + 1);
        Ok(seq)
    }

    /// The producer will send nothing more.
    pub fn stream_finish(&mut self, stream: u64, producer: u32) -> Result<()> {
        let st = self.streams.get(stream)?;
        if !st.desc.producers.contains(&producer) {
            return Err(Error::NotAProducer(producer));
        }
        st.finished.insert(producer);
        Ok(())
    }

    /// Processes everything queued at `consumer`.
    pub fn drain_consumer(&mut self, stream: u64, consumer: u32, flush: bool) -> Result<()> {
        let st = self.streams.get(stream)?;
        let c = st
            .consumers
            .get_mut(&consumer)
            .ok_or(Error::NotAConsumer(consumer))?;
        if c.crashed {
            return Ok(());
        }
        while let Some((producer, wire)) = c.channel.pop_front() {
            let (_, seq, bytes) = decode_element(&wire)?;
            match &mut c.computation {
                Some(Computation::WriteToObject { .. }) => c.buffer.extend_from_slice(bytes),
                Some(Computation::Histogram {
                    field_offset,
                    bins,
                    lo,
                    hi,
                }) => {
                    let v = f64::from_le_bytes(
                        bytes[*field_offset..*field_offset + 8]
                            .try_into()
                            .expect("8 bytes"),
                    );
                    c.histogram[histogram_bin(v, *bins, *lo, *hi)] += 1;
                }
                Some(Computation::Plugin(sink)) => sink(producer, seq, bytes),
                None => {}
            }
            c.delivered += 1;
        }
        let Some(Computation::WriteToObject { object }) = c.computation else {
            return Ok(());
        };
        let bs = c.block_size;
        let blocks = if flush {
            c.buffer.len().div_ceil(bs)
        } else if c.buffer.len() >= FLUSH_BLOCKS * bs {
            c.buffer.len() / bs
        } else {
            0
        };
        if blocks == 0 {
            return Ok(());
        }
        let take = (blocks * bs).min(c.buffer.len());
        let mut data: Vec<u8> = c.buffer.drain(..take).collect();
        c.written_bytes += data.len() as u64;
        data.resize(blocks * bs, 0);
        let start = c.next_block;
        c.next_block += blocks as u64;
        let node = self.rank_node(consumer);
        self.with_store(node, |s| s.obj_write(object, start, data))
    }

    /// Delivers everything in flight and closes the stream. Every producer
    /// must have finished or crashed.
    pub fn stream_terminate(&mut self, stream: u64) -> Result<DrainReport> {
        let st = self.streams.get(stream)?;
        if st.terminated {
            return Err(Error::StreamTerminated(stream));
        }
        if st
            .desc
            .producers
            .iter()
            .any(|p| !st.finished.contains(p) && !st.crashed_producers.contains(p))
        {
            return Err(Error::ProducersActive(stream));
        }
        for c in st.desc.consumers.clone() {
            self.drain_consumer(stream, c, true)?;
        }
        let first_node = {
            let first = self.streams.get(stream)?.desc.consumers[0];
            self.rank_node(first)
        };
        let st = self.streams.get(stream)?;
        st.terminated = true;
        let mut report = DrainReport {
            crashed_producers: st.crashed_producers.iter().copied().collect(),
            lost_in_flight: st.lost,
            peak_buffer: st.peak_buffer,
            ..DrainReport::default()
        };
        for (rank, c) in &st.consumers {
            report.per_consumer.insert(*rank, c.delivered);
            report.total += c.delivered;
            if c.crashed {
                report.crashed_consumers.push(*rank);
            }
            if !c.histogram.is_empty() {
                report.histograms.insert(*rank, c.histogram.clone());
            }
            if matches!(c.computation, Some(Computation::WriteToObject { .. })) {
                report.object_bytes.insert(*rank, c.written_bytes);
            }
        }
        let node = first_node;
        self.addb.emit(
            self.now(),
            node,
            Subsystem::Stream,
            "terminate",
            report.total as f64,
            tags([
                ("stream", stream.to_string()),
                (
                    "crashed_producers",
                    report.crashed_producers.len().to_string(),
                ),
                ("peak", report.peak_buffer.to_string()),
            ]),
        );
        Ok(report)
    }
}
