//! Particle simulation whose selected particles are either streamed to a
//! few consumer ranks that write them out, or gathered and written by all
//! ranks together after every step.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use sage_core::stream::{Computation, StreamDescriptor, PARTICLE_BYTES};
use sage_core::{BlockSpec, Cluster, Error, Layout, ObjectId, TierId};

use crate::config::{OffloadParams, Workload};
use crate::error::Result;
use crate::results::emit_result;

const BLOCK: u64 = 4096;
/// Offset of the f64 compared against the threshold.
pub const VALUE_OFFSET: usize = 16;

/// `selected[step][rank]` holds the particles a rank emits in a step.
pub type Selection = Vec<Vec<Vec<Vec<u8>>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRun {
    pub sim_ranks: u32,
    pub consumers: u32,
    pub streamed: u64,
    pub offload_time: f64,
    pub baseline_time: f64,
    pub ratio: f64,
    pub conserved: bool,
    pub fifo: bool,
    pub baseline_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadOutcome {
    pub verified: bool,
    pub runs: Vec<OffloadRun>,
}

pub fn particle(rank: u32, step: u32, index: u32, value: f64, rest: [f64; 5]) -> Vec<u8> {
    let mut p = Vec::with_capacity(PARTICLE_BYTES);
    p.extend_from_slice(&rank.to_le_bytes());
    p.extend_from_slice(&step.to_le_bytes());
    p.extend_from_slice(&index.to_le_bytes());
    p.extend_from_slice(&[0; 4]);
    p.extend_from_slice(&value.to_le_bytes());
    for v in rest {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p
}

fn field_u32(p: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(p[at..at + 4].try_into().expect("4 bytes"))
}

/// Runs the particle loop and keeps what crosses the threshold.
pub fn simulate(cl: &mut Cluster, sim_ranks: u32, params: &OffloadParams) -> Selection {
    (0..params.steps)
        .map(|step| {
            (0..sim_ranks)
                .map(|rank| {
                    let rng = cl.rng();
                    (0..params.particles_per_rank)
                        .filter_map(|i| {
                            let value: f64 = rng.gen();
                            let rest: [f64; 5] = rng.gen();
                            (value > params.threshold).then(|| particle(rank, step, i, value, rest))
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn tier_one_devices(cl: &Cluster) -> Result<Vec<sage_core::DeviceId>> {
    let store = cl.store()?;
    let n = cl
        .devices()
        .in_tier(TierId::FASTEST)
        .filter(|d| store.device_placeable(d.id()))
        .count();
    Ok(cl.pick_devices(TierId::FASTEST, n.max(1))?)
}

fn create_object(
    cl: &mut Cluster,
    client: sage_core::NodeId,
    devices: Vec<sage_core::DeviceId>,
) -> Result<ObjectId> {
    let layout = Layout::striped(devices.len() as u32, 0, devices);
    Ok(cl.with_store(client, |s| {
        let id = s.new_object_id();
        s.obj_create(id, BlockSpec::new(BLOCK)?, layout)?;
        Ok(id)
    })?)
}

fn read_bytes(
    cl: &mut Cluster,
    client: sage_core::NodeId,
    object: ObjectId,
    len: u64,
) -> Result<Vec<u8>> {
    if len == 0 {
        return Ok(Vec::new());
    }
    let mut data = cl.with_store(client, |s| s.obj_read(object, 0, len.div_ceil(BLOCK)))?;
    data.truncate(len as usize);
    Ok(data)
}

fn compute_time(cl: &Cluster, params: &OffloadParams) -> f64 {
    params.particles_per_rank as f64 * PARTICLE_BYTES as f64 / cl.config().compute.bytes_per_second
}

struct Streamed {
    time: f64,
    conserved: bool,
    fifo: bool,
}

/// Producers are ranks `0..sim_ranks`, consumers the next `consumers`
/// ranks. A step costs the slower of the producers (compute plus sends) and
/// the consumers (draining and writing).
fn run_streamed(
    cl: &mut Cluster,
    selection: &Selection,
    sim_ranks: u32,
    consumers: u32,
    params: &OffloadParams,
) -> Result<Streamed> {
    let producers: Vec<u32> = (0..sim_ranks).collect();
    let consumer_ranks: Vec<u32> = (sim_ranks..sim_ranks + consumers).collect();
    let stream = sim_ranks as u64;
    cl.stream_create(StreamDescriptor::new(
        stream,
        producers.clone(),
        consumer_ranks.clone(),
        PARTICLE_BYTES,
    ))?;
    let devices = tier_one_devices(cl)?;
    let mut objects = BTreeMap::new();
    for (i, &c) in consumer_ranks.iter().enumerate() {
        let node = cl.rank_node(c);
        let object = create_object(cl, node, vec![devices[i % devices.len()]])?;
        cl.stream_attach(stream, c, Computation::WriteToObject { object })?;
        objects.insert(c, object);
    }
    let compute = compute_time(cl, params);
    let mut total = 0.0;
    for step in selection {
        let mut producer_path: f64 = 0.0;
        for (&p, elements) in producers.iter().zip(step) {
            let t0 = cl.now();
            for e in elements {
                cl.stream_send(stream, p, e)?;
            }
            producer_path = producer_path.max(compute + cl.now() - t0);
        }
        let mut consumer_path: f64 = 0.0;
        for &c in &consumer_ranks {
            let t0 = cl.now();
            cl.drain_consumer(stream, c, false)?;
            consumer_path = consumer_path.max(cl.now() - t0);
        }
        total += producer_path.max(consumer_path);
    }
    for &p in &producers {
        cl.stream_finish(stream, p)?;
    }
    let mut flush: f64 = 0.0;
    for &c in &consumer_ranks {
        let t0 = cl.now();
        cl.drain_consumer(stream, c, true)?;
        flush = flush.max(cl.now() - t0);
    }
    total += flush;
    let report = cl.stream_terminate(stream)?;

    let mut received = Vec::new();
    let mut fifo = true;
    for (&c, &object) in &objects {
        let len = report.object_bytes.get(&c).copied().unwrap_or(0);
        let node = cl.rank_node(c);
        let data = read_bytes(cl, node, object, len)?;
        let mut last: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
        for e in data.chunks(PARTICLE_BYTES) {
            let key = (field_u32(e, 4), field_u32(e, 8));
            if let Some(prev) = last.insert(field_u32(e, 0), key) {
                fifo &= prev < key;
            }
            received.push(e.to_vec());
        }
        cl.with_store(node, |s| s.obj_delete(object))?;
    }
    let mut sent: Vec<Vec<u8>> = selection.iter().flatten().flatten().cloned().collect();
    sent.sort();
    received.sort();
    Ok(Streamed {
        time: total,
        conserved: sent == received && report.total == sent.len() as u64,
        fifo,
    })
}

/// Every step: compute, gather to rank 0's node, barrier, one write.
fn run_baseline(
    cl: &mut Cluster,
    selection: &Selection,
    sim_ranks: u32,
    params: &OffloadParams,
) -> Result<(f64, bool)> {
    let aggregator = cl.rank_node(0);
    let devices = tier_one_devices(cl)?;
    let object = create_object(cl, aggregator, devices)?;
    let compute = compute_time(cl, params);
    let barrier = 2.0 * (sim_ranks as f64).log2().ceil() * cl.config().network.latency;
    let mut total = 0.0;
    let mut next_block = 0;
    let mut expected = Vec::new();
    let mut writes = Vec::new();
    for step in selection {
        let t0 = cl.now();
        let mut data = Vec::new();
        for (rank, elements) in step.iter().enumerate() {
            let bytes: Vec<u8> = elements.concat();
            let cost = cl.send(
                cl.rank_node(rank as u32),
                aggregator,
                "GATHER",
                bytes.len() as u64,
            )?;
            cl.clock().advance(cost);
            data.extend_from_slice(&bytes);
        }
        cl.clock().advance(barrier);
        if !data.is_empty() {
            expected.extend_from_slice(&data);
            let len = data.len() as u64;
            let blocks = len.div_ceil(BLOCK);
            data.resize((blocks * BLOCK) as usize, 0);
            let start = next_block;
            cl.with_store(aggregator, |s| {
                let mut txn = s.begin();
                txn.obj_write(object, start, data);
                s.commit(&mut txn).map(|_| ())
            })?;
            writes.push((start, blocks, len as usize));
            next_block += blocks;
        }
        total += compute + cl.now() - t0;
    }
    let mut got = Vec::new();
    for (start, blocks, len) in writes {
        let mut chunk = cl.with_store(aggregator, |s| s.obj_read(object, start, blocks))?;
        chunk.truncate(len);
        got.extend_from_slice(&chunk);
    }
    cl.with_store(aggregator, |s| s.obj_delete(object))?;
    Ok((total, got == expected))
}

pub fn run_offload(cl: &mut Cluster, params: &OffloadParams) -> Result<OffloadOutcome> {
    let mut outcome = OffloadOutcome {
        verified: true,
        runs: Vec::new(),
    };
    for &s in &params.sim_ranks {
        let c = params.consumers_for(s);
        if c > s {
            return Err(
                Error::InvalidParams(format!("{c} consumers for {s} simulation ranks")).into(),
            );
        }
        let selection = simulate(cl, s, params);
        let streamed_count = selection.iter().flatten().map(Vec::len).sum::<usize>() as u64;
        let streamed = run_streamed(cl, &selection, s, c, params)?;
        let (baseline_time, baseline_exact) = run_baseline(cl, &selection, s, params)?;
        let run = OffloadRun {
            sim_ranks: s,
            consumers: c,
            streamed: streamed_count,
            offload_time: streamed.time,
            baseline_time,
            ratio: baseline_time / streamed.time,
            conserved: streamed.conserved,
            fifo: streamed.fifo,
            baseline_exact,
        };
        emit_result(cl, Workload::Offload, &format!("s{s}.consumers"), c as f64);
        emit_result(
            cl,
            Workload::Offload,
            &format!("s{s}.streamed"),
            run.streamed as f64,
        );
        emit_result(
            cl,
            Workload::Offload,
            &format!("s{s}.offload_time"),
            run.offload_time,
        );
        emit_result(
            cl,
            Workload::Offload,
            &format!("s{s}.baseline_time"),
            run.baseline_time,
        );
        emit_result(cl, Workload::Offload, &format!("s{s}.ratio"), run.ratio);
        let ok = run.conserved && run.fifo && run.baseline_exact;
        emit_result(
            cl,
            Workload::Offload,
            &format!("s{s}.verified"),
            ok as u8 as f64,
        );
        outcome.verified &= ok;
        outcome.runs.push(run);
    }
    emit_result(
        cl,
        Workload::Offload,
        "verified",
        outcome.verified as u8 as f64,
    );
    Ok(outcome)
}
