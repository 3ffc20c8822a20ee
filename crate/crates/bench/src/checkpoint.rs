//! Particle checkpoint and restart through storage windows, compared with
//! a gather-to-one collective object write.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use sage_core::stream::PARTICLE_BYTES;
use sage_core::window::Backing;
use sage_core::{BlockSpec, Cluster, Layout, ObjectId, TierId};

use crate::config::{CheckpointMode, CheckpointParams, Workload};
use crate::error::Result;
use crate::results::emit_result;

const BLOCK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointRun {
    pub checkpoint_time: f64,
    pub restart_time: f64,
    /// Particles whose restarted bytes differ from the checkpoint.
    pub mismatched: u64,
}

impl CheckpointRun {
    pub fn total(&self) -> f64 {
        self.checkpoint_time + self.restart_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointOutcome {
    pub verified: bool,
    /// Keyed by `<mode>.p<processes>`.
    pub runs: BTreeMap<String, CheckpointRun>,
    /// Baseline time over windows time, per process count.
    pub ratios: BTreeMap<u32, f64>,
}

fn mismatched(a: &[u8], b: &[u8]) -> u64 {
    a.chunks(PARTICLE_BYTES)
        .zip(b.chunks(PARTICLE_BYTES))
        .filter(|(x, y)| x != y)
        .count() as u64
        + (a.len().abs_diff(b.len()) / PARTICLE_BYTES) as u64
}

fn barrier_time(cl: &Cluster, processes: u32) -> f64 {
    2.0 * (processes as f64).log2().ceil() * cl.config().network.latency
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

pub fn checkpoint_windows(
    cl: &mut Cluster,
    data: &[u8],
    processes: u32,
    sync: bool,
) -> Result<CheckpointRun> {
    let share = data.len() / processes as usize;
    let mut run = CheckpointRun::default();
    let mut ids = Vec::new();
    for rank in 0..processes {
        let t0 = cl.now();
        let id = cl.win_alloc(rank, share as u64, Backing::storage())?;
        let mine = &data[rank as usize * share..(rank as usize + 1) * share];
        cl.win_put(rank, id, 0, mine)?;
        if sync {
            cl.win_sync(rank, id)?;
        }
        run.checkpoint_time = run.checkpoint_time.max(cl.now() - t0);
        ids.push(id);
    }
    cl.restart_all()?;
    for (rank, &id) in ids.iter().enumerate() {
        let t0 = cl.now();
        let got = cl.win_get(rank as u32, id, 0, share as u64)?;
        run.restart_time = run.restart_time.max(cl.now() - t0);
        run.mismatched += mismatched(&data[rank * share..(rank + 1) * share], &got);
    }
    for id in ids {
        cl.win_free(id)?;
    }
    Ok(run)
}

pub fn checkpoint_baseline(cl: &mut Cluster, data: &[u8], processes: u32) -> Result<CheckpointRun> {
    let share = data.len() as u64 / processes as u64;
    let aggregator = cl.rank_node(0);
    let devices = tier_one_devices(cl)?;
    let layout = Layout::striped(devices.len() as u32, 0, devices);
    let object: ObjectId = cl.with_store(aggregator, |s| {
        let id = s.new_object_id();
        s.obj_create(id, BlockSpec::new(BLOCK)?, layout)?;
        Ok(id)
    })?;
    let mut run = CheckpointRun::default();

    let t0 = cl.now();
    for rank in 1..processes {
        let cost = cl.send(cl.rank_node(rank), aggregator, "GATHER", share)?;
        cl.clock().advance(cost);
    }
    cl.clock().advance(barrier_time(cl, processes));
    let mut padded = data.to_vec();
    padded.resize(
        (data.len() as u64).div_ceil(BLOCK) as usize * BLOCK as usize,
        0,
    );
    let blocks = padded.len() as u64 / BLOCK;
    cl.with_store(aggregator, |s| {
        let mut txn = s.begin();
        txn.obj_write(object, 0, padded);
        s.commit(&mut txn).map(|_| ())
    })?;
    run.checkpoint_time = cl.now() - t0;

    cl.restart_all()?;

    let t0 = cl.now();
    let mut got = cl.with_store(aggregator, |s| s.obj_read(object, 0, blocks))?;
    got.truncate(data.len());
    for rank in 1..processes {
        let cost = cl.send(aggregator, cl.rank_node(rank), "SCATTER", share)?;
        cl.clock().advance(cost);
    }
    cl.clock().advance(barrier_time(cl, processes));
    run.restart_time = cl.now() - t0;
    run.mismatched = mismatched(data, &got);
    cl.with_store(aggregator, |s| s.obj_delete(object))?;
    Ok(run)
}

pub fn run_checkpoint(cl: &mut Cluster, params: &CheckpointParams) -> Result<CheckpointOutcome> {
    let mut data = vec![0u8; params.particles as usize * PARTICLE_BYTES];
    cl.rng().fill_bytes(&mut data);
    let mut outcome = CheckpointOutcome {
        verified: true,
        runs: BTreeMap::new(),
        ratios: BTreeMap::new(),
    };
    for &p in &params.processes {
        for &mode in &params.modes {
            let run = match mode {
                CheckpointMode::Windows => checkpoint_windows(cl, &data, p, params.sync)?,
                CheckpointMode::Baseline => checkpoint_baseline(cl, &data, p)?,
            };
            let m = mode.as_str();
            emit_result(
                cl,
                Workload::Checkpoint,
                &format!("{m}.p{p}.checkpoint_time"),
                run.checkpoint_time,
            );
            emit_result(
                cl,
                Workload::Checkpoint,
                &format!("{m}.p{p}.restart_time"),
                run.restart_time,
            );
            emit_result(
                cl,
                Workload::Checkpoint,
                &format!("{m}.p{p}.mismatched"),
                run.mismatched as f64,
            );
            outcome.verified &= run.mismatched == 0;
            outcome.runs.insert(format!("{m}.p{p}"), run);
        }
        let key = |m: CheckpointMode| format!("{}.p{p}", m.as_str());
        if let (Some(w), Some(b)) = (
            outcome.runs.get(&key(CheckpointMode::Windows)),
            outcome.runs.get(&key(CheckpointMode::Baseline)),
        ) {
            let ratio = b.total() / w.total();
            emit_result(cl, Workload::Checkpoint, &format!("ratio.p{p}"), ratio);
            outcome.ratios.insert(p, ratio);
        }
    }
    emit_result(
        cl,
        Workload::Checkpoint,
        "verified",
        outcome.verified as u8 as f64,
    );
    Ok(outcome)
}
