//! Acceptance suite: one test per criterion, each checked against an
//! independent oracle and a wall-clock limit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sage_bench::config::{BenchConfig, CheckpointParams, OffloadParams, Workload};
use sage_bench::dht::dht_capacity;
use sage_bench::offload::run_offload;
use sage_core::fault::CrashInjector;
use sage_core::harness::{DeviceSpec, NodeSpec, Role};
use sage_core::hsm::{extent_inventory, HsmPolicy};
use sage_core::index::{DelAck, Record};
use sage_core::ship::{ShipTarget, CHECKSUM64, COUNT_MATCH, HISTOGRAM, SUM_I64};
use sage_core::stream::{Computation, StreamDescriptor};
use sage_core::telemetry::{Addb, Clock};
use sage_core::tier::{DeviceProfile, DeviceSet};
use sage_core::window::Backing;
use sage_core::{
    BlockSpec, Cluster, ClusterConfig, DeviceId, Error, IndexId, Layout, NodeId, ObjectId, Store,
    StoreConfig, TierId,
};

const BS: usize = 4096;

fn report(n: u32, what: &str, started: Instant, limit: Duration, detail: &str) {
    let took = started.elapsed();
    let ok = took < limit;
    println!(
        "criterion {n:>2} {}: {what} in {:.2}s (limit {}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {n} took {took:?}, limit {limit:?}");
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------- store rig

struct Rig {
    _dir: tempfile::TempDir,
    path: std::path::PathBuf,
    devices: Arc<DeviceSet>,
    injector: Arc<CrashInjector>,
    log_cap: u64,
}

fn rig(devices: u32, blocks_per_device: u64, log_cap: u64) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    let injector = Arc::new(CrashInjector::new());
    let profile = DeviceProfile {
        capacity_bytes: blocks_per_device * BS as u64,
        ..DeviceProfile::default_for(TierId(2))
    };
    let specs: Vec<_> = (0..devices)
        .map(|i| (DeviceId(i), TierId(2), profile))
        .collect();
    let set = DeviceSet::open_dir(&path.join("dev"), BS as u64, &specs, injector.clone()).unwrap();
    Rig {
        _dir: dir,
        path,
        devices: Arc::new(set),
        injector,
        log_cap,
    }
}

fn open(r: &Rig) -> Store {
    let config = StoreConfig {
        log_cap_bytes: r.log_cap,
        ..StoreConfig::default()
    };
    Store::open(
        r.path.join("meta"),
        config,
        r.devices.clone(),
        r.injector.clone(),
        Clock::new(),
        Arc::new(Addb::new()),
    )
    .unwrap()
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut v = vec![0; n];
    rng.fill_bytes(&mut v);
    v
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_dht_capacity_arithmetic() {
    let t = Instant::now();
    let c = dht_capacity(8, 100_000_000, 4);
    assert_eq!(c.per_process, 500_000_000);
    assert_eq!(c.global, 4_000_000_000);
    assert_eq!(c.global_excluding_overflow, 800_000_000);
    let c = dht_capacity(8, 1000, 4);
    assert_eq!((c.per_process, c.global), (5000, 40_000));
    report(
        1,
        "P=8 V=1e8 F=4 gives 4000e6 and 800e6",
        t,
        Duration::from_secs(1),
        "",
    );
}

// ---------------------------------------------------------------- 2

#[derive(Debug, Clone, Default, PartialEq)]
struct Model {
    objects: BTreeMap<ObjectId, Vec<u8>>,
    indices: BTreeMap<IndexId, BTreeMap<Vec<u8>, Vec<u8>>>,
}

fn snapshot(s: &mut Store, index_ids: &BTreeSet<IndexId>) -> Model {
    let metas: Vec<(ObjectId, u64)> = s.objects().map(|m| (m.id, m.size_blocks)).collect();
    let mut m = Model::default();
    for (id, size) in metas {
        m.objects.insert(id, s.obj_read(id, 0, size).unwrap());
    }
    for &i in index_ids {
        if s.idx_exists(i) {
            let records = s
                .index(i)
                .unwrap()
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            m.indices.insert(i, records);
        }
    }
    m
}

fn random_key(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(1..=3);
    (0..len).map(|_| rng.gen_range(b'a'..=b'd')).collect()
}

#[test]
fn c02_txn_atomicity_crash_fuzz() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rig(3, 2048, 48 << 10);
    let mut s = open(&r);
    let mut model = Model::default();
    let mut index_ids = BTreeSet::new();
    let (mut crashes, mut committed_on_crash, mut txns) = (0u32, 0u32, 0u32);
    let layouts = [
        Layout::striped(1, 0, vec![DeviceId(0)]),
        Layout::striped(2, 1, vec![DeviceId(0), DeviceId(1), DeviceId(2)]),
        Layout::mirrored(vec![DeviceId(1), DeviceId(2)]),
    ];
    while crashes < 500 {
        txns += 1;
        let mut next = model.clone();
        let mut txn = s.begin();
        let mut events = 1u64;
        for _ in 0..rng.gen_range(1..=5) {
            let live: Vec<ObjectId> = next.objects.keys().copied().collect();
            let idx: Vec<IndexId> = next.indices.keys().copied().collect();
            match rng.gen_range(0..6) {
                0 if live.len() < 6 => {
                    let id = s.new_object_id();
                    let layout = layouts.choose(&mut rng).unwrap().clone();
                    txn.obj_create(id, BlockSpec::new(BS as u64).unwrap(), layout);
                    next.objects.insert(id, Vec::new());
                }
                1 | 2 if !live.is_empty() => {
                    let id = *live.choose(&mut rng).unwrap();
                    let start = rng.gen_range(0..6usize);
                    let blocks = rng.gen_range(1..=3usize);
                    let data = random_bytes(&mut rng, blocks * BS);
                    txn.obj_write(id, start as u64, data.clone());
                    let content = next.objects.get_mut(&id).unwrap();
                    if content.len() < (start + blocks) * BS {
                        content.resize((start + blocks) * BS, 0);
                    }
                    content[start * BS..(start + blocks) * BS].copy_from_slice(&data);
                    events += 2 * blocks as u64;
                }
                3 if !live.is_empty() => {
                    let id = *live.choose(&mut rng).unwrap();
                    txn.obj_delete(id);
                    next.objects.remove(&id);
                }
                4 if idx.len() < 4 => {
                    let id = s.new_index_id();
                    txn.idx_create(id);
                    index_ids.insert(id);
                    next.indices.insert(id, BTreeMap::new());
                }
                _ if !idx.is_empty() => {
                    let id = *idx.choose(&mut rng).unwrap();
                    let keys: Vec<Vec<u8>> = (0..rng.gen_range(1..=3))
                        .map(|_| random_key(&mut rng))
                        .collect();
                    let map = next.indices.get_mut(&id).unwrap();
                    if rng.gen_bool(0.7) {
                        let records: Vec<Record> = keys
                            .iter()
                            .map(|k| {
                                Record::new(k.clone(), {
                                    let n = rng.gen_range(0..12);
                                    random_bytes(&mut rng, n)
                                })
                            })
                            .collect();
                        for rec in &records {
                            map.insert(rec.key.clone(), rec.value.clone());
                        }
                        txn.idx_put(id, records);
                    } else {
                        for k in &keys {
                            map.remove(k);
                        }
                        txn.idx_del(id, keys);
                    }
                }
                _ => continue,
            }
            events += 1;
        }
        let k = rng.gen_range(1..=events + 2);
        r.injector.arm(k);
        match s.commit(&mut txn) {
            Ok(_) => {
                r.injector.disarm();
                model = next;
            }
            Err(Error::Crashed) => {
                crashes += 1;
                drop(s);
                r.injector.reset();
                s = open(&r);
                let got = snapshot(&mut s, &index_ids);
                if got == next {
                    committed_on_crash += 1;
                    model = next;
                } else {
                    assert!(
                        got == model,
                        "crash {crashes} at event {k}: state is neither before nor after"
                    );
                }
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    drop(s);
    let mut s = open(&r);
    assert!(snapshot(&mut s, &index_ids) == model);
    report(
        2,
        "500 crash points all-or-nothing",
        t,
        Duration::from_secs(60),
        &format!("({txns} txns, {committed_on_crash} redone after crash)"),
    );
}

// ---------------------------------------------------------------- 3

fn parity_population(seed: u64, data_units: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = data_units + 1;
    let r = rig(width + 1, 512, 64 << 20);
    let spare = DeviceId(width);
    let mut s = open(&r);
    let stripe: Vec<DeviceId> = (0..width).map(DeviceId).collect();
    let mut expected = BTreeMap::new();
    for _ in 0..rng.gen_range(1..=4) {
        let id = s.new_object_id();
        s.obj_create(
            id,
            BlockSpec::new(BS as u64).unwrap(),
            Layout::striped(data_units, 1, stripe.clone()),
        )
        .unwrap();
        let blocks = rng.gen_range(1..=13usize);
        let mut content = random_bytes(&mut rng, blocks * BS);
        s.obj_write(id, 0, content.clone()).unwrap();
        for _ in 0..rng.gen_range(0..3) {
            let at = rng.gen_range(0..blocks);
            let patch = random_bytes(&mut rng, BS);
            s.obj_write(id, at as u64, patch.clone()).unwrap();
            content[at * BS..(at + 1) * BS].copy_from_slice(&patch);
        }
        expected.insert(id, content);
    }
    let failed = DeviceId(rng.gen_range(0..width));
    r.devices.get(failed).unwrap().fail();
    s.rebuild_device(failed, Some(spare)).unwrap();
    for (id, content) in &expected {
        let blocks = (content.len() / BS) as u64;
        assert!(
            s.obj_read(*id, 0, blocks).unwrap() == *content,
            "seed {seed}: rebuilt read differs"
        );
    }
    // the rebuilt copy must carry the data on its own: lose another original
    let second = DeviceId((failed.0 + 1) % width);
    r.devices.get(second).unwrap().fail();
    for (id, content) in &expected {
        let blocks = (content.len() / BS) as u64;
        assert!(
            s.obj_read(*id, 0, blocks).unwrap() == *content,
            "seed {seed}: read after second loss differs"
        );
    }
}

#[test]
fn c03_parity_repair_bit_exact() {
    let t = Instant::now();
    for seed in 0..200 {
        parity_population(seed, 2);
        parity_population(10_000 + seed, 4);
    }
    report(
        3,
        "200 populations each on striped(2,1) and (4,1)",
        t,
        Duration::from_secs(60),
        "",
    );
}

// ---------------------------------------------------------------- 4

fn kv_run(seed: u64, ops: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rig(1, 64, 1 << 20);
    let mut s = open(&r);
    let idx = s.new_index_id();
    s.idx_create(idx).unwrap();
    let mut oracle: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let key = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let k: u16 = rng.gen_range(0..512);
        let mut v = k.to_be_bytes().to_vec();
        v.truncate(rng.gen_range(1..=2));
        v
    };
    for op in 0..ops {
        match rng.gen_range(0..4) {
            0 => {
                let records: Vec<Record> = (0..rng.gen_range(1..=3))
                    .map(|_| {
                        let k = key(&mut rng);
                        let v = {
                            let n = rng.gen_range(0..16);
                            random_bytes(&mut rng, n)
                        };
                        Record::new(k, v)
                    })
                    .collect();
                for rec in &records {
                    oracle.insert(rec.key.clone(), rec.value.clone());
                }
                s.idx_put(idx, records).unwrap();
            }
            1 => {
                let keys: Vec<Vec<u8>> = (0..rng.gen_range(1..=3)).map(|_| key(&mut rng)).collect();
                let want: Vec<Option<Vec<u8>>> =
                    keys.iter().map(|k| oracle.get(k).cloned()).collect();
                assert_eq!(
                    s.idx_get(idx, &keys).unwrap(),
                    want,
                    "seed {seed} op {op} get"
                );
            }
            2 => {
                let keys: Vec<Vec<u8>> = (0..rng.gen_range(1..=3)).map(|_| key(&mut rng)).collect();
                let want: Vec<DelAck> = keys
                    .iter()
                    .map(|k| match oracle.remove(k) {
                        Some(_) => DelAck::Deleted,
                        None => DelAck::NotFound,
                    })
                    .collect();
                assert_eq!(
                    s.idx_del(idx, keys).unwrap(),
                    want,
                    "seed {seed} op {op} del"
                );
            }
            _ => {
                let probes: Vec<Vec<u8>> =
                    (0..rng.gen_range(1..=2)).map(|_| key(&mut rng)).collect();
                let count = rng.gen_range(1..=5);
                let got = s.idx_next(idx, &probes, count).unwrap();
                for (p, g) in probes.iter().zip(got) {
                    let want: Vec<(Vec<u8>, Vec<u8>)> = oracle
                        .iter()
                        .filter(|(k, _)| k.as_slice() > p.as_slice())
                        .take(count)
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect();
                    let g: Vec<(Vec<u8>, Vec<u8>)> =
                        g.into_iter().map(|r| (r.key, r.value)).collect();
                    assert_eq!(g, want, "seed {seed} op {op} next");
                }
            }
        }
    }
    drop(s);
    let s = open(&r);
    let stored: BTreeMap<Vec<u8>, Vec<u8>> = s
        .index(idx)
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    assert!(stored == oracle, "seed {seed}: state after reopen differs");
}

#[test]
fn c04_kv_matches_ordered_map() {
    let t = Instant::now();
    for seed in 0..50 {
        kv_run(seed, 10_000);
    }
    report(4, "10^4 ops x 50 seeds", t, Duration::from_secs(30), "");
}

// ---------------------------------------------------------------- 5

fn oracle_ship(function: &str, params: &[u8], blocks: &[(u64, &[u8])]) -> Vec<u8> {
    match function {
        CHECKSUM64 => {
            let basis = 0xcbf29ce484222325u64;
            let sum = blocks.iter().fold(basis, |acc, (i, b)| {
                let mut buf = i.to_le_bytes().to_vec();
                buf.extend_from_slice(b);
                acc.wrapping_add(fnv(&buf))
            });
            sum.to_le_bytes().to_vec()
        }
        SUM_I64 => {
            let mut sum = 0i64;
            for (_, b) in blocks {
                for w in b.chunks(8) {
                    sum = sum.wrapping_add(i64::from_le_bytes(w.try_into().unwrap()));
                }
            }
            sum.to_le_bytes().to_vec()
        }
        COUNT_MATCH => {
            let n = params.len();
            let mut count = 0u64;
            for (_, b) in blocks {
                for at in (0..b.len()).step_by(n) {
                    count += (&b[at..at + n] == params) as u64;
                }
            }
            count.to_le_bytes().to_vec()
        }
        HISTOGRAM => {
            let bins = u32::from_le_bytes(params.try_into().unwrap()) as u64;
            let mut h = vec![0u64; bins as usize];
            for (_, b) in blocks {
                for &x in *b {
                    h[(x as u64 * bins / 256) as usize] += 1;
                }
            }
            h.iter().flat_map(|c| c.to_le_bytes()).collect()
        }
        _ => unreachable!(),
    }
}

/// Object contents as `(block index, block)` with holes as zero blocks.
fn fetch(cl: &mut Cluster, id: ObjectId) -> Vec<(u64, Vec<u8>)> {
    let size = cl.store().unwrap().obj_meta(id).unwrap().size_blocks;
    let data = cl
        .with_store(NodeId(4), |s| s.obj_read(id, 0, size))
        .unwrap();
    data.chunks(BS)
        .enumerate()
        .map(|(i, b)| (i as u64, b.to_vec()))
        .collect()
}

fn random_object(cl: &mut Cluster, rng: &mut ChaCha8Rng) -> ObjectId {
    let tier = TierId(rng.gen_range(1..=4));
    let layout = match rng.gen_range(0..3) {
        0 => Layout::striped(1, 0, cl.pick_devices(tier, 1).unwrap()),
        1 => Layout::striped(3, 1, cl.pick_devices(tier, 4).unwrap()),
        _ => Layout::mirrored(cl.pick_devices(tier, 2).unwrap()),
    };
    let blocks = rng.gen_range(1..=12u64);
    let mut writes: Vec<(u64, Vec<u8>)> = Vec::new();
    for b in 0..blocks {
        if rng.gen_bool(0.8) {
            let mut data = random_bytes(rng, BS);
            if rng.gen_bool(0.3) {
                data.iter_mut().for_each(|x| *x &= 3);
            }
            writes.push((b, data));
        }
    }
    cl.with_store(NodeId(4), |s| {
        let id = s.new_object_id();
        s.obj_create(id, BlockSpec::new(BS as u64)?, layout)?;
        for (b, data) in writes {
            s.obj_write(id, b, data)?;
        }
        if s.obj_meta(id)?.size_blocks < blocks {
            s.obj_write(id, blocks - 1, vec![7; BS])?;
        }
        Ok(id)
    })
    .unwrap()
}

fn data_messages_during(cl: &mut Cluster, f: impl FnOnce(&mut Cluster)) -> usize {
    let before = cl.network().log().len();
    f(cl);
    cl.network().log()[before..]
        .iter()
        .filter(|m| m.verb == "DATA")
        .count()
}

#[test]
fn c05_ship_equivalence_and_locality() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(ClusterConfig::default(), dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let client = NodeId(4);
    let mut checked = 0;
    for target in 0..100 {
        let (ship_target, ids) = if target % 4 == 3 {
            let ids: Vec<ObjectId> = (0..rng.gen_range(1..=4))
                .map(|_| random_object(&mut cl, &mut rng))
                .collect();
            let c = cl
                .with_store(client, |s| {
                    let c = s.container_create(&format!("c{target}"), None)?;
                    for id in &ids {
                        s.container_add(c, *id)?;
                    }
                    Ok(c)
                })
                .unwrap();
            (ShipTarget::Container(c), ids)
        } else {
            let id = random_object(&mut cl, &mut rng);
            (ShipTarget::Object(id), vec![id])
        };
        let contents: Vec<Vec<(u64, Vec<u8>)>> = ids.iter().map(|id| fetch(&mut cl, *id)).collect();
        let pattern_len = 1usize << rng.gen_range(0..4);
        let pattern: Vec<u8> = (0..pattern_len).map(|_| rng.gen_range(0..4)).collect();
        let bins = (1u32 << rng.gen_range(0..=8)).to_le_bytes().to_vec();
        for (function, params) in [
            (CHECKSUM64, Vec::new()),
            (SUM_I64, Vec::new()),
            (COUNT_MATCH, pattern.clone()),
            (HISTOGRAM, bins.clone()),
        ] {
            let f = cl.functions().get(function).unwrap();
            let mut want = f.identity(&params);
            for blocks in &contents {
                let refs: Vec<(u64, &[u8])> =
                    blocks.iter().map(|(i, b)| (*i, b.as_slice())).collect();
                want = f.combine(&params, &want, &oracle_ship(function, &params, &refs));
            }
            let mut got = None;
            let data = data_messages_during(&mut cl, |cl| {
                got = Some(cl.ship(client, function, &params, ship_target).unwrap());
            });
            let got = got.unwrap();
            assert_eq!(data, 0, "{function} on target {target} moved raw data");
            assert_eq!(got.degraded_blocks, 0);
            assert!(got.aggregate == want, "{function} on target {target}");
            checked += 1;
        }
    }

    let devices = cl.pick_devices(TierId(2), 4).unwrap();
    let mut big = random_bytes(&mut rng, 1 << 20);
    big[..8].copy_from_slice(&1i64.to_le_bytes());
    let id = cl
        .with_store(client, |s| {
            let id = s.new_object_id();
            s.obj_create(
                id,
                BlockSpec::new(BS as u64)?,
                Layout::striped(3, 1, devices),
            )?;
            s.obj_write(id, 0, big.clone())?;
            Ok(id)
        })
        .unwrap();
    let mut ratio = 0.0;
    let data = data_messages_during(&mut cl, |cl| {
        let r = cl
            .ship(client, CHECKSUM64, &[], ShipTarget::Object(id))
            .unwrap();
        assert!(r.aggregate.len() <= 64);
        assert_eq!(r.fetch_equivalent, 1 << 20);
        ratio = r.fetch_equivalent as f64 / r.shipped_bytes as f64;
    });
    assert_eq!(data, 0);
    assert!(ratio >= 100.0, "fetch/shipped ratio {ratio}");
    report(
        5,
        "builtins over 100 targets, no raw data moved",
        t,
        Duration::from_secs(30),
        &format!("({checked} comparisons, 1 MiB fetch/shipped = {ratio:.0})"),
    );
}

// ---------------------------------------------------------------- 6

fn element(producer: u32, n: u64) -> Vec<u8> {
    let mut e = vec![0u8; 64];
    e[..4].copy_from_slice(&producer.to_le_bytes());
    e[4..12].copy_from_slice(&n.to_le_bytes());
    let check = fnv(&e[..12]);
    e[12..20].copy_from_slice(&check.to_le_bytes());
    e
}

type Arrival = (u32, u64, Vec<u8>);
type Seen = Arc<Mutex<Vec<Arrival>>>;

struct StreamRun {
    acked: BTreeMap<u32, Vec<Vec<u8>>>,
    unacked: BTreeMap<u32, Vec<u8>>,
    got: Vec<Arrival>,
}

/// Sends `total` elements from 15 producers to one consumer in a random
/// interleaving. Returns acked elements per producer and what arrived.
fn stream_run(seed: u64, total: u64, crashes: usize) -> StreamRun {
    let dir = tempfile::tempdir().unwrap();
    let config = ClusterConfig {
        seed,
        ..ClusterConfig::default()
    };
    let mut cl = Cluster::spawn(config, dir.path()).unwrap();
    let producers: Vec<u32> = (0..15).collect();
    let mut desc = StreamDescriptor::new(seed, producers.clone(), vec![16], 64);
    desc.capacity = 64;
    cl.stream_create(desc).unwrap();
    let seen: Seen = Arc::default();
    let sink = seen.clone();
    cl.stream_attach(
        seed,
        16,
        Computation::Plugin(Box::new(move |p, seq, bytes| {
            sink.lock().unwrap().push((p, seq, bytes.to_vec()))
        })),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in producers.choose_multiple(&mut rng, crashes) {
        let at = rng.gen_range(0..total / 15);
        cl.schedule_producer_crash(seed, *p, at).unwrap();
    }
    let mut acked: BTreeMap<u32, Vec<Vec<u8>>> = BTreeMap::new();
    let mut unacked: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    let mut sent = [0u64; 15];
    let mut alive: Vec<u32> = producers.clone();
    for _ in 0..total {
        if alive.is_empty() {
            break;
        }
        let p = *alive.choose(&mut rng).unwrap();
        let e = element(p, sent[p as usize]);
        match cl.stream_send(seed, p, &e) {
            Ok(seq) => {
                assert_eq!(seq, sent[p as usize]);
                acked.entry(p).or_default().push(e);
                sent[p as usize] += 1;
            }
            Err(Error::ProducerCrashed(_)) => {
                unacked.insert(p, e);
                alive.retain(|x| *x != p);
            }
            Err(e) => panic!("{e}"),
        }
    }
    for p in alive {
        cl.stream_finish(seed, p).unwrap();
    }
    let report = cl.stream_terminate(seed).unwrap();
    let got = seen.lock().unwrap().clone();
    assert_eq!(report.total, got.len() as u64);
    StreamRun {
        acked,
        unacked,
        got,
    }
}

#[test]
fn c06_stream_exactly_once_fifo() {
    let t = Instant::now();
    let StreamRun {
        acked,
        unacked,
        got,
    } = stream_run(6, 100_000, 0);
    assert!(unacked.is_empty());
    let mut sent: Vec<&Vec<u8>> = acked.values().flatten().collect();
    let mut recv: Vec<&Vec<u8>> = got.iter().map(|(_, _, e)| e).collect();
    assert_eq!(sent.len(), 100_000);
    sent.sort();
    recv.sort();
    assert!(sent == recv, "multiset differs");
    for (p, elements) in &acked {
        let arrived: Vec<&Vec<u8>> = got
            .iter()
            .filter(|(q, _, _)| q == p)
            .map(|(_, _, e)| e)
            .collect();
        assert!(
            arrived == elements.iter().collect::<Vec<_>>(),
            "producer {p} out of order"
        );
    }

    let mut in_doubt_delivered = 0;
    for seed in 0..10 {
        let StreamRun {
            acked,
            unacked,
            got,
        } = stream_run(100 + seed, 10_000, 1 + seed as usize % 5);
        let mut keys = BTreeSet::new();
        for (p, seq, _) in &got {
            assert!(
                keys.insert((*p, *seq)),
                "duplicate ({p}, {seq}) under seed {seed}"
            );
        }
        for (p, elements) in &acked {
            let arrived: Vec<&Vec<u8>> = got
                .iter()
                .filter(|(q, _, _)| q == p)
                .map(|(_, _, e)| e)
                .collect();
            let n = elements.len();
            assert!(
                arrived.len() == n || arrived.len() == n + 1,
                "producer {p} lost acked elements"
            );
            assert!(
                arrived[..n] == elements.iter().collect::<Vec<_>>()[..],
                "producer {p} out of order"
            );
            if arrived.len() == n + 1 {
                assert!(
                    *arrived[n] == unacked[p],
                    "only the in-doubt element may follow"
                );
                in_doubt_delivered += 1;
            }
        }
    }
    report(
        6,
        "10^5 elements 15->1 plus crash fuzz",
        t,
        Duration::from_secs(30),
        &format!("({in_doubt_delivered} in-doubt elements delivered)"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_window_model_and_durability() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(ClusterConfig::default(), dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ranks = cl.total_ranks();
    let size = 50_000u64;
    for backing in [Backing::storage(), Backing::Memory] {
        let w = cl.win_alloc(3, size, backing).unwrap();
        let mut oracle = vec![0u8; size as usize];
        for _ in 0..10_000 {
            let rank = rng.gen_range(0..ranks);
            let off = rng.gen_range(0..size);
            let len = rng.gen_range(1..=(size - off).min(3000));
            match rng.gen_range(0..10) {
                0..=4 => {
                    let data = random_bytes(&mut rng, len as usize);
                    cl.win_put(rank, w, off, &data).unwrap();
                    oracle[off as usize..(off + len) as usize].copy_from_slice(&data);
                }
                5..=7 => {
                    let got = cl.win_get(rank, w, off, len).unwrap();
                    assert!(
                        got == oracle[off as usize..(off + len) as usize],
                        "get at {off}+{len}"
                    );
                }
                8 => cl.win_sync(rank, w).unwrap(),
                _ => {
                    cl.win_sync(rank, w).unwrap();
                    cl.win_evict_clean(w);
                }
            }
        }
        assert!(cl.win_get(0, w, 0, size).unwrap() == oracle);
        cl.win_free(w).unwrap();
    }

    let meta = cl.meta_node();
    let mut mid_sync = 0;
    for run in 0..100u64 {
        let owner = rng.gen_range(0..ranks);
        let w = cl.win_alloc(owner, 20_000, Backing::storage()).unwrap();
        let mut synced = vec![0u8; 20_000];
        let mut current = synced.clone();
        for _ in 0..rng.gen_range(1..6) {
            for _ in 0..rng.gen_range(1..5) {
                let off = rng.gen_range(0..19_000usize);
                let data = {
                    let n = rng.gen_range(1..1000);
                    random_bytes(&mut rng, n)
                };
                cl.win_put(owner, w, off as u64, &data).unwrap();
                current[off..off + data.len()].copy_from_slice(&data);
            }
            if rng.gen_bool(0.6) {
                cl.win_sync(owner, w).unwrap();
                synced = current.clone();
            }
        }
        let pending = current.clone();
        match run % 3 {
            0 => cl.restart_all().unwrap(),
            1 => {
                let node = cl.rank_node(owner);
                cl.crash_node(node);
                if node != meta {
                    cl.crash_node(meta);
                }
                cl.restart_node(node).unwrap();
                cl.restart_node(meta).unwrap();
            }
            _ => {
                cl.win_put(owner, w, 0, &[run as u8 + 1]).unwrap();
                let mut pending = pending.clone();
                pending[0] = run as u8 + 1;
                cl.injector().arm(rng.gen_range(1..=6));
                let r = cl.win_sync(owner, w);
                cl.injector().disarm();
                if r.is_err() {
                    mid_sync += 1;
                    cl.restart_node(meta).unwrap();
                    let got = cl.win_get(owner, w, 0, 20_000).unwrap();
                    assert!(got == synced || got == pending, "run {run}: torn sync");
                    synced = got;
                } else {
                    synced = pending;
                }
                cl.restart_all().unwrap();
            }
        }
        let got = cl.win_get(owner, w, 0, 20_000).unwrap();
        assert!(got == synced, "run {run}: synced bytes lost");
        cl.win_free(w).unwrap();
    }
    report(
        7,
        "10^4 window ops match, 100 crash runs keep synced data",
        t,
        Duration::from_secs(60),
        &format!("({mid_sync} crashes inside a sync)"),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_stream_kernels_exact_and_ordered() {
    let t = Instant::now();
    let n = 1_000_000u64;
    let q = 3.0;
    let a0: Vec<f64> = (0..n).map(|i| (i % 977) as f64 * 0.5 + 1.0).collect();
    let b0: Vec<f64> = (0..n).map(|i| (i % 13) as f64).collect();
    let c0 = vec![0.0; n as usize];
    let mut a = a0.clone();
    let mut b = b0.clone();
    let mut c = c0.clone();
    for j in 0..n as usize {
        c[j] = a[j];
        b[j] = q * c[j];
        c[j] = a[j] + b[j];
        a[j] = b[j] + q * c[j];
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(ClusterConfig::default(), dir.path()).unwrap();
    let mut bandwidth = BTreeMap::new();
    for (name, backing) in [("memory", Backing::Memory), ("storage", Backing::storage())] {
        let ids: Vec<u64> = (0..3)
            .map(|_| cl.win_alloc(0, n * 8, backing).unwrap())
            .collect();
        for (id, init) in ids.iter().zip([&a0, &b0, &c0]) {
            cl.win_put_f64s(0, *id, 0, init).unwrap();
            cl.win_sync(0, *id).unwrap();
        }
        let r = cl
            .stream_kernels(0, [ids[0], ids[1], ids[2]], q, n)
            .unwrap();
        assert_eq!(r.copy.bytes, 16 * n);
        assert_eq!(r.triad.bytes, 24 * n);
        for (id, want) in ids.iter().zip([&a, &b, &c]) {
            cl.win_evict_clean(*id);
            let got = cl.win_get_f64s(0, *id, 0, n).unwrap();
            assert!(
                got.iter()
                    .zip(want.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} arrays differ"
            );
            cl.win_free(*id).unwrap();
        }
        for (k, s) in r.kernels() {
            bandwidth.insert((name, k), s.bandwidth());
        }
    }
    for k in ["copy", "scale", "add", "triad"] {
        assert!(
            bandwidth[&("storage", k)] <= bandwidth[&("memory", k)],
            "{k}"
        );
    }
    report(
        8,
        "N=10^6 exact, storage bandwidth <= memory",
        t,
        Duration::from_secs(30),
        &format!(
            "(triad {:.2e} vs {:.2e} B/s)",
            bandwidth[&("storage", "triad")],
            bandwidth[&("memory", "triad")]
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_offload_ratio_non_decreasing() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(ClusterConfig::default(), dir.path()).unwrap();
    let params = OffloadParams::default();
    assert_eq!(params.sim_ranks, vec![16, 64, 256, 1024]);
    let out = run_offload(&mut cl, &params).unwrap();
    assert!(out.verified);
    let ratios: Vec<f64> = out.runs.iter().map(|r| r.ratio).collect();
    for w in ratios.windows(2) {
        assert!(w[1] >= w[0], "ratios {ratios:?}");
    }
    for r in &out.runs {
        assert!(r.conserved && r.fifo && r.baseline_exact);
    }
    report(
        9,
        "offload ratio over S=16..1024",
        t,
        Duration::from_secs(120),
        &format!("(ratios {ratios:.2?})"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_checkpoint_restart_bit_exact() {
    let t = Instant::now();
    let m = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let particles = random_bytes(&mut rng, m * 64);
    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(ClusterConfig::default(), dir.path()).unwrap();
    for p in [2u32, 4, 8] {
        let share = m * 64 / p as usize;
        let ids: Vec<u64> = (0..p)
            .map(|r| {
                let id = cl.win_alloc(r, share as u64, Backing::storage()).unwrap();
                cl.win_put(
                    r,
                    id,
                    0,
                    &particles[r as usize * share..(r as usize + 1) * share],
                )
                .unwrap();
                cl.win_sync(r, id).unwrap();
                id
            })
            .collect();
        cl.restart_all().unwrap();
        let mut restored = Vec::with_capacity(m * 64);
        for (r, id) in ids.iter().enumerate() {
            restored.extend(cl.win_get(r as u32, *id, 0, share as u64).unwrap());
            cl.win_free(*id).unwrap();
        }
        assert!(restored == particles, "P={p}");
    }
    let params = CheckpointParams::default();
    let out = sage_bench::checkpoint::run_checkpoint(&mut cl, &params).unwrap();
    assert!(out.verified);
    assert_eq!(
        out.ratios.keys().copied().collect::<Vec<_>>(),
        vec![2, 4, 8]
    );
    report(
        10,
        "M=10^5 restart equals checkpoint for P=2,4,8",
        t,
        Duration::from_secs(60),
        &format!("(baseline/windows ratios {:.2?})", out.ratios),
    );
}

// ---------------------------------------------------------------- 11

fn hsm_config() -> ClusterConfig {
    let mut devices = Vec::new();
    for tier in 1..=4u8 {
        for k in 0..2u32 {
            devices.push(DeviceSpec {
                id: DeviceId(tier as u32 * 100 + k),
                tier: TierId(tier),
                spare: false,
                capacity_bytes: (tier == 1).then_some(512 << 10),
            });
        }
    }
    ClusterConfig {
        seed: 11,
        nodes: vec![NodeSpec {
            id: NodeId(0),
            roles: vec![Role::Storage, Role::Compute],
            ranks: 4,
            devices,
        }],
        hsm: HsmPolicy {
            promote_rate_threshold: 0.04,
            demote_rate_threshold: 0.02,
            demote_idle_threshold: 400.0,
            ..HsmPolicy::default()
        },
        ..ClusterConfig::default()
    }
}

#[test]
fn c11_hsm_converges_80_20() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cl = Cluster::spawn(hsm_config(), dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let node = NodeId(0);
    let mut contents = BTreeMap::new();
    for i in 0..50u64 {
        let device = DeviceId(200 + (i % 2) as u32);
        let data = random_bytes(&mut rng, 16 * BS);
        let id = cl
            .with_store(node, |s| {
                let id = s.new_object_id();
                s.obj_create(
                    id,
                    BlockSpec::new(BS as u64)?,
                    Layout::striped(1, 0, vec![device]),
                )?;
                s.obj_write(id, 0, data.clone())?;
                Ok(id)
            })
            .unwrap();
        contents.insert(id, data);
    }
    let ids: Vec<ObjectId> = contents.keys().copied().collect();
    let (hot, cold) = ids.split_at(10);
    let tier_of = |cl: &Cluster, id: ObjectId| {
        extent_inventory(cl.store().unwrap())
            .into_iter()
            .filter(|e| e.key.0 == id)
            .map(|e| e.tier)
            .collect::<BTreeSet<_>>()
    };
    let mut converged_at = None;
    for pass in 1..=4 {
        let start = cl.now();
        let mut times: Vec<(f64, ObjectId)> = Vec::new();
        for _ in 0..1000 {
            let id = if rng.gen_bool(0.8) {
                *hot.choose(&mut rng).unwrap()
            } else {
                *cold.choose(&mut rng).unwrap()
            };
            times.push((start + rng.gen_range(0.0..1000.0), id));
        }
        times.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (at, id) in times {
            cl.advance_to(at).unwrap();
            cl.with_store(node, |s| s.obj_read(id, rng.gen_range(0..16), 1))
                .unwrap();
        }
        cl.advance_to(start + 1000.0).unwrap();
        cl.hsm_pass().unwrap();
        let high = cl
            .config()
            .hsm
            .watermarks
            .iter()
            .map(|w| (w.tier, w.high))
            .collect::<BTreeMap<_, _>>();
        for (tier, (used, capacity)) in cl.store().unwrap().tier_usage() {
            assert!(
                used as f64 <= high[&tier] * capacity as f64,
                "tier {} over its high watermark",
                tier.0
            );
        }
        let hot_ok = hot
            .iter()
            .all(|id| tier_of(&cl, *id) == BTreeSet::from([TierId(1)]));
        let cold_ok = cold
            .iter()
            .all(|id| tier_of(&cl, *id) == BTreeSet::from([TierId(4)]));
        if hot_ok && cold_ok {
            converged_at = Some(pass);
            break;
        }
    }
    let pass = converged_at.expect("no convergence within 4 passes");
    for (id, data) in &contents {
        let got = cl.with_store(node, |s| s.obj_read(*id, 0, 16)).unwrap();
        assert!(got == *data, "object {id} changed");
    }
    report(
        11,
        "80/20 trace converges",
        t,
        Duration::from_secs(30),
        &format!("(pass {pass})"),
    );
}

// ---------------------------------------------------------------- 12

fn tsv_hash(path: &Path) -> u64 {
    fnv(&std::fs::read(path).unwrap())
}

#[test]
fn c12_deterministic_exports() {
    let t = Instant::now();
    let config = BenchConfig::default();
    let mut hashes = Vec::new();
    for w in Workload::ALL {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = sage_bench::run(&config, &[w], a.path()).unwrap();
        let rb = sage_bench::run(&config, &[w], b.path()).unwrap();
        assert!(
            ra.verified && rb.verified,
            "{} failed verification",
            w.as_str()
        );
        let (ha, hb) = (
            tsv_hash(&a.path().join("addb.tsv")),
            tsv_hash(&b.path().join("addb.tsv")),
        );
        assert_eq!(ha, hb, "{} exports differ", w.as_str());
        hashes.push(format!("{}={ha:016x}", w.as_str()));
    }
    report(
        12,
        "identical addb.tsv per workload",
        t,
        Duration::from_secs(60),
        &format!("({})", hashes.join(" ")),
    );
}
