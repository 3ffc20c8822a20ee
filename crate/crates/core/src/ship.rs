//! Function shipping: run a registered function on the nodes that hold an
//! object's data units and combine the partial results at the caller.
//!
//! Each function maps one object block to a partial result and merges
//! partials with an associative, commutative combiner. Nodes only ever send
//! back partials; unallocated blocks are mapped by the caller as zeros, and
//! blocks on unreachable devices are read through the degraded path at the
//! caller.
//!
//! Builtins:
//! - `CHECKSUM64`: `basis + Σ fnv1a64(block_index_le ‖ block)` (wrapping);
//!   an empty target yields the FNV-1a offset basis.
//! - `SUM_I64`: wrapping sum of the little-endian `i64` words.
//! - `COUNT_MATCH`: occurrences of the pattern at offsets that are multiples
//!   of its length, which must be a power of two no larger than a block.
//! - `HISTOGRAM`: byte-value histogram with `bins` (u32 LE parameter, a
//!   power of two up to 256, default 256) u64 counters.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checksum::{fnv1a64, Fnv1a64, FNV_OFFSET_BASIS};
use crate::error::{Error, Result};
use crate::harness::Cluster;
use crate::model::{BlockLocation, ContainerId, NodeId, ObjectId, UnitKey};
use crate::object::ObjectMeta;
use crate::store::Store;
use crate::telemetry::{tags, Subsystem};

/// Largest partial result a node may return.
pub const MAX_PARTIAL_BYTES: usize = 64 << 10;

pub const CHECKSUM64: &str = "CHECKSUM64";
pub const SUM_I64: &str = "SUM_I64";
pub const COUNT_MATCH: &str = "COUNT_MATCH";
pub const HISTOGRAM: &str = "HISTOGRAM";

/// Random triples checked against the combiner laws on registration.
pub const LAW_TRIPLES: usize = 100;

pub trait ShipFunction: Send + Sync {
    fn name(&self) -> &str;

    fn check_params(&self, _params: &[u8], _block_size: u64) -> Result<()> {
        Ok(())
    }

    fn identity(&self, params: &[u8]) -> Vec<u8>;

    fn map(&self, params: &[u8], block_index: u64, block: &[u8]) -> Vec<u8>;

    fn combine(&self, params: &[u8], a: &[u8], b: &[u8]) -> Vec<u8>;
}

fn u64_at(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

struct Checksum64;

impl ShipFunction for Checksum64 {
    fn name(&self) -> &str {
        CHECKSUM64
    }

    fn identity(&self, _: &[u8]) -> Vec<u8> {
        FNV_OFFSET_BASIS.to_le_bytes().to_vec()
    }

    fn map(&self, _: &[u8], block_index: u64, block: &[u8]) -> Vec<u8> {
        let mut h = Fnv1a64::default();
        h.update(&block_index.to_le_bytes());
        h.update(block);
        FNV_OFFSET_BASIS
            .wrapping_add(h.finish())
            .to_le_bytes()
            .to_vec()
    }

    fn combine(&self, _: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        u64_at(a)
            .wrapping_add(u64_at(b))
            .wrapping_sub(FNV_OFFSET_BASIS)
            .to_le_bytes()
            .to_vec()
    }
}

struct SumI64;

impl ShipFunction for SumI64 {
    fn name(&self) -> &str {
        SUM_I64
    }

    fn check_params(&self, _: &[u8], block_size: u64) -> Result<()> {
        if block_size < 8 {
            return Err(Error::InvalidParams(
                "SUM_I64 needs blocks of at least 8 bytes".into(),
            ));
        }
        Ok(())
    }

    fn identity(&self, _: &[u8]) -> Vec<u8> {
        0i64.to_le_bytes().to_vec()
    }

    fn map(&self, _: &[u8], _: u64, block: &[u8]) -> Vec<u8> {
        block
            .chunks_exact(8)
            .map(|w| i64::from_le_bytes(w.try_into().expect("8 bytes")))
            .fold(0i64, i64::wrapping_add)
            .to_le_bytes()
            .to_vec()
    }

    fn combine(&self, _: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        (u64_at(a) as i64)
            .wrapping_add(u64_at(b) as i64)
            .to_le_bytes()
            .to_vec()
    }
}

struct CountMatch;

impl ShipFunction for CountMatch {
    fn name(&self) -> &str {
        COUNT_MATCH
    }

    fn check_params(&self, params: &[u8], block_size: u64) -> Result<()> {
        let n = params.len() as u64;
        if n == 0 || !n.is_power_of_two() || n > block_size {
            return Err(Error::InvalidParams(format!(
                "pattern length {n} must be a power of two no larger than {block_size}"
            )));
        }
        Ok(())
    }

    fn identity(&self, _: &[u8]) -> Vec<u8> {
        0u64.to_le_bytes().to_vec()
    }

    fn map(&self, params: &[u8], _: u64, block: &[u8]) -> Vec<u8> {
        (block
            .chunks_exact(params.len())
            .filter(|c| *c == params)
            .count() as u64)
            .to_le_bytes()
            .to_vec()
    }

    fn combine(&self, _: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        u64_at(a).wrapping_add(u64_at(b)).to_le_bytes().to_vec()
    }
}

struct Histogram;

fn histogram_bins(params: &[u8]) -> Result<usize> {
    let bins = match params.len() {
        0 => 256,
        4 => u32::from_le_bytes(params.try_into().expect("4 bytes")) as usize,
        n => {
            return Err(Error::InvalidParams(format!(
                "HISTOGRAM takes a u32, got {n} bytes"
            )))
        }
    };
    if bins == 0 || !bins.is_power_of_two() || bins > 256 {
        return Err(Error::InvalidParams(format!("bad bin count {bins}")));
    }
    Ok(bins)
}

impl ShipFunction for Histogram {
    fn name(&self) -> &str {
        HISTOGRAM
    }

    fn check_params(&self, params: &[u8], _: u64) -> Result<()> {
        histogram_bins(params).map(|_| ())
    }

    fn identity(&self, params: &[u8]) -> Vec<u8> {
        vec![0; histogram_bins(params).unwrap_or(256) * 8]
    }

    fn map(&self, params: &[u8], _: u64, block: &[u8]) -> Vec<u8> {
        let bins = histogram_bins(params).unwrap_or(256);
        let shift = 8 - bins.trailing_zeros();
        let mut counts = vec![0u64; bins];
        for &b in block {
            counts[(b as usize) >> shift] += 1;
        }
        counts.iter().flat_map(|c| c.to_le_bytes()).collect()
    }

    fn combine(&self, _: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        a.chunks_exact(8)
            .zip(b.chunks_exact(8))
            .flat_map(|(x, y)| u64_at(x).wrapping_add(u64_at(y)).to_le_bytes())
            .collect()
    }
}

pub type PluginMap = Box<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>;
pub type PluginCombine = Box<dyn Fn(&[u8], &[u8]) -> Vec<u8> + Send + Sync>;

/// A user function: a per-block map step and a combiner with identity.
pub struct Plugin {
    pub name: String,
    pub identity: Vec<u8>,
    pub map: PluginMap,
    pub combine: PluginCombine,
}

impl ShipFunction for Plugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn identity(&self, _: &[u8]) -> Vec<u8> {
        self.identity.clone()
    }

    fn map(&self, _: &[u8], _: u64, block: &[u8]) -> Vec<u8> {
        (self.map)(block)
    }

    fn combine(&self, _: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        (self.combine)(a, b)
    }
}

/// Checks associativity, then commutativity, over partials produced by
/// mapping random blocks.
pub fn check_combiner_laws(
    f: &dyn ShipFunction,
    params: &[u8],
    seed: u64,
    triples: usize,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partial = |rng: &mut ChaCha8Rng| {
        let mut block = vec![0u8; 64];
        rng.fill(&mut block[..]);
        f.map(params, rng.gen_range(0..1024), &block)
    };
    let mut samples = Vec::with_capacity(triples);
    for _ in 0..triples {
        samples.push((partial(&mut rng), partial(&mut rng), partial(&mut rng)));
    }
    for (a, b, c) in &samples {
        let left = f.combine(params, &f.combine(params, a, b), c);
        let right = f.combine(params, a, &f.combine(params, b, c));
        if left != right {
            return Err(Error::CombinerNotAssociative(f.name().to_string()));
        }
    }
    for (a, b, _) in &samples {
        if f.combine(params, a, b) != f.combine(params, b, a) {
            return Err(Error::CombinerNotCommutative(f.name().to_string()));
        }
    }
    Ok(())
}

#[derive(Clone)]
pub struct FunctionRegistry {
    functions: BTreeMap<String, Arc<dyn ShipFunction>>,
}

impl Default for FunctionRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.functions.keys()).finish()
    }
}

impl FunctionRegistry {
    /// A registry holding the four builtins.
    pub fn new() -> Self {
        let builtins: [Arc<dyn ShipFunction>; 4] = [
            Arc::new(Checksum64),
            Arc::new(SumI64),
            Arc::new(CountMatch),
            Arc::new(Histogram),
        ];
        Self {
            functions: builtins
                .into_iter()
                .map(|f| (f.name().to_string(), f))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ShipFunction>> {
        self.functions
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownFunction(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }

    /// Registers a plugin after checking its combiner on
    /// [`LAW_TRIPLES`] random triples.
    pub fn register(&mut self, plugin: Plugin) -> Result<String> {
        if self.functions.contains_key(&plugin.name) {
            return Err(Error::DuplicateFunction(plugin.name));
        }
        check_combiner_laws(&plugin, &[], fnv1a64(plugin.name.as_bytes()), LAW_TRIPLES)?;
        let name = plugin.name.clone();
        self.functions.insert(name.clone(), Arc::new(plugin));
        Ok(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShipTarget {
    Object(ObjectId),
    Container(ContainerId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputationResult {
    pub function: String,
    /// Partial result per contributing node; the caller's own entry covers
    /// holes and degraded blocks.
    pub partials: BTreeMap<NodeId, Vec<u8>>,
    pub aggregate: Vec<u8>,
    /// SHIP_EXEC and SHIP_RESULT bytes, envelopes included.
    pub shipped_bytes: u64,
    /// Bytes a fetch-then-compute client would have moved.
    pub fetch_equivalent: u64,
    pub degraded_blocks: u64,
    pub elapsed: f64,
}

impl ComputationResult {
    pub fn bytes_accounting(&self) -> (u64, u64) {
        (self.shipped_bytes, self.fetch_equivalent)
    }

    pub fn as_u64(&self) -> u64 {
        u64_at(&self.aggregate)
    }

    pub fn as_i64(&self) -> i64 {
        u64_at(&self.aggregate) as i64
    }
}

/// SHIP_EXEC payload: `name_len u32 | name | params_len u32 | params |
/// unit_count u64 | (object u128, block u64)*`, little-endian.
pub fn encode_exec(name: &str, params: &[u8], units: &[(ObjectId, u64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + name.len() + params.len() + units.len() * 24);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    out.extend_from_slice(params);
    out.extend_from_slice(&(units.len() as u64).to_le_bytes());
    for (o, b) in units {
        out.extend_from_slice(&o.0.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

/// SHIP_RESULT payload: `len u32 | partial`.
pub fn encode_result(partial: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + partial.len());
    out.extend_from_slice(&(partial.len() as u32).to_le_bytes());
    out.extend_from_slice(partial);
    out
}

enum Source {
    Local(UnitKey),
    Hole,
    Degraded,
}

fn classify(store: &Store, meta: &ObjectMeta, block: u64) -> Result<Source> {
    Ok(match meta.layout.locate(block)? {
        BlockLocation::Striped { data, .. } => {
            if !meta.units.contains_key(&data) {
                Source::Hole
            } else if store.device_available(data.device) {
                Source::Local(data)
            } else {
                Source::Degraded
            }
        }
        BlockLocation::Mirrored { replicas } => {
            match replicas.iter().find(|u| store.device_available(u.device)) {
                Some(u) if meta.units.contains_key(u) => Source::Local(*u),
                Some(_) => Source::Hole,
                None => Source::Degraded,
            }
        }
    })
}

impl Cluster {
    pub fn functions(&self) -> &FunctionRegistry {
        &self.functions
    }

    pub fn register_function(&mut self, plugin: Plugin) -> Result<String> {
        self.functions.register(plugin)
    }

    /// Runs `function` over `target` where its data lives and combines the
    /// partials at `client`.
    pub fn ship(
        &mut self,
        client: NodeId,
        function: &str,
        params: &[u8],
        target: ShipTarget,
    ) -> Result<ComputationResult> {
        self.fire_due()?;
        let f = self.functions.get(function)?;
        self.refresh_reachability();
        let mut store = self.store.take().ok_or(Error::NodeDown(self.meta_node()))?;
        let out = self.ship_with(&mut store, client, f.as_ref(), params, target);
        self.store = Some(store);
        if matches!(out, Err(Error::Crashed)) {
            self.crash_node(self.meta_node());
        }
        out
    }

    fn ship_with(
        &mut self,
        store: &mut Store,
        client: NodeId,
        f: &dyn ShipFunction,
        params: &[u8],
        target: ShipTarget,
    ) -> Result<ComputationResult> {
        let ids = match target {
            ShipTarget::Object(id) => {
                store.obj_meta(id).map_err(|_| Error::UnknownTarget)?;
                vec![id]
            }
            ShipTarget::Container(c) => {
                store.container_list(c).map_err(|_| Error::UnknownTarget)?
            }
        };
        let metas: Vec<ObjectMeta> = ids
            .iter()
            .map(|id| store.obj_meta(*id).cloned())
            .collect::<Result<_>>()?;
        for m in &metas {
            f.check_params(params, m.spec.block_size())?;
        }

        let mut local: BTreeMap<NodeId, Vec<(usize, u64, UnitKey)>> = BTreeMap::new();
        let mut coordinator: Vec<(usize, u64, bool)> = Vec::new();
        for (i, m) in metas.iter().enumerate() {
            for b in 0..m.size_blocks {
                match classify(store, m, b)? {
                    Source::Local(u) => {
                        let node = self.device_node(u.device)?;
                        local.entry(node).or_default().push((i, b, u));
                    }
                    Source::Hole => coordinator.push((i, b, false)),
                    Source::Degraded => coordinator.push((i, b, true)),
                }
            }
        }

        let mut partials: BTreeMap<NodeId, Vec<u8>> = BTreeMap::new();
        let mut shipped = 0u64;
        let mut elapsed: f64 = 0.0;
        let compute_speed = self.config.compute.bytes_per_second;
        for (node, units) in local {
            let listing: Vec<(ObjectId, u64)> =
                units.iter().map(|(i, b, _)| (metas[*i].id, *b)).collect();
            let exec = encode_exec(f.name(), params, &listing);
            let exec_cost = match self.send(client, node, "SHIP_EXEC", exec.len() as u64) {
                Ok(c) => c,
                Err(Error::NodeDown(_)) | Err(Error::Partitioned { .. }) => {
                    coordinator.extend(units.iter().map(|(i, b, _)| (*i, *b, true)));
                    continue;
                }
                Err(e) => return Err(e),
            };
            shipped += exec.len() as u64 + crate::harness::ENVELOPE_BYTES;
            let before = store.trace().clone();
            let mut partial = f.identity(params);
            let mut bytes = 0u64;
            for (i, b, u) in &units {
                let block = store.read_unit(&metas[*i], *u)?;
                bytes += block.len() as u64;
                partial = f.combine(params, &partial, &f.map(params, *b, &block));
            }
            if partial.len() > MAX_PARTIAL_BYTES {
                return Err(Error::ResultTooLarge {
                    size: partial.len(),
                });
            }
            let work = store.trace().since(&before).parallel_time() + bytes as f64 / compute_speed;
            let result = encode_result(&partial);
            let result_cost = match self.send(node, client, "SHIP_RESULT", result.len() as u64) {
                Ok(c) => c,
                Err(Error::NodeDown(_)) | Err(Error::Partitioned { .. }) => {
                    coordinator.extend(units.iter().map(|(i, b, _)| (*i, *b, true)));
                    continue;
                }
                Err(e) => return Err(e),
            };
            shipped += result.len() as u64 + crate::harness::ENVELOPE_BYTES;
            elapsed = elapsed.max(exec_cost + work + result_cost);
            partials.insert(node, partial);
        }

        let mut degraded = 0u64;
        if !coordinator.is_empty() {
            let before = store.trace().clone();
            let mut partial = f.identity(params);
            let mut bytes = 0u64;
            for (i, b, is_degraded) in coordinator {
                let m = &metas[i];
                let block = if is_degraded {
                    degraded += 1;
                    store.read_block_of(m, b)?
                } else {
                    vec![0; m.spec.block_size() as usize]
                };
                bytes += block.len() as u64;
                partial = f.combine(params, &partial, &f.map(params, b, &block));
            }
            let trace = store.trace().since(&before);
            let t = self.charge(client, &trace) + bytes as f64 / compute_speed;
            elapsed = elapsed.max(t);
            let merged = match partials.remove(&client) {
                Some(p) => f.combine(params, &p, &partial),
                None => partial,
            };
            partials.insert(client, merged);
        }

        let aggregate = partials
            .values()
            .fold(f.identity(params), |acc, p| f.combine(params, &acc, p));
        let fetch_equivalent: u64 = metas.iter().map(|m| m.size_bytes()).sum();
        self.clock.advance(elapsed);
        self.addb.emit(
            self.now(),
            client,
            Subsystem::Ship,
            "ship",
            shipped as f64,
            tags([
                ("function", f.name().to_string()),
                ("fetch", fetch_equivalent.to_string()),
                ("nodes", partials.len().to_string()),
                ("degraded", degraded.to_string()),
            ]),
        );
        Ok(ComputationResult {
            function: f.name().to_string(),
            partials,
            aggregate,
            shipped_bytes: shipped,
            fetch_equivalent,
            degraded_blocks: degraded,
            elapsed,
        })
    }
}
