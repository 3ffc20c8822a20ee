use std::path::Path;

use serde::{Deserialize, Serialize};

use sage_core::ClusterConfig;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Stream,
    Dht,
    Checkpoint,
    Offload,
}

impl Workload {
    pub const ALL: [Workload; 4] = [
        Workload::Stream,
        Workload::Dht,
        Workload::Checkpoint,
        Workload::Offload,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Workload::Stream => "stream",
            Workload::Dht => "dht",
            Workload::Checkpoint => "checkpoint",
            Workload::Offload => "offload",
        }
    }
}

impl std::str::FromStr for Workload {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Workload::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown workload {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackingChoice {
    Memory,
    Storage,
}

impl BackingChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackingChoice::Memory => "memory",
            BackingChoice::Storage => "storage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamParams {
    pub n: u64,
    pub q: f64,
    pub backings: Vec<BackingChoice>,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            n: 1_000_000,
            q: 3.0,
            backings: vec![BackingChoice::Memory, BackingChoice::Storage],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DhtParams {
    pub processes: u32,
    /// Slots per process in the local volume.
    pub local_volume: u64,
    /// Overflow heap size as a multiple of the local volume.
    pub overflow: u64,
    /// Keys inserted, then looked up.
    pub ops: u64,
    pub backings: Vec<BackingChoice>,
}

impl Default for DhtParams {
    fn default() -> Self {
        Self {
            processes: 8,
            local_volume: 10_000,
            overflow: 4,
            ops: 10_000,
            backings: vec![BackingChoice::Memory, BackingChoice::Storage],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    Windows,
    Baseline,
}

impl CheckpointMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointMode::Windows => "windows",
            CheckpointMode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointParams {
    pub particles: u64,
    pub processes: Vec<u32>,
    pub modes: Vec<CheckpointMode>,
    /// Sync before the crash. Turning this off shows what an unsynced
    /// checkpoint loses.
    pub sync: bool,
}

impl Default for CheckpointParams {
    fn default() -> Self {
        Self {
            particles: 100_000,
            processes: vec![2, 4, 8],
            modes: vec![CheckpointMode::Windows, CheckpointMode::Baseline],
            sync: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OffloadParams {
    /// Simulation rank counts to sweep.
    pub sim_ranks: Vec<u32>,
    /// Consumer ranks; one per 15 simulation ranks when unset.
    pub consumers: Option<u32>,
    pub steps: u32,
    pub particles_per_rank: u32,
    /// Particles whose value exceeds this are streamed.
    pub threshold: f64,
}

impl Default for OffloadParams {
    fn default() -> Self {
        Self {
            sim_ranks: vec![16, 64, 256, 1024],
            consumers: None,
            steps: 4,
            particles_per_rank: 128,
            threshold: 0.875,
        }
    }
}

impl OffloadParams {
    pub fn consumers_for(&self, sim_ranks: u32) -> u32 {
        self.consumers.unwrap_or(sim_ranks.div_ceil(15)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BenchConfig {
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub stream: StreamParams,
    #[serde(default)]
    pub dht: DhtParams,
    #[serde(default)]
    pub checkpoint: CheckpointParams,
    #[serde(default)]
    pub offload: OffloadParams,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: BenchConfig =
            toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Checks every parameter before a cluster is spawned.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        self.cluster.validate()?;
        if self.stream.n == 0 {
            return bad("stream: n must be at least 1".into());
        }
        if self.dht.processes == 0 || self.dht.local_volume == 0 {
            return bad("dht: processes and local_volume must be at least 1".into());
        }
        for &p in &self.checkpoint.processes {
            if p == 0 || !self.checkpoint.particles.is_multiple_of(p as u64) {
                return bad(format!(
                    "checkpoint: {} particles do not split over {p} processes",
                    self.checkpoint.particles
                ));
            }
        }
        for &s in &self.offload.sim_ranks {
            if s == 0 || s < self.offload.consumers_for(s) {
                return bad(format!(
                    "offload: need sim ranks >= consumers >= 1, got {s}"
                ));
            }
        }
        if self.offload.threshold.is_nan() {
            return bad("offload: threshold is NaN".into());
        }
        Ok(())
    }
}
