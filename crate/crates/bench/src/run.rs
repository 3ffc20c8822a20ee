use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sage_core::Cluster;

use crate::checkpoint::{run_checkpoint, CheckpointOutcome};
use crate::config::{BenchConfig, Workload};
use crate::dht::{run_dht, DhtOutcome};
use crate::error::Result;
use crate::kernels::{run_stream, StreamOutcome};
use crate::offload::{run_offload, OffloadOutcome};
use crate::report::{report_from_tsv, RunReport};
use crate::results::emit_device_io;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcomes {
    pub stream: Option<StreamOutcome>,
    pub dht: Option<DhtOutcome>,
    pub checkpoint: Option<CheckpointOutcome>,
    pub offload: Option<OffloadOutcome>,
}

impl Outcomes {
    pub fn verified(&self) -> bool {
        self.stream.as_ref().is_none_or(|o| o.verified)
            && self.dht.as_ref().is_none_or(|o| o.verified)
            && self.checkpoint.as_ref().is_none_or(|o| o.verified)
            && self.offload.as_ref().is_none_or(|o| o.verified)
    }
}

/// What `run` leaves behind in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub seed: u64,
    pub workloads: Vec<Workload>,
    pub config: BenchConfig,
    pub outcomes: Outcomes,
    pub report: RunReport,
    pub verified: bool,
}

pub const ADDB_FILE: &str = "addb.tsv";
pub const RESULTS_FILE: &str = "results.json";

pub fn addb_path(out: &Path) -> PathBuf {
    out.join(ADDB_FILE)
}

/// Runs the workloads in order on one fresh cluster under `out/cluster`,
/// exports telemetry to `out/addb.tsv` and writes `out/results.json`.
pub fn run(config: &BenchConfig, workloads: &[Workload], out: &Path) -> Result<RunResults> {
    config.validate()?;
    let cluster_dir = out.join("cluster");
    if cluster_dir.exists() {
        std::fs::remove_dir_all(&cluster_dir)?;
    }
    std::fs::create_dir_all(out)?;
    let mut cl = Cluster::spawn(config.cluster.clone(), &cluster_dir)?;
    let mut outcomes = Outcomes::default();
    for w in workloads {
        match w {
            Workload::Stream => outcomes.stream = Some(run_stream(&mut cl, &config.stream)?),
            Workload::Dht => outcomes.dht = Some(run_dht(&mut cl, &config.dht)?),
            Workload::Checkpoint => {
                outcomes.checkpoint = Some(run_checkpoint(&mut cl, &config.checkpoint)?)
            }
            Workload::Offload => outcomes.offload = Some(run_offload(&mut cl, &config.offload)?),
        }
    }
    emit_device_io(&cl);
    let path = addb_path(out);
    cl.export_addb(&path)?;
    let report = report_from_tsv(&std::fs::read_to_string(&path)?)?;
    let results = RunResults {
        seed: config.cluster.seed,
        workloads: workloads.to_vec(),
        config: config.clone(),
        verified: outcomes.verified() && report.verified,
        outcomes,
        report,
    };
    std::fs::write(
        out.join(RESULTS_FILE),
        serde_json::to_string_pretty(&results)?,
    )?;
    Ok(results)
}
