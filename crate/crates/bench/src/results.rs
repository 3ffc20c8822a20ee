use sage_core::telemetry::{tags, Subsystem};
use sage_core::Cluster;

use crate::config::Workload;

/// Subsystem under which a workload files its results.
pub fn subsystem_of(workload: Workload) -> Subsystem {
    match workload {
        Workload::Stream | Workload::Dht | Workload::Checkpoint => Subsystem::Window,
        Workload::Offload => Subsystem::Stream,
    }
}

/// Appends one named result to the telemetry log. Reports are rebuilt
/// from these records alone.
pub fn emit_result(cl: &Cluster, workload: Workload, name: &str, value: f64) {
    cl.addb().emit(
        cl.now(),
        cl.meta_node(),
        subsystem_of(workload),
        "result",
        value,
        tags([("workload", workload.as_str()), ("name", name)]),
    );
}

/// One record per device with its lifetime byte counters.
pub fn emit_device_io(cl: &Cluster) {
    for d in cl.devices().iter() {
        let c = d.counters();
        cl.addb().emit(
            cl.now(),
            cl.meta_node(),
            Subsystem::Object,
            "device_io",
            (c.bytes_read + c.bytes_written) as f64,
            tags([
                ("device", d.id().0.to_string()),
                ("tier", d.tier().0.to_string()),
                ("read", c.bytes_read.to_string()),
                ("written", c.bytes_written.to_string()),
            ]),
        );
    }
}
