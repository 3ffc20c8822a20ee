//! STREAM copy/scale/add/triad over windows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use sage_core::window::{Backing, StreamKernelReport};
use sage_core::Cluster;

use crate::config::{BackingChoice, StreamParams, Workload};
use crate::error::Result;
use crate::results::emit_result;

const INIT_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutcome {
    pub verified: bool,
    pub reports: BTreeMap<String, StreamKernelReport>,
}

/// Initial contents of a, b and c at index `i`.
pub fn initial(i: u64) -> (f64, f64, f64) {
    (1.0 + (i % 1000) as f64 * 0.25, 2.0 + (i % 7) as f64, 0.0)
}

/// Plain-array reference of the four kernels.
pub fn oracle(n: u64, q: f64) -> [Vec<f64>; 3] {
    let mut a: Vec<f64> = (0..n).map(|i| initial(i).0).collect();
    let mut b: Vec<f64> = (0..n).map(|i| initial(i).1).collect();
    let mut c: Vec<f64> = (0..n).map(|i| initial(i).2).collect();
    c.copy_from_slice(&a);
    for j in 0..n as usize {
        b[j] = q * c[j];
    }
    for j in 0..n as usize {
        c[j] = a[j] + b[j];
    }
    for j in 0..n as usize {
        a[j] = b[j] + q * c[j];
    }
    [a, b, c]
}

fn backing(choice: BackingChoice) -> Backing {
    match choice {
        BackingChoice::Memory => Backing::Memory,
        BackingChoice::Storage => Backing::storage(),
    }
}

pub fn run_stream(cl: &mut Cluster, params: &StreamParams) -> Result<StreamOutcome> {
    let n = params.n;
    let expected = oracle(n, params.q);
    let rank = 0;
    let mut outcome = StreamOutcome {
        verified: true,
        reports: BTreeMap::new(),
    };
    for &choice in &params.backings {
        let mut ids = [0u64; 3];
        for id in ids.iter_mut() {
            *id = cl.win_alloc(rank, n * 8, backing(choice))?;
        }
        let mut i = 0;
        while i < n {
            let count = INIT_CHUNK.min(n - i);
            let init: Vec<(f64, f64, f64)> = (i..i + count).map(initial).collect();
            cl.win_put_f64s(
                rank,
                ids[0],
                i,
                &init.iter().map(|v| v.0).collect::<Vec<_>>(),
            )?;
            cl.win_put_f64s(
                rank,
                ids[1],
                i,
                &init.iter().map(|v| v.1).collect::<Vec<_>>(),
            )?;
            cl.win_put_f64s(
                rank,
                ids[2],
                i,
                &init.iter().map(|v| v.2).collect::<Vec<_>>(),
            )?;
            i += count;
        }
        for id in ids {
            cl.win_sync(rank, id)?;
        }
        let report = cl.stream_kernels(rank, ids, params.q, n)?;
        let mut ok = true;
        for (k, id) in ids.into_iter().enumerate() {
            cl.win_evict_clean(id);
            let got = cl.win_get_f64s(rank, id, 0, n)?;
            ok &= got
                .iter()
                .zip(&expected[k])
                .all(|(x, y)| x.to_bits() == y.to_bits());
        }
        for id in ids {
            cl.win_free(id)?;
        }
        let b = choice.as_str();
        for (name, k) in report.kernels() {
            emit_result(
                cl,
                Workload::Stream,
                &format!("{b}.{name}.bandwidth"),
                k.bandwidth(),
            );
            emit_result(
                cl,
                Workload::Stream,
                &format!("{b}.{name}.bytes"),
                k.bytes as f64,
            );
            emit_result(cl, Workload::Stream, &format!("{b}.{name}.time"), k.time);
        }
        emit_result(
            cl,
            Workload::Stream,
            &format!("{b}.verified"),
            ok as u8 as f64,
        );
        outcome.verified &= ok;
        outcome.reports.insert(b.to_string(), report);
    }
    emit_result(
        cl,
        Workload::Stream,
        "verified",
        outcome.verified as u8 as f64,
    );
    Ok(outcome)
}
