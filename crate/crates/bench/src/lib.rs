//! Shared fixtures for the benchmarks.

use allpairs_core::cluster::{AppConfig, NodeConfig, RunConfig};

/// Forensics-cost synthetic run on `p` identical single-GPU nodes.
pub fn forensics_run(n: usize, p: usize, device_slots: usize, host_slots: usize) -> RunConfig {
    RunConfig::new(
        AppConfig::synthetic(n, Some("forensics")),
        vec![NodeConfig::uniform(1, device_slots, host_slots)],
    )
    .with_nodes(p)
}
