//! The asynchronous job engine and its two drivers: a discrete-event
//! simulator and a real multi-threaded executor.

mod metrics;
mod node;
mod real;
mod sim;
mod stage;

use std::sync::Arc;

use thiserror::Error;

pub use metrics::{
    find_lane_overlap, read_trace, write_trace, DistStats, NodeMetrics, RunMetrics, StealStats,
    TraceEvent,
};
pub use node::{Action, Input, NodeCore, TimerKind, COMPLETION_BATCH};
pub use real::{run_rank, run_real};
pub use sim::run_sim;
pub use stage::{CostContext, Lane, StageOutput, StageTask, Work};

use crate::app::{AppError, Application};
use crate::cluster::{ConfigError, Mode, RunConfig, TransportError};
use crate::model::{efficiency, t_gpu, t_min, StageCosts};
use crate::sched::LedgerError;
use crate::util::pairs_of;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("application error: {0}")]
    App(#[from] AppError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("completion ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("run aborted by another node")]
    Aborted,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    /// Populated when `runtime.profile` is set.
    pub trace: Vec<TraceEvent>,
}

/// Validates the configuration and runs it in the configured mode, with
/// all nodes inside this process.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Sim => run_sim(cfg),
        Mode::Real => run_real(cfg),
    }
}

pub(crate) fn cost_context(cfg: &RunConfig, app: &dyn Application, node: usize) -> CostContext {
    CostContext {
        costs: app.descriptor().costs.clone().unwrap_or_default(),
        seed: cfg.seed,
        link_bandwidth: cfg.runtime.link_bandwidth_bps,
        device_speed: cfg.nodes[node].devices.iter().map(|d| d.speed).collect(),
    }
}

pub(crate) fn assemble(
    cfg: &RunConfig,
    app: &Arc<dyn Application>,
    mut nodes: Vec<NodeMetrics>,
    wall_s: f64,
    max_messages_per_request: u64,
) -> RunMetrics {
    nodes.sort_by_key(|m| m.node);
    let n = app.descriptor().n as u64;
    let p = nodes.len();
    let mut m = RunMetrics {
        config: cfg.clone(),
        n,
        p,
        pairs: pairs_of(n),
        comparisons: 0,
        loads: 0,
        r: 0.0,
        makespan_s: 0.0,
        wall_s,
        device: Default::default(),
        host: Default::default(),
        dist: Default::default(),
        steals: Default::default(),
        io_bytes: 0,
        io_usage_bps: 0.0,
        t_min_s: None,
        efficiency: None,
        efficiency_r_adjusted: None,
        write_through_violations: 0,
        unquiescent_tiers: 0,
        nodes: Vec::new(),
        results: None,
    };
    let mut results = Vec::new();
    for node in &mut nodes {
        m.comparisons += node.comparisons;
        m.loads += node.loads;
        m.io_bytes += node.io_bytes;
        m.makespan_s = m.makespan_s.max(node.finish_s);
        m.device.accumulate(&node.device);
        m.host.accumulate(&node.host);
        m.dist.accumulate(&node.dist);
        m.steals.accumulate(&node.steals);
        m.write_through_violations += node.write_through_violations;
        m.unquiescent_tiers += node.unquiescent_tiers;
        results.append(&mut node.results);
    }
    m.dist.max_messages_per_request = m
        .dist
        .max_messages_per_request
        .max(max_messages_per_request);
    m.r = m.loads as f64 / n as f64;
    if m.makespan_s > 0.0 {
        m.io_usage_bps = m.io_bytes as f64 / m.makespan_s;
    }
    if let Some(costs) = &app.descriptor().costs {
        if n >= 2 {
            let c = StageCosts::from_model(costs, cfg.storage.bandwidth_bps);
            let tm = t_min(n, &c);
            m.t_min_s = Some(tm);
            if m.makespan_s > 0.0 {
                m.efficiency = Some(efficiency(tm, p, m.makespan_s));
                m.efficiency_r_adjusted =
                    Some(efficiency(t_gpu(n, m.r.max(1.0), &c), p, m.makespan_s));
            }
        }
    }
    if cfg.runtime.keep_results {
        results.sort_by_key(|r| (r.left, r.right));
        m.results = Some(results);
    }
    m.nodes = nodes;
    m
}
