use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::app::PairResult;
use crate::cache::TierStats;
use crate::cluster::RunConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    /// Lookups started by this node (or cluster).
    pub requests: u64,
    /// `hits_by_hop[h]` counts lookups answered by the `h`-th candidate.
    pub hits_by_hop: Vec<u64>,
    pub failures: u64,
    pub timeouts: u64,
    /// Cache protocol frames sent between distinct nodes.
    pub messages: u64,
    /// Largest number of inter-node frames observed for one lookup.
    pub max_messages_per_request: u64,
}

impl DistStats {
    pub fn hits(&self) -> u64 {
        self.hits_by_hop.iter().sum()
    }

    /// Fraction of answered lookups served by the first candidate.
    pub fn first_hop_ratio(&self) -> Option<f64> {
        let hits = self.hits();
        (hits > 0).then(|| self.hits_by_hop.get(1).copied().unwrap_or(0) as f64 / hits as f64)
    }

    pub fn accumulate(&mut self, o: &DistStats) {
        self.requests += o.requests;
        if self.hits_by_hop.len() < o.hits_by_hop.len() {
            self.hits_by_hop.resize(o.hits_by_hop.len(), 0);
        }
        for (a, b) in self.hits_by_hop.iter_mut().zip(&o.hits_by_hop) {
            *a += b;
        }
        self.failures += o.failures;
        self.timeouts += o.timeouts;
        self.messages += o.messages;
        self.max_messages_per_request = self
            .max_messages_per_request
            .max(o.max_messages_per_request);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StealStats {
    pub local: u64,
    pub remote_requests: u64,
    pub remote: u64,
}

impl StealStats {
    pub fn accumulate(&mut self, o: &StealStats) {
        self.local += o.local;
        self.remote_requests += o.remote_requests;
        self.remote += o.remote;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: u16,
    pub loads: u64,
    pub comparisons: u64,
    /// Modelled bytes read from storage.
    pub io_bytes: u64,
    /// Time at which the node's last comparison completed.
    pub finish_s: f64,
    pub device: TierStats,
    pub host: TierStats,
    pub dist: DistStats,
    pub steals: StealStats,
    /// Busy seconds per lane name (`cpu3`, `device0`, ...).
    pub lane_busy_s: BTreeMap<String, f64>,
    pub write_through_violations: u64,
    /// Tiers left with readers or writers at the end of the run.
    pub unquiescent_tiers: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<PairResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub n: u64,
    pub p: usize,
    pub pairs: u64,
    pub comparisons: u64,
    pub loads: u64,
    pub r: f64,
    /// Modelled seconds (simulation) or wall seconds divided by the time
    /// scale (real mode).
    pub makespan_s: f64,
    pub wall_s: f64,
    pub device: TierStats,
    pub host: TierStats,
    pub dist: DistStats,
    pub steals: StealStats,
    pub io_bytes: u64,
    /// Bytes read from storage divided by the makespan.
    pub io_usage_bps: f64,
    pub t_min_s: Option<f64>,
    pub efficiency: Option<f64>,
    /// Efficiency against the modelled device time at the measured R.
    pub efficiency_r_adjusted: Option<f64>,
    pub write_through_violations: u64,
    pub unquiescent_tiers: u64,
    pub nodes: Vec<NodeMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<PairResult>>,
}

impl RunMetrics {
    pub fn node_finish_times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.finish_s).collect()
    }

    /// Busy time summed over every device lane of the cluster.
    pub fn device_busy_s(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.lane_busy_s.iter())
            .filter(|(k, _)| k.starts_with("device"))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// One executed stage. `j` is `None` for per-item stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub node: u16,
    pub lane: String,
    pub label: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub i: u32,
    pub j: Option<u32>,
}

pub fn write_trace(events: &[TraceEvent], out: &mut impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> std::io::Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

/// First pair of overlapping events on one lane, if any.
pub fn find_lane_overlap(events: &[TraceEvent]) -> Option<(TraceEvent, TraceEvent)> {
    let mut by_lane: BTreeMap<(u16, &str), Vec<&TraceEvent>> = BTreeMap::new();
    for e in events {
        by_lane
            .entry((e.node, e.lane.as_str()))
            .or_default()
            .push(e);
    }
    for evs in by_lane.values_mut() {
        evs.sort_by_key(|e| (e.start_ns, e.end_ns));
        for w in evs.windows(2) {
            if w[1].start_ns < w[0].end_ns {
                return Some((w[0].clone(), w[1].clone()));
            }
        }
    }
    None
}
