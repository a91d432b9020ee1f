//! Simulated interconnect: per-channel FIFO with latency and bandwidth.

use std::collections::HashMap;

use crate::dist::NodeId;

#[derive(Debug, Clone)]
pub struct SimNetwork {
    latency: f64,
    bandwidth: f64,
    busy_until: HashMap<(NodeId, NodeId), f64>,
    last_delivery: HashMap<(NodeId, NodeId), f64>,
}

impl SimNetwork {
    pub fn new(latency_s: f64, bandwidth_bps: f64) -> Self {
        SimNetwork {
            latency: latency_s,
            bandwidth: bandwidth_bps,
            busy_until: HashMap::new(),
            last_delivery: HashMap::new(),
        }
    }

    /// Delivery time of `bytes` sent from `src` to `dst` at `now`. The
    /// channel serialises transmissions, so deliveries stay in send order.
    /// Self-addressed frames are delivered immediately.
    pub fn send(&mut self, src: NodeId, dst: NodeId, bytes: u64, now: f64) -> f64 {
        if src == dst {
            return now;
        }
        let ch = (src, dst);
        let start = self.busy_until.get(&ch).copied().unwrap_or(0.0).max(now);
        let done = start + bytes as f64 / self.bandwidth;
        self.busy_until.insert(ch, done);
        let at = (done + self.latency).max(self.last_delivery.get(&ch).copied().unwrap_or(0.0));
        self.last_delivery.insert(ch, at);
        at
    }
}
