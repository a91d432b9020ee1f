//! Run configuration: application, cluster layout and tunables. The whole
//! document round-trips through TOML and JSON so a run can be replayed from
//! the copy embedded in its metrics.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::storage::{DirStorage, MemStorage, Storage};
use crate::app::{
    AppError, Application, CvApp, CvConfig, ItemKey, StageCostModel, SyntheticApp, SyntheticConfig,
};
use crate::cache::Capacity;
use crate::sched::SchedulerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sim,
    Real,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Mode::Sim),
            "real" => Ok(Mode::Real),
            other => Err(format!("unknown mode {other:?} (expected sim or real)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppConfig {
    Synthetic {
        n: usize,
        #[serde(default = "default_payload")]
        payload_bytes: usize,
        #[serde(default)]
        slot_size: Option<usize>,
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        costs: Option<StageCostModel>,
    },
    Cv {
        corpus: PathBuf,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_cv_slot")]
        slot_size: usize,
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        costs: Option<StageCostModel>,
    },
}

fn default_payload() -> usize {
    32
}
fn default_k() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.5
}
fn default_cv_slot() -> usize {
    1 << 20
}

impl AppConfig {
    pub fn synthetic(n: usize, preset: Option<&str>) -> Self {
        AppConfig::Synthetic {
            n,
            payload_bytes: default_payload(),
            slot_size: None,
            preset: preset.map(str::to_owned),
            costs: None,
        }
    }

    pub fn cv(corpus: impl Into<PathBuf>) -> Self {
        AppConfig::Cv {
            corpus: corpus.into(),
            k: default_k(),
            threshold: default_threshold(),
            slot_size: default_cv_slot(),
            preset: None,
            costs: None,
        }
    }

    /// Explicit costs win over a named preset.
    pub fn costs(&self) -> Result<Option<StageCostModel>, ConfigError> {
        let (preset, costs) = match self {
            AppConfig::Synthetic { preset, costs, .. } | AppConfig::Cv { preset, costs, .. } => {
                (preset, costs)
            }
        };
        if let Some(c) = costs {
            return Ok(Some(c.clone()));
        }
        match preset {
            None => Ok(None),
            Some(name) => StageCostModel::preset(name)
                .map(Some)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown cost preset {name:?}"))),
        }
    }

    /// Number of items. For a corpus this lists the directory.
    pub fn n(&self) -> Result<usize, ConfigError> {
        match self {
            AppConfig::Synthetic { n, .. } => Ok(*n),
            AppConfig::Cv { .. } => Ok(self.build(0)?.0.descriptor().n),
        }
    }

    pub fn set_n(&mut self, new_n: usize) {
        if let AppConfig::Synthetic { n, .. } = self {
            *n = new_n;
        }
    }

    /// Instantiates the application and the storage holding its inputs.
    pub fn build(
        &self,
        seed: u64,
    ) -> Result<(Arc<dyn Application>, Arc<dyn Storage>), ConfigError> {
        let costs = self.costs()?;
        match self {
            AppConfig::Synthetic {
                n,
                payload_bytes,
                slot_size,
                ..
            } => {
                let app = SyntheticApp::new(SyntheticConfig {
                    n: *n,
                    payload_bytes: *payload_bytes,
                    slot_size: *slot_size,
                    seed,
                    costs,
                })?;
                let storage = MemStorage::new();
                for k in 0..*n as u32 {
                    storage.insert(app.path_for_key(ItemKey(k)), app.generate_raw(ItemKey(k)));
                }
                Ok((Arc::new(app), Arc::new(storage)))
            }
            AppConfig::Cv {
                corpus,
                k,
                threshold,
                slot_size,
                ..
            } => {
                let app = CvApp::open(CvConfig {
                    corpus: corpus.clone(),
                    k: *k,
                    threshold: *threshold,
                    slot_size: *slot_size,
                    costs,
                })?;
                Ok((Arc::new(app), Arc::new(DirStorage::new(corpus))))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    #[serde(default = "unit_speed")]
    pub speed: f64,
    pub capacity: Capacity,
}

fn unit_speed() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    #[serde(default)]
    pub id: Option<u16>,
    pub devices: Vec<DeviceConfig>,
    pub host: Capacity,
    /// CPU pool width; defaults to 16 in simulation and the machine's
    /// parallelism in real mode.
    #[serde(default)]
    pub cpu_threads: Option<usize>,
}

impl NodeConfig {
    pub fn uniform(devices: usize, device_slots: usize, host_slots: usize) -> Self {
        NodeConfig {
            id: None,
            devices: (0..devices)
                .map(|_| DeviceConfig {
                    speed: 1.0,
                    capacity: Capacity::Slots(device_slots),
                })
                .collect(),
            host: Capacity::Slots(host_slots),
            cpu_threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistCacheConfig {
    pub enabled: bool,
    pub h: usize,
    /// Retained candidates per key; `None` keeps `max(h, 4)`.
    pub h_max: Option<usize>,
    pub fetch_timeout_s: f64,
}

impl Default for DistCacheConfig {
    fn default() -> Self {
        DistCacheConfig {
            enabled: true,
            h: 1,
            h_max: None,
            fetch_timeout_s: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub latency_s: f64,
    pub bandwidth_bps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latency_s: 10e-6,
            bandwidth_bps: 5e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    /// Aggregate bandwidth of the shared storage server.
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            bandwidth_bps: 400e6,
            latency_s: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Host/device link bandwidth used for transfer stage durations.
    pub link_bandwidth_bps: f64,
    /// Real mode: wall seconds spent per modelled second.
    pub time_scale: f64,
    /// Retry delay after a tier reports no evictable slot.
    pub slot_backoff_s: f64,
    /// Simulation aborts when no stage completes for this long.
    pub stall_limit_s: f64,
    /// Record a trace of every stage.
    pub profile: bool,
    /// Keep per-pair results in the metrics.
    pub keep_results: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            link_bandwidth_bps: 12e9,
            time_scale: 1e-3,
            slot_backoff_s: 1e-3,
            stall_limit_s: 600.0,
            profile: false,
            keep_results: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    pub app: AppConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub cache: DistCacheConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub storage: StorageConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    pub nodes: Vec<NodeConfig>,
}

impl RunConfig {
    pub fn new(app: AppConfig, nodes: Vec<NodeConfig>) -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Sim,
            app,
            scheduler: SchedulerConfig::default(),
            cache: DistCacheConfig::default(),
            network: NetworkConfig::default(),
            storage: StorageConfig::default(),
            runtime: RuntimeConfig::default(),
            nodes,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            return serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()));
        }
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn p(&self) -> usize {
        self.nodes.len()
    }

    /// Resizes the cluster to `p` nodes, cycling through the configured ones.
    pub fn with_nodes(mut self, p: usize) -> Self {
        let template = self.nodes.clone();
        if template.is_empty() || p == 0 {
            return self;
        }
        self.nodes = (0..p)
            .map(|i| {
                let mut n = template[i % template.len()].clone();
                n.id = None;
                n
            })
            .collect();
        self
    }

    pub fn h_max(&self) -> usize {
        self.cache.h_max.unwrap_or(self.cache.h.max(4))
    }

    /// Modelled slot size used to turn byte capacities into slot counts.
    pub fn modelled_slot_bytes(&self) -> Result<usize, ConfigError> {
        let costs = self.app.costs()?;
        if let Some(b) = costs.and_then(|c| c.item_bytes) {
            return Ok(b as usize);
        }
        Ok(match &self.app {
            AppConfig::Synthetic {
                slot_size,
                payload_bytes,
                ..
            } => slot_size.unwrap_or((*payload_bytes).max(1)),
            AppConfig::Cv { slot_size, .. } => *slot_size,
        })
    }

    pub fn device_slots(&self, node: usize, device: usize) -> Result<usize, ConfigError> {
        Ok(self.nodes[node].devices[device]
            .capacity
            .slots(self.modelled_slot_bytes()?))
    }

    pub fn host_slots(&self, node: usize) -> Result<usize, ConfigError> {
        Ok(self.nodes[node].host.slots(self.modelled_slot_bytes()?))
    }

    pub fn cpu_threads(&self, node: usize) -> usize {
        self.nodes[node].cpu_threads.unwrap_or(match self.mode {
            Mode::Sim => 16,
            Mode::Real => std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(4),
        })
    }

    /// In-flight job cap of one node.
    pub fn job_limit(&self, node: usize) -> Result<usize, ConfigError> {
        if self.scheduler.job_limit > 0 {
            return Ok(self.scheduler.job_limit);
        }
        let mut slots = 0;
        for d in 0..self.nodes[node].devices.len() {
            slots += self.device_slots(node, d)?;
        }
        Ok(4 * slots)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes.is_empty() {
            return invalid("at least one node is required");
        }
        if self.nodes.len() > u16::MAX as usize {
            return invalid("too many nodes");
        }
        self.app.costs()?;
        match &self.app {
            AppConfig::Synthetic {
                n,
                payload_bytes,
                slot_size,
                ..
            } => {
                if *n == 0 {
                    return invalid("app.n must be at least 1");
                }
                if *n > u32::MAX as usize {
                    return invalid("app.n is too large");
                }
                if let Some(s) = slot_size {
                    if *s == 0 || payload_bytes > s {
                        return invalid("app.slot_size must hold the payload");
                    }
                }
            }
            AppConfig::Cv { k, slot_size, .. } => {
                if *k == 0 || *k > 8 {
                    return invalid("app.k must be in 1..=8");
                }
                if *slot_size == 0 {
                    return invalid("app.slot_size must be positive");
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.id {
                if id as usize != i {
                    return invalid(format!(
                        "node ids must be dense 0..p-1 (node {i} has id {id})"
                    ));
                }
            }
            if node.devices.is_empty() {
                return invalid(format!("node {i} has no devices"));
            }
            for (d, dev) in node.devices.iter().enumerate() {
                if !(dev.speed.is_finite() && dev.speed > 0.0) {
                    return invalid(format!("node {i} device {d}: speed must be positive"));
                }
                if self.device_slots(i, d)? < 2 {
                    return invalid(format!(
                        "node {i} device {d}: at least 2 cache slots are required"
                    ));
                }
            }
            if self.host_slots(i)? < 1 {
                return invalid(format!("node {i}: host cache needs at least 1 slot"));
            }
            if node.cpu_threads == Some(0) {
                return invalid(format!("node {i}: cpu_threads must be positive"));
            }
        }
        if self.scheduler.leaf_block == 0 {
            return invalid("scheduler.leaf_block must be at least 1");
        }
        if self.cache.h > 8 {
            return invalid("cache.h must be in 0..=8");
        }
        if self.h_max() < self.cache.h {
            return invalid("cache.h_max must be at least cache.h");
        }
        let positive = [
            ("network.bandwidth_bps", self.network.bandwidth_bps),
            ("storage.bandwidth_bps", self.storage.bandwidth_bps),
            (
                "runtime.link_bandwidth_bps",
                self.runtime.link_bandwidth_bps,
            ),
            ("cache.fetch_timeout_s", self.cache.fetch_timeout_s),
            ("runtime.stall_limit_s", self.runtime.stall_limit_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return invalid(format!("{name} must be positive"));
            }
        }
        let non_negative = [
            ("network.latency_s", self.network.latency_s),
            ("storage.latency_s", self.storage.latency_s),
            ("runtime.time_scale", self.runtime.time_scale),
            ("runtime.slot_backoff_s", self.runtime.slot_backoff_s),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }
}
