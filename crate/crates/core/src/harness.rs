//! Parameter sweeps over a base configuration, emitting one flat table row
//! per run.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::Capacity;
use crate::cluster::{ConfigError, RunConfig};
use crate::runtime::{run, RunError, RunMetrics};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Host cache capacity of every node as a fraction of `n`.
    CacheSize,
    /// Cluster size; each value runs with the distributed cache on and off.
    Nodes,
    H,
    Seed,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::CacheSize => "cache_size",
            Axis::Nodes => "nodes",
            Axis::H => "h",
            Axis::Seed => "seed",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache_size" => Ok(Axis::CacheSize),
            "nodes" => Ok(Axis::Nodes),
            "h" => Ok(Axis::H),
            "seed" => Ok(Axis::Seed),
            other => Err(ConfigError::Invalid(format!(
                "unknown sweep axis {other:?} (expected cache_size, nodes, h or seed)"
            ))),
        }
    }
}

/// Parses a comma-separated value list. An empty list is an error.
pub fn parse_values(s: &str) -> Result<Vec<f64>, ConfigError> {
    let values: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| ConfigError::Invalid(format!("bad sweep value {v:?}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(ConfigError::Invalid("empty sweep value list".into()));
    }
    Ok(values)
}

fn as_count(axis: Axis, v: f64) -> Result<usize, ConfigError> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(ConfigError::Invalid(format!(
            "{axis} values must be non-negative integers, got {v}"
        )));
    }
    Ok(v as usize)
}

/// Host slots for a capacity fraction of `n`, at least one.
pub fn slots_for_fraction(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).max(1)
}

/// Returns `base` with one axis set to `value`.
pub fn apply(base: &RunConfig, axis: Axis, value: f64) -> Result<RunConfig, ConfigError> {
    let mut cfg = base.clone();
    match axis {
        Axis::CacheSize => {
            if !(value > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "cache_size must be positive, got {value}"
                )));
            }
            let n = cfg.app.n()?;
            for node in &mut cfg.nodes {
                node.host = Capacity::Slots(slots_for_fraction(n, value));
            }
        }
        Axis::Nodes => {
            let p = as_count(axis, value)?;
            if p == 0 {
                return Err(ConfigError::Invalid("nodes must be at least 1".into()));
            }
            cfg = cfg.with_nodes(p);
        }
        Axis::H => cfg.cache.h = as_count(axis, value)?,
        Axis::Seed => cfg.seed = as_count(axis, value)? as u64,
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub seed: u64,
    pub dist_cache: bool,
    pub n: u64,
    pub p: usize,
    pub h: usize,
    pub host_slots: usize,
    pub loads: u64,
    pub r: f64,
    pub makespan_s: f64,
    pub speedup: Option<f64>,
    pub efficiency: Option<f64>,
    pub efficiency_r_adjusted: Option<f64>,
    pub io_usage_bps: f64,
    pub device_hits: u64,
    pub device_misses: u64,
    pub host_hits: u64,
    pub host_misses: u64,
    pub dist_requests: u64,
    pub dist_hits: u64,
    pub first_hop_ratio: Option<f64>,
}

impl SweepRow {
    fn new(axis: Axis, value: f64, cfg: &RunConfig, m: &RunMetrics) -> Result<Self, ConfigError> {
        Ok(SweepRow {
            axis,
            value,
            seed: cfg.seed,
            dist_cache: cfg.cache.enabled,
            n: m.n,
            p: m.p,
            h: cfg.cache.h,
            host_slots: cfg.host_slots(0)?,
            loads: m.loads,
            r: m.r,
            makespan_s: m.makespan_s,
            speedup: None,
            efficiency: m.efficiency,
            efficiency_r_adjusted: m.efficiency_r_adjusted,
            io_usage_bps: m.io_usage_bps,
            device_hits: m.device.hits,
            device_misses: m.device.misses,
            host_hits: m.host.hits,
            host_misses: m.host.misses,
            dist_requests: m.dist.requests,
            dist_hits: m.dist.hits(),
            first_hop_ratio: m.dist.first_hop_ratio(),
        })
    }
}

pub const CSV_HEADER: &str = "axis,value,seed,dist_cache,n,p,h,host_slots,loads,r,makespan_s,speedup,efficiency,\
efficiency_r_adjusted,io_usage_bps,device_hits,device_misses,host_hits,host_misses,dist_requests,dist_hits,first_hop_ratio";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv(rows: &[SweepRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.seed,
            r.dist_cache,
            r.n,
            r.p,
            r.h,
            r.host_slots,
            r.loads,
            r.r,
            r.makespan_s,
            opt(r.speedup),
            opt(r.efficiency),
            opt(r.efficiency_r_adjusted),
            r.io_usage_bps,
            r.device_hits,
            r.device_misses,
            r.host_hits,
            r.host_misses,
            r.dist_requests,
            r.dist_hits,
            opt(r.first_hop_ratio)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// Each value is run with seeds `base.seed .. base.seed + repeats`.
    /// Ignored for the seed axis.
    pub repeats: u64,
}

/// Runs every point of the sweep. Node sweeps run each point with the
/// distributed cache enabled and disabled and fill in `speedup` against a
/// single-node run of the same seed.
pub fn sweep(base: &RunConfig, plan: &Sweep) -> Result<Vec<SweepRow>, RunError> {
    if plan.values.is_empty() {
        return Err(ConfigError::Invalid("empty sweep value list".into()).into());
    }
    let seeds: Vec<u64> = if plan.axis == Axis::Seed {
        vec![base.seed]
    } else {
        (0..plan.repeats.max(1)).map(|k| base.seed + k).collect()
    };
    let dist_modes: &[bool] = if plan.axis == Axis::Nodes {
        &[true, false]
    } else {
        &[base.cache.enabled]
    };
    let mut single: HashMap<u64, f64> = HashMap::new();
    let mut rows = Vec::new();
    for &value in &plan.values {
        for &seed in &seeds {
            for &dist in dist_modes {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.cache.enabled = dist;
                let cfg = apply(&cfg, plan.axis, value)?;
                let m = run(&cfg)?.metrics;
                let mut row = SweepRow::new(plan.axis, value, &cfg, &m)?;
                if plan.axis == Axis::Nodes && m.makespan_s > 0.0 {
                    let t1 = match single.get(&seed) {
                        Some(t) => *t,
                        None => {
                            let mut one = cfg.clone().with_nodes(1);
                            one.cache.enabled = false;
                            let t = run(&one)?.metrics.makespan_s;
                            single.insert(seed, t);
                            t
                        }
                    };
                    row.speedup = Some(t1 / m.makespan_s);
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
