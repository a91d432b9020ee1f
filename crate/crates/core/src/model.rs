//! Analytical performance model of an all-pairs run.
//!
//! With `R` the number of loads per item:
//!
//! ```text
//! T_gpu = R n t_pre  + C(n,2) t_comp
//! T_cpu = R n t_parse + C(n,2) t_post
//! T_io  = R n size / bandwidth
//! T_min = T_gpu at R = 1
//! efficiency = (T_min / p) / T
//! ```
//!
//! Costs are means; the simulator samples full distributions.

use serde::{Deserialize, Serialize};

use crate::app::StageCostModel;
use crate::util::pairs_of;

/// Reported single-node system efficiencies of the three reference
/// workloads on GPU hardware.
pub const REFERENCE_EFFICIENCY_FORENSICS: f64 = 0.946;
pub const REFERENCE_EFFICIENCY_BIOINFORMATICS: f64 = 0.885;
pub const REFERENCE_EFFICIENCY_MICROSCOPY: f64 = 0.992;

/// Item counts of the reference workloads.
pub const N_FORENSICS: u64 = 4980;
pub const N_BIOINFORMATICS: u64 = 2500;
pub const N_MICROSCOPY: u64 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub t_parse: f64,
    pub t_preprocess: f64,
    pub t_comparison: f64,
    #[serde(default)]
    pub t_postprocess: f64,
    /// Mean raw file size in bytes.
    #[serde(default)]
    pub file_size: f64,
    /// Storage bandwidth in bytes per second; infinite when absent.
    #[serde(default = "infinite")]
    pub io_bandwidth: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

impl StageCosts {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("t_parse", self.t_parse),
            ("t_preprocess", self.t_preprocess),
            ("t_comparison", self.t_comparison),
            ("t_postprocess", self.t_postprocess),
            ("file_size", self.file_size),
            ("io_bandwidth", self.io_bandwidth),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative"));
            }
        }
        if self.io_bandwidth == 0.0 {
            return Err("io_bandwidth must be positive".into());
        }
        Ok(())
    }

    /// Mean costs of a sampled cost model.
    pub fn from_model(m: &StageCostModel, io_bandwidth: f64) -> Self {
        StageCosts {
            t_parse: m.parse.mean_s,
            t_preprocess: m.preprocess.mean_s,
            t_comparison: m.compare.mean_s,
            t_postprocess: m.postprocess.mean_s,
            file_size: m.raw_bytes.unwrap_or(0) as f64,
            io_bandwidth,
        }
    }
}

pub fn t_gpu(n: u64, r: f64, c: &StageCosts) -> f64 {
    r * n as f64 * c.t_preprocess + pairs_of(n) as f64 * c.t_comparison
}

pub fn t_cpu(n: u64, r: f64, c: &StageCosts) -> f64 {
    r * n as f64 * c.t_parse + pairs_of(n) as f64 * c.t_postprocess
}

pub fn t_io(n: u64, r: f64, c: &StageCosts) -> f64 {
    if c.io_bandwidth.is_infinite() {
        return 0.0;
    }
    r * n as f64 * c.file_size / c.io_bandwidth
}

pub fn t_min(n: u64, c: &StageCosts) -> f64 {
    t_gpu(n, 1.0, c)
}

pub fn efficiency(t_min: f64, p: usize, measured: f64) -> f64 {
    (t_min / p as f64) / measured
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub n: u64,
    pub p: usize,
    pub r: f64,
    pub t_gpu: f64,
    pub t_cpu: f64,
    pub t_io: f64,
    pub t_min: f64,
    /// Efficiency against `T_min` when a measured run time is given.
    pub efficiency: Option<f64>,
    /// Efficiency against `T_gpu` at the measured `R`.
    pub efficiency_r_adjusted: Option<f64>,
}

impl ModelReport {
    pub fn new(n: u64, p: usize, r: f64, costs: &StageCosts, measured: Option<f64>) -> Self {
        let tg = t_gpu(n, r, costs);
        let tm = t_min(n, costs);
        ModelReport {
            n,
            p,
            r,
            t_gpu: tg,
            t_cpu: t_cpu(n, r, costs),
            t_io: t_io(n, r, costs),
            t_min: tm,
            efficiency: measured.map(|t| efficiency(tm, p, t)),
            efficiency_r_adjusted: measured.map(|t| efficiency(tg, p, t)),
        }
    }
}

/// Input document of the `model` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub n: u64,
    #[serde(default = "one")]
    pub p: usize,
    #[serde(default = "unit_r")]
    pub r: f64,
    #[serde(default)]
    pub measured_s: Option<f64>,
    pub costs: StageCosts,
}

fn one() -> usize {
    1
}
fn unit_r() -> f64 {
    1.0
}

impl ModelInput {
    pub fn report(&self) -> Result<ModelReport, String> {
        self.costs.validate()?;
        if self.n < 2 {
            return Err("n must be at least 2".into());
        }
        if self.p == 0 {
            return Err("p must be at least 1".into());
        }
        if !(self.r >= 1.0) {
            return Err("r must be at least 1".into());
        }
        Ok(ModelReport::new(
            self.n,
            self.p,
            self.r,
            &self.costs,
            self.measured_s,
        ))
    }
}
