//! Pipeline stages and the lanes they run on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::app::{
    checked_compare, checked_parse, checked_preprocess, AppError, Application, CostStage, ItemData,
    ItemKey, PairResult, StageCostModel,
};
use crate::cluster::Storage;

/// Resource-typed execution queue of a node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lane {
    Cpu,
    Device(u16),
    Up(u16),
    Down(u16),
    Io,
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lane::Cpu => write!(f, "cpu"),
            Lane::Device(d) => write!(f, "device{d}"),
            Lane::Up(d) => write!(f, "up{d}"),
            Lane::Down(d) => write!(f, "down{d}"),
            Lane::Io => write!(f, "io"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Work {
    Load {
        key: ItemKey,
        path: String,
    },
    Parse {
        key: ItemKey,
        raw: ItemData,
    },
    /// Host to device copy of an item (parsed or preprocessed).
    Upload {
        key: ItemKey,
        device: u16,
        data: ItemData,
    },
    Preprocess {
        key: ItemKey,
        device: u16,
        parsed: ItemData,
    },
    /// Device to host copy of a preprocessed item.
    Download {
        key: ItemKey,
        device: u16,
        data: ItemData,
    },
    Compare {
        device: u16,
        left: (ItemKey, ItemData),
        right: (ItemKey, ItemData),
    },
    /// Device to host copy of a comparison result.
    Result {
        device: u16,
        i: ItemKey,
        j: ItemKey,
        raw: Vec<u8>,
    },
    Postprocess {
        i: ItemKey,
        j: ItemKey,
        raw: Vec<u8>,
    },
}

#[derive(Clone, Debug)]
pub struct StageTask {
    pub id: u64,
    pub lane: Lane,
    pub high_priority: bool,
    pub work: Work,
}

#[derive(Clone, Debug)]
pub enum StageOutput {
    Item(ItemData),
    Raw(Vec<u8>),
    Pair(PairResult),
}

impl Work {
    pub fn lane(&self) -> Lane {
        match self {
            Work::Load { .. } => Lane::Io,
            Work::Parse { .. } | Work::Postprocess { .. } => Lane::Cpu,
            Work::Upload { device, .. } => Lane::Up(*device),
            Work::Preprocess { device, .. } | Work::Compare { device, .. } => Lane::Device(*device),
            Work::Download { device, .. } | Work::Result { device, .. } => Lane::Down(*device),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Work::Load { .. } => "load",
            Work::Parse { .. } => "parse",
            Work::Upload { .. } => "upload",
            Work::Preprocess { .. } => "preprocess",
            Work::Download { .. } => "download",
            Work::Compare { .. } => "compare",
            Work::Result { .. } => "result",
            Work::Postprocess { .. } => "postprocess",
        }
    }

    /// Key and, for pair stages, the partner key.
    pub fn keys(&self) -> (ItemKey, Option<ItemKey>) {
        match self {
            Work::Load { key, .. }
            | Work::Parse { key, .. }
            | Work::Upload { key, .. }
            | Work::Preprocess { key, .. }
            | Work::Download { key, .. } => (*key, None),
            Work::Compare { left, right, .. } => (left.0, Some(right.0)),
            Work::Result { i, j, .. } | Work::Postprocess { i, j, .. } => (*i, Some(*j)),
        }
    }

    /// Runs the stage's actual computation.
    pub fn execute(
        &self,
        app: &dyn Application,
        storage: &dyn Storage,
    ) -> Result<StageOutput, AppError> {
        Ok(match self {
            Work::Load { path, .. } => StageOutput::Item(ItemData::raw(
                storage
                    .read(path)
                    .map_err(|e| AppError::Storage(e.to_string()))?,
            )),
            Work::Parse { key, raw } => StageOutput::Item(checked_parse(app, *key, raw)?),
            Work::Preprocess { key, parsed, .. } => {
                StageOutput::Item(checked_preprocess(app, *key, parsed)?)
            }
            Work::Upload { data, .. } | Work::Download { data, .. } => {
                StageOutput::Item(data.clone())
            }
            Work::Compare { left, right, .. } => StageOutput::Raw(checked_compare(
                app,
                (left.0, &left.1),
                (right.0, &right.1),
            )?),
            Work::Result { raw, .. } => StageOutput::Raw(raw.clone()),
            Work::Postprocess { i, j, raw } => {
                let r = app.postprocess(*i, *j, raw)?;
                if (r.left, r.right) != (*i, *j) {
                    return Err(AppError::UnorderedPair {
                        left: r.left,
                        right: r.right,
                    });
                }
                StageOutput::Pair(r)
            }
        })
    }
}

/// What a stage costs in modelled time.
#[derive(Clone, Debug)]
pub struct CostContext {
    pub costs: StageCostModel,
    pub seed: u64,
    pub link_bandwidth: f64,
    pub device_speed: Vec<f64>,
}

impl CostContext {
    /// Bytes charged for moving one item between tiers or nodes.
    pub fn item_bytes(&self, data: &ItemData) -> u64 {
        self.costs.item_bytes.unwrap_or(data.byte_length() as u64)
    }

    /// Bytes charged for reading one raw file.
    pub fn raw_bytes(&self, actual: usize) -> u64 {
        self.costs.raw_bytes.unwrap_or(actual as u64)
    }

    /// Modelled duration in seconds. Loads are timed by the storage model.
    pub fn duration(&self, work: &Work) -> f64 {
        let speed = |d: &u16| self.device_speed.get(*d as usize).copied().unwrap_or(1.0);
        match work {
            Work::Load { .. } => 0.0,
            Work::Parse { key, .. } => self.costs.sample(CostStage::Parse, self.seed, key.0, 0),
            Work::Preprocess { key, device, .. } => {
                self.costs
                    .sample(CostStage::Preprocess, self.seed, key.0, 0)
                    / speed(device)
            }
            Work::Compare {
                device,
                left,
                right,
            } => {
                self.costs
                    .sample(CostStage::Compare, self.seed, left.0 .0, right.0 .0)
                    / speed(device)
            }
            Work::Upload { data, .. } | Work::Download { data, .. } => {
                self.item_bytes(data) as f64 / self.link_bandwidth
            }
            Work::Result { raw, .. } => raw.len() as f64 / self.link_bandwidth,
            Work::Postprocess { i, j, .. } => {
                self.costs
                    .sample(CostStage::Postprocess, self.seed, i.0, j.0)
            }
        }
    }
}
