//! Application contract for all-pairs problems.
//!
//! An application supplies the per-item load pipeline (storage path, CPU
//! parse, device preprocess) and the per-pair comparison pipeline (device
//! compare, CPU postprocess). The runtime owns everything else: caching,
//! scheduling, transfers and overlap.
//!
//! Stage preconditions (input stage, key order, slot size) are enforced by
//! the `checked_*` wrappers so that application code only has to implement
//! the transformation itself.

mod cost;
mod cv;
mod synthetic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{CostDist, CostStage, StageCostModel};
pub use cv::{kmer_id, write_fixture_corpus, CvApp, CvConfig};
pub use synthetic::{SyntheticApp, SyntheticConfig};

/// Dense index of an input item, `0..n`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemKey(pub u32);

impl ItemKey {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

impl From<u32> for ItemKey {
    fn from(v: u32) -> Self {
        ItemKey(v)
    }
}

/// Position of an item in the load pipeline. Ordering follows the pipeline.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    RawFile,
    Parsed,
    Preprocessed,
}

/// Bytes produced by some stage of the load pipeline for one item.
#[derive(Clone, PartialEq, Eq)]
pub struct ItemData {
    stage: Stage,
    payload: Arc<[u8]>,
}

impl ItemData {
    pub fn new(stage: Stage, payload: impl Into<Arc<[u8]>>) -> Self {
        ItemData {
            stage,
            payload: payload.into(),
        }
    }

    pub fn raw(payload: impl Into<Arc<[u8]>>) -> Self {
        Self::new(Stage::RawFile, payload)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn byte_length(&self) -> usize {
        self.payload.len()
    }

    /// Produces the next-stage buffer. Stages only move forward.
    pub fn advance(
        &self,
        next: Stage,
        payload: impl Into<Arc<[u8]>>,
    ) -> Result<ItemData, AppError> {
        if next <= self.stage {
            return Err(AppError::StageMismatch {
                expected: next,
                found: self.stage,
            });
        }
        Ok(ItemData::new(next, payload))
    }
}

impl fmt::Debug for ItemData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ItemData")
            .field("stage", &self.stage)
            .field("byte_length", &self.payload.len())
            .finish()
    }
}

/// Interpreted outcome of one comparison.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub score: f64,
    pub matched: Option<bool>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub left: ItemKey,
    pub right: ItemKey,
    pub value: PairValue,
}

/// Static description of an application instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppDescriptor {
    pub name: String,
    /// Number of items. Zero is rejected; a single item is a valid, empty run.
    pub n: usize,
    /// Capacity of one cache slot in bytes (actual payload bytes).
    pub slot_size: usize,
    pub costs: Option<StageCostModel>,
}

impl AppDescriptor {
    pub fn validate(&self) -> Result<(), AppError> {
        if self.n == 0 {
            return Err(AppError::InvalidDescriptor(
                "item count must be at least 1".into(),
            ));
        }
        if self.slot_size == 0 {
            return Err(AppError::InvalidDescriptor(
                "slot_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pair_count(&self) -> u64 {
        let n = self.n as u64;
        n * n.saturating_sub(1) / 2
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("malformed input for {key}: {reason}")]
    MalformedInput { key: ItemKey, reason: String },
    #[error("{key}: {len} bytes exceed slot size {slot_size}")]
    SlotOverflow {
        key: ItemKey,
        len: usize,
        slot_size: usize,
    },
    #[error("stage mismatch: expected {expected:?}, found {found:?}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("pair ({left}, {right}) is not ordered left < right")]
    UnorderedPair { left: ItemKey, right: ItemKey },
    #[error("key {key} out of range (n = {n})")]
    KeyOutOfRange { key: ItemKey, n: usize },
    #[error("invalid application descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("storage: {0}")]
    Storage(String),
}

/// The user-facing contract. Implementations must be pure with respect to
/// their inputs: every callback may be invoked concurrently on distinct keys.
pub trait Application: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &AppDescriptor;

    /// Storage path for an item. Must be deterministic.
    fn path_for_key(&self, key: ItemKey) -> String;

    fn parse(&self, key: ItemKey, raw: &ItemData) -> Result<ItemData, AppError>;

    fn preprocess(&self, key: ItemKey, parsed: &ItemData) -> Result<ItemData, AppError>;

    /// Raw comparison result buffer, as it would come back from the device.
    fn compare(
        &self,
        left: (ItemKey, &ItemData),
        right: (ItemKey, &ItemData),
    ) -> Result<Vec<u8>, AppError>;

    fn postprocess(
        &self,
        left: ItemKey,
        right: ItemKey,
        raw: &[u8],
    ) -> Result<PairResult, AppError>;
}

fn expect_stage(data: &ItemData, expected: Stage) -> Result<(), AppError> {
    if data.stage() != expected {
        return Err(AppError::StageMismatch {
            expected,
            found: data.stage(),
        });
    }
    Ok(())
}

fn check_key(app: &dyn Application, key: ItemKey) -> Result<(), AppError> {
    let n = app.descriptor().n;
    if key.index() >= n {
        return Err(AppError::KeyOutOfRange { key, n });
    }
    Ok(())
}

pub fn checked_parse(
    app: &dyn Application,
    key: ItemKey,
    raw: &ItemData,
) -> Result<ItemData, AppError> {
    check_key(app, key)?;
    expect_stage(raw, Stage::RawFile)?;
    let out = app.parse(key, raw)?;
    expect_stage(&out, Stage::Parsed)?;
    Ok(out)
}

pub fn checked_preprocess(
    app: &dyn Application,
    key: ItemKey,
    parsed: &ItemData,
) -> Result<ItemData, AppError> {
    check_key(app, key)?;
    expect_stage(parsed, Stage::Parsed)?;
    let out = app.preprocess(key, parsed)?;
    expect_stage(&out, Stage::Preprocessed)?;
    let slot_size = app.descriptor().slot_size;
    if out.byte_length() > slot_size {
        return Err(AppError::SlotOverflow {
            key,
            len: out.byte_length(),
            slot_size,
        });
    }
    Ok(out)
}

pub fn checked_compare(
    app: &dyn Application,
    left: (ItemKey, &ItemData),
    right: (ItemKey, &ItemData),
) -> Result<Vec<u8>, AppError> {
    if left.0 >= right.0 {
        return Err(AppError::UnorderedPair {
            left: left.0,
            right: right.0,
        });
    }
    check_key(app, right.0)?;
    expect_stage(left.1, Stage::Preprocessed)?;
    expect_stage(right.1, Stage::Preprocessed)?;
    app.compare(left, right)
}

/// Runs the whole load pipeline for one key, sequentially.
pub fn load_item(
    app: &dyn Application,
    key: ItemKey,
    raw: &ItemData,
) -> Result<ItemData, AppError> {
    let parsed = checked_parse(app, key, raw)?;
    checked_preprocess(app, key, &parsed)
}

/// Encodes a scalar result buffer the way the built-in applications do.
pub fn encode_score(score: f64) -> Vec<u8> {
    score.to_le_bytes().to_vec()
}

pub fn decode_score(raw: &[u8]) -> Result<f64, AppError> {
    let bytes: [u8; 8] = raw
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| AppError::Storage(format!("result buffer of {} bytes", raw.len())))?;
    Ok(f64::from_le_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_only_move_forward() {
        let raw = ItemData::raw(vec![1u8, 2, 3]);
        let parsed = raw.advance(Stage::Parsed, vec![1u8]).unwrap();
        assert_eq!(parsed.stage(), Stage::Parsed);
        assert!(parsed.advance(Stage::RawFile, vec![]).is_err());
        assert!(parsed.advance(Stage::Parsed, vec![]).is_err());
    }

    #[test]
    fn byte_length_matches_payload() {
        let d = ItemData::new(Stage::Preprocessed, vec![0u8; 17]);
        assert_eq!(d.byte_length(), 17);
        assert_eq!(d.payload().len(), 17);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = AppDescriptor {
            name: "x".into(),
            n: 4,
            slot_size: 8,
            costs: None,
        };
        assert!(d.validate().is_ok());
        assert_eq!(d.pair_count(), 6);
        d.slot_size = 0;
        assert!(d.validate().is_err());
        d.slot_size = 8;
        d.n = 0;
        assert!(d.validate().is_err());
        d.n = 1;
        assert_eq!(d.pair_count(), 0);
    }

    #[test]
    fn score_round_trip() {
        assert_eq!(decode_score(&encode_score(0.25)).unwrap(), 0.25);
        assert!(decode_score(&[1, 2]).is_err());
    }
}
