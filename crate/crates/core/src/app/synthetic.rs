//! Synthetic workload: deterministic pseudo-random payloads and configurable
//! stage costs. Used for timing experiments where only the cost shape matters.

use serde::{Deserialize, Serialize};

use super::{
    decode_score, encode_score, AppDescriptor, AppError, Application, ItemData, ItemKey,
    PairResult, PairValue, Stage, StageCostModel,
};
use crate::util::mix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
    #[serde(default)]
    pub slot_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub costs: Option<StageCostModel>,
}

fn default_payload() -> usize {
    32
}

impl SyntheticConfig {
    pub fn new(n: usize) -> Self {
        SyntheticConfig {
            n,
            payload_bytes: default_payload(),
            slot_size: None,
            seed: 0,
            costs: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticApp {
    descriptor: AppDescriptor,
    payload_bytes: usize,
    seed: u64,
}

impl SyntheticApp {
    pub fn new(cfg: SyntheticConfig) -> Result<Self, AppError> {
        let descriptor = AppDescriptor {
            name: "synthetic".into(),
            n: cfg.n,
            slot_size: cfg.slot_size.unwrap_or(cfg.payload_bytes.max(1)),
            costs: cfg.costs,
        };
        descriptor.validate()?;
        Ok(SyntheticApp {
            descriptor,
            payload_bytes: cfg.payload_bytes,
            seed: cfg.seed,
        })
    }

    /// File contents stored for `key`.
    pub fn generate_raw(&self, key: ItemKey) -> Vec<u8> {
        let mut state = mix64(self.seed ^ mix64(key.0 as u64));
        let mut out = Vec::with_capacity(self.payload_bytes);
        while out.len() < self.payload_bytes {
            state = mix64(state);
            out.extend_from_slice(&state.to_le_bytes());
        }
        out.truncate(self.payload_bytes);
        out
    }
}

impl Application for SyntheticApp {
    fn descriptor(&self) -> &AppDescriptor {
        &self.descriptor
    }

    fn path_for_key(&self, key: ItemKey) -> String {
        format!("items/{:06}.bin", key.0)
    }

    fn parse(&self, _key: ItemKey, raw: &ItemData) -> Result<ItemData, AppError> {
        raw.advance(Stage::Parsed, raw.payload().to_vec())
    }

    fn preprocess(&self, _key: ItemKey, parsed: &ItemData) -> Result<ItemData, AppError> {
        parsed.advance(Stage::Preprocessed, parsed.payload().to_vec())
    }

    fn compare(
        &self,
        left: (ItemKey, &ItemData),
        right: (ItemKey, &ItemData),
    ) -> Result<Vec<u8>, AppError> {
        // Fraction of agreeing bits: symmetric and cheap.
        let (a, b) = (left.1.payload(), right.1.payload());
        let len = a.len().min(b.len());
        if len == 0 {
            return Ok(encode_score(0.0));
        }
        let differing: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
        Ok(encode_score(1.0 - differing as f64 / (8 * len) as f64))
    }

    fn postprocess(
        &self,
        left: ItemKey,
        right: ItemKey,
        raw: &[u8],
    ) -> Result<PairResult, AppError> {
        Ok(PairResult {
            left,
            right,
            value: PairValue {
                score: decode_score(raw)?,
                matched: None,
            },
        })
    }
}
