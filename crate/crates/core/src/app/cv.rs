//! Composition-vector similarity over k-mer frequencies.
//!
//! Items are text or gzip-compressed sequence files (FASTA headers are
//! skipped). Parse counts k-mers; preprocess turns the counts into an
//! L2-normalised sparse vector sorted by k-mer id; compare is the sparse dot
//! product, i.e. cosine similarity of the frequency vectors.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use super::{
    decode_score, encode_score, AppDescriptor, AppError, Application, ItemData, ItemKey,
    PairResult, PairValue, Stage, StageCostModel,
};

pub const MAX_K: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_slot")]
    pub slot_size: usize,
    #[serde(default)]
    pub costs: Option<StageCostModel>,
}

fn default_k() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.5
}
fn default_slot() -> usize {
    1 << 20
}

impl CvConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        CvConfig {
            corpus: corpus.into(),
            k: default_k(),
            threshold: default_threshold(),
            slot_size: default_slot(),
            costs: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvApp {
    descriptor: AppDescriptor,
    files: Vec<String>,
    k: usize,
    threshold: f64,
}

/// Packs a k-mer (k <= 8) into an id whose numeric order is lexicographic.
pub fn kmer_id(kmer: &[u8]) -> u64 {
    debug_assert!(kmer.len() <= MAX_K);
    kmer.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64) << (8 * (MAX_K - kmer.len()))
}

impl CvApp {
    /// Indexes every regular file of the corpus directory, sorted by name.
    pub fn open(cfg: CvConfig) -> Result<Self, AppError> {
        let mut files = Vec::new();
        let entries = fs::read_dir(&cfg.corpus)
            .map_err(|e| AppError::Storage(format!("{}: {e}", cfg.corpus.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| AppError::Storage(e.to_string()))?;
            if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                files.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        files.sort();
        Self::with_files(files, cfg)
    }

    pub fn with_files(files: Vec<String>, cfg: CvConfig) -> Result<Self, AppError> {
        if cfg.k == 0 || cfg.k > MAX_K {
            return Err(AppError::InvalidDescriptor(format!(
                "k must be in 1..={MAX_K}"
            )));
        }
        let descriptor = AppDescriptor {
            name: "cv".into(),
            n: files.len(),
            slot_size: cfg.slot_size,
            costs: cfg.costs,
        };
        descriptor.validate()?;
        Ok(CvApp {
            descriptor,
            files,
            k: cfg.k,
            threshold: cfg.threshold,
        })
    }

    pub fn corpus_files(&self) -> &[String] {
        &self.files
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Parsed payload as (k-mer id, count), in order of first occurrence.
    pub fn decode_counts(data: &ItemData) -> Vec<(u64, u32)> {
        data.payload()
            .chunks_exact(12)
            .map(|c| {
                (
                    u64::from_le_bytes(c[..8].try_into().unwrap()),
                    u32::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect()
    }

    /// Preprocessed payload as (k-mer id, weight), sorted by id.
    pub fn decode_vector(data: &ItemData) -> Vec<(u64, f64)> {
        data.payload()
            .chunks_exact(16)
            .map(|c| {
                (
                    u64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect()
    }

    fn sequence(&self, key: ItemKey, raw: &[u8]) -> Result<Vec<u8>, AppError> {
        let text = if raw.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(raw)
                .read_to_end(&mut out)
                .map_err(|e| AppError::MalformedInput {
                    key,
                    reason: format!("gzip: {e}"),
                })?;
            out
        } else {
            raw.to_vec()
        };
        let mut seq = Vec::with_capacity(text.len());
        for line in text.split(|&b| b == b'\n') {
            if line.first() == Some(&b'>') {
                continue;
            }
            seq.extend(
                line.iter()
                    .filter(|b| b.is_ascii_alphabetic())
                    .map(u8::to_ascii_uppercase),
            );
        }
        if seq.len() < self.k {
            return Err(AppError::MalformedInput {
                key,
                reason: format!(
                    "sequence of length {} is shorter than k = {}",
                    seq.len(),
                    self.k
                ),
            });
        }
        Ok(seq)
    }
}

impl Application for CvApp {
    fn descriptor(&self) -> &AppDescriptor {
        &self.descriptor
    }

    fn path_for_key(&self, key: ItemKey) -> String {
        self.files[key.index()].clone()
    }

    fn parse(&self, key: ItemKey, raw: &ItemData) -> Result<ItemData, AppError> {
        let seq = self.sequence(key, raw.payload())?;
        let mut counts: HashMap<u64, u32> = HashMap::new();
        let mut order = Vec::new();
        for w in seq.windows(self.k) {
            let id = kmer_id(w);
            let c = counts.entry(id).or_insert_with(|| {
                order.push(id);
                0
            });
            *c += 1;
        }
        let mut out = Vec::with_capacity(order.len() * 12);
        for id in order {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&counts[&id].to_le_bytes());
        }
        raw.advance(Stage::Parsed, out)
    }

    fn preprocess(&self, _key: ItemKey, parsed: &ItemData) -> Result<ItemData, AppError> {
        let mut counts = Self::decode_counts(parsed);
        counts.sort_unstable_by_key(|&(id, _)| id);
        let norm = counts
            .iter()
            .map(|&(_, c)| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt();
        let mut out = Vec::with_capacity(counts.len() * 16);
        for (id, c) in counts {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(c as f64 / norm).to_le_bytes());
        }
        parsed.advance(Stage::Preprocessed, out)
    }

    fn compare(
        &self,
        left: (ItemKey, &ItemData),
        right: (ItemKey, &ItemData),
    ) -> Result<Vec<u8>, AppError> {
        let a = Self::decode_vector(left.1);
        let b = Self::decode_vector(right.1);
        let (mut i, mut j) = (0, 0);
        let mut dot = 0.0;
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(encode_score(dot))
    }

    fn postprocess(
        &self,
        left: ItemKey,
        right: ItemKey,
        raw: &[u8],
    ) -> Result<PairResult, AppError> {
        let score = decode_score(raw)?;
        Ok(PairResult {
            left,
            right,
            value: PairValue {
                score,
                matched: Some(score >= self.threshold),
            },
        })
    }
}

/// Writes a small deterministic corpus of `count` sequence files.
pub fn write_fixture_corpus(dir: &Path, count: usize, seed: u64) -> std::io::Result<()> {
    const ALPHABET: &[u8] = b"ACGT";
    fs::create_dir_all(dir)?;
    for d in 0..count {
        let mut state = crate::util::mix64(seed ^ (d as u64 + 1));
        let len = 40 + (state % 80) as usize;
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            state = crate::util::mix64(state);
            seq.push(ALPHABET[(state % 4) as usize]);
        }
        let body = format!(">doc{d}\n{}\n", String::from_utf8(seq).unwrap());
        fs::write(dir.join(format!("doc{d:02}.fa")), body)?;
    }
    Ok(())
}
