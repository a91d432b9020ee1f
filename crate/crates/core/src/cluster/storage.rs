//! Central storage server: read-only blobs behind an aggregate bandwidth cap.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("read of {path} failed: {reason}")]
    Io { path: String, reason: String },
}

pub trait Storage: Send + Sync + std::fmt::Debug {
    fn read(&self, path: &str) -> Result<Vec<u8>, StorageError>;
}

#[derive(Debug, Default)]
pub struct MemStorage {
    blobs: RwLock<HashMap<String, Arc<[u8]>>>,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, path: impl Into<String>, bytes: Vec<u8>) {
        self.blobs
            .write()
            .unwrap()
            .insert(path.into(), bytes.into());
    }

    pub fn len(&self) -> usize {
        self.blobs.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Storage for MemStorage {
    fn read(&self, path: &str) -> Result<Vec<u8>, StorageError> {
        self.blobs
            .read()
            .unwrap()
            .get(path)
            .map(|b| b.to_vec())
            .ok_or_else(|| StorageError::NotFound(path.to_owned()))
    }
}

/// Files below a root directory.
#[derive(Debug, Clone)]
pub struct DirStorage {
    root: PathBuf,
}

impl DirStorage {
    pub fn new(root: impl AsRef<Path>) -> Self {
        DirStorage {
            root: root.as_ref().to_path_buf(),
        }
    }
}

impl Storage for DirStorage {
    fn read(&self, path: &str) -> Result<Vec<u8>, StorageError> {
        let full = self.root.join(path);
        std::fs::read(&full).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StorageError::NotFound(path.to_owned()),
            _ => StorageError::Io {
                path: path.to_owned(),
                reason: e.to_string(),
            },
        })
    }
}

/// Blocking token bucket shared by all readers of one server.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `rate` in bytes per second; `burst` is the bucket depth in bytes.
    pub fn new(rate: f64, burst: f64) -> Self {
        assert!(rate > 0.0 && burst > 0.0);
        TokenBucket {
            rate,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    /// Blocks until `bytes` tokens have been taken. Requests larger than the
    /// burst are served in chunks.
    pub fn take(&self, bytes: u64) {
        let mut left = bytes as f64;
        while left > 0.0 {
            let chunk = left.min(self.burst);
            let wait = {
                let mut g = self.state.lock().unwrap();
                let now = Instant::now();
                g.0 = (g.0 + now.duration_since(g.1).as_secs_f64() * self.rate).min(self.burst);
                g.1 = now;
                g.0 -= chunk;
                if g.0 >= 0.0 {
                    0.0
                } else {
                    -g.0 / self.rate
                }
            };
            if wait > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
            left -= chunk;
        }
    }
}

/// Shared processor-sharing model of the storage server for simulation:
/// concurrent reads split the aggregate bandwidth equally.
#[derive(Debug, Clone)]
pub struct SimStorage {
    bandwidth: f64,
    now: f64,
    active: Vec<(u64, f64)>,
    served: u64,
}

impl SimStorage {
    pub fn new(bandwidth_bps: f64) -> Self {
        assert!(bandwidth_bps > 0.0);
        SimStorage {
            bandwidth: bandwidth_bps,
            now: 0.0,
            active: Vec::new(),
            served: 0,
        }
    }

    fn advance(&mut self, t: f64) {
        if t > self.now && !self.active.is_empty() {
            let share = self.bandwidth / self.active.len() as f64;
            let moved = (t - self.now) * share;
            for a in &mut self.active {
                a.1 = (a.1 - moved).max(0.0);
            }
        }
        self.now = self.now.max(t);
    }

    /// Starts a read of `bytes` at time `t`.
    pub fn start(&mut self, id: u64, bytes: u64, t: f64) {
        self.advance(t);
        self.active.push((id, bytes as f64));
        self.served += bytes;
    }

    /// Earliest completion given no further arrivals.
    pub fn next_completion(&self) -> Option<(f64, u64)> {
        let share = self.bandwidth / self.active.len().max(1) as f64;
        self.active
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|&(id, rem)| (self.now + rem / share, id))
    }

    /// Removes a read that completed at time `t`.
    pub fn finish(&mut self, id: u64, t: f64) {
        self.advance(t);
        self.active.retain(|a| a.0 != id);
    }

    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    pub fn bytes_served(&self) -> u64 {
        self.served
    }
}
