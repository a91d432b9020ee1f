//! Divide-and-conquer decomposition of the upper-triangular pair matrix and
//! the building blocks of hierarchical work stealing.

mod deque;
mod ledger;
mod region;

pub use deque::{next_task, NextTask, WorkerDeque};
pub use ledger::{CompletionLedger, LedgerError};
pub use region::{Region, TaskNode};

use serde::{Deserialize, Serialize};

/// Back-pressure on the number of in-flight jobs of one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JobLimiter {
    limit: usize,
    current: usize,
}

impl JobLimiter {
    pub fn new(limit: usize) -> Self {
        assert!(limit >= 1, "job limit must be positive");
        JobLimiter { limit, current: 0 }
    }

    pub fn try_acquire(&mut self) -> bool {
        if self.current < self.limit {
            self.current += 1;
            true
        } else {
            false
        }
    }

    pub fn release(&mut self) {
        assert!(
            self.current > 0,
            "limiter released more often than acquired"
        );
        self.current -= 1;
    }

    pub fn in_flight(&self) -> usize {
        self.current
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn is_full(&self) -> bool {
        self.current >= self.limit
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub leaf_block: u32,
    /// In-flight jobs per node; 0 selects 4 x device slots of the node.
    pub job_limit: usize,
    pub steal_retry_local: u32,
    pub steal_retry_remote: u32,
    pub steal_backoff_us: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            leaf_block: 8,
            job_limit: 0,
            steal_retry_local: 4,
            steal_retry_remote: 4,
            steal_backoff_us: 1000,
        }
    }
}
