//! Device- and host-level slot caches.
//!
//! A tier is a fixed array of slots. Each slot is `Empty`, `Write` (one
//! writer is producing the item) or `Read` (published; `readers` jobs are
//! using it). Only `Read` slots without readers are evictable, and the victim
//! is always the one with the smallest LRU stamp. Jobs that find a slot in
//! `Write` state are registered as waiters and handed back by `publish` or
//! `abort`, so an event-driven caller can resume them; thread-based callers
//! can block on [`CacheTier::wait`] instead.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::{ItemData, ItemKey};

/// Opaque identity of a parked job.
pub type WaiterId = u64;

static NEXT_TIER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TierLevel {
    Device(u16),
    Host,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Empty,
    Write,
    Read,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("no evictable slot in {0:?} tier")]
    NoEvictableSlot(TierLevel),
    #[error("{len} bytes exceed slot size {slot_size}")]
    SlotOverflow { len: usize, slot_size: usize },
}

/// Capacity given either as a slot count or as total bytes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Slots(usize),
    Bytes(u64),
}

impl Capacity {
    pub fn slots(self, slot_size: usize) -> usize {
        match self {
            Capacity::Slots(n) => n,
            Capacity::Bytes(b) => (b / slot_size.max(1) as u64) as usize,
        }
    }
}

/// Shared read access to a published slot. While held the slot stays pinned.
#[must_use = "a lease pins its slot until released"]
#[derive(Debug)]
pub struct ReadLease {
    tier: u64,
    slot: usize,
    generation: u64,
    key: ItemKey,
    data: ItemData,
}

impl ReadLease {
    pub fn key(&self) -> ItemKey {
        self.key
    }

    pub fn data(&self) -> &ItemData {
        &self.data
    }
}

/// Exclusive right to fill a slot. Resolved by `publish` or `abort`.
#[must_use = "a write ticket must be published or aborted"]
#[derive(Debug)]
pub struct WriteTicket {
    tier: u64,
    slot: usize,
    generation: u64,
    key: ItemKey,
}

impl WriteTicket {
    pub fn key(&self) -> ItemKey {
        self.key
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct WaitToken {
    pub key: ItemKey,
    pub waiter: WaiterId,
}

#[derive(Debug)]
pub enum Acquire {
    Hit(ReadLease),
    MustWait(WaitToken),
    Miss(WriteTicket),
}

/// Failed publish; hands the ticket back so the caller can abort it.
#[derive(Debug)]
pub struct PublishError {
    pub ticket: WriteTicket,
    pub error: CacheError,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStats {
    pub hits: u64,
    pub misses: u64,
    pub waits: u64,
    pub evictions: u64,
    pub occupancy: usize,
    pub capacity: usize,
}

impl TierStats {
    pub fn accumulate(&mut self, other: &TierStats) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.waits += other.waits;
        self.evictions += other.evictions;
        self.occupancy += other.occupancy;
        self.capacity += other.capacity;
    }
}

/// Read-only view of one slot, for assertions and dumps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotView {
    pub key: Option<ItemKey>,
    pub state: SlotState,
    pub readers: u32,
    pub lru_stamp: u64,
}

#[derive(Debug)]
struct Slot {
    key: Option<ItemKey>,
    state: SlotState,
    readers: u32,
    lru_stamp: u64,
    generation: u64,
    data: Option<ItemData>,
    waiters: Vec<WaiterId>,
}

#[derive(Debug)]
struct Inner {
    slots: Vec<Slot>,
    index: HashMap<ItemKey, usize>,
    /// (lru_stamp, slot) of every Read slot with zero readers.
    evictable: BTreeSet<(u64, usize)>,
    empty: Vec<usize>,
    clock: u64,
    stats: TierStats,
}

impl Inner {
    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, slot: usize) {
        let stamp = self.tick();
        let s = &mut self.slots[slot];
        if s.state == SlotState::Read && s.readers == 0 {
            self.evictable.remove(&(s.lru_stamp, slot));
            self.evictable.insert((stamp, slot));
        }
        s.lru_stamp = stamp;
    }

    fn pin(&mut self, slot: usize) {
        let s = &self.slots[slot];
        if s.state == SlotState::Read && s.readers == 0 {
            self.evictable.remove(&(s.lru_stamp, slot));
        }
    }

    fn victim(&mut self) -> Option<usize> {
        if let Some(slot) = self.empty.pop() {
            return Some(slot);
        }
        let (_, slot) = self.evictable.pop_first()?;
        let old = self.slots[slot]
            .key
            .take()
            .expect("evictable slot has a key");
        self.index.remove(&old);
        self.slots[slot].data = None;
        self.stats.evictions += 1;
        Some(slot)
    }
}

/// One cache level: a device cache or the host cache of a node.
#[derive(Debug)]
pub struct CacheTier {
    id: u64,
    level: TierLevel,
    slot_size: usize,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl CacheTier {
    pub fn new(level: TierLevel, capacity: usize, slot_size: usize) -> Self {
        let slots = (0..capacity)
            .map(|_| Slot {
                key: None,
                state: SlotState::Empty,
                readers: 0,
                lru_stamp: 0,
                generation: 0,
                data: None,
                waiters: Vec::new(),
            })
            .collect();
        CacheTier {
            id: NEXT_TIER_ID.fetch_add(1, Ordering::Relaxed),
            level,
            slot_size,
            inner: Mutex::new(Inner {
                slots,
                index: HashMap::new(),
                evictable: BTreeSet::new(),
                empty: (0..capacity).rev().collect(),
                clock: 0,
                stats: TierStats {
                    capacity,
                    ..TierStats::default()
                },
            }),
            changed: Condvar::new(),
        }
    }

    pub fn level(&self) -> TierLevel {
        self.level
    }

    pub fn capacity(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn slot_size(&self) -> usize {
        self.slot_size
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Looks up `key`, following the tier's cache policy.
    pub fn acquire(&self, key: ItemKey, waiter: WaiterId) -> Result<Acquire, CacheError> {
        let mut g = self.lock();
        if let Some(&slot) = g.index.get(&key) {
            match g.slots[slot].state {
                SlotState::Read => {
                    g.pin(slot);
                    let stamp = g.tick();
                    let s = &mut g.slots[slot];
                    s.readers += 1;
                    s.lru_stamp = stamp;
                    let lease = ReadLease {
                        tier: self.id,
                        slot,
                        generation: s.generation,
                        key,
                        data: s.data.clone().expect("read slot holds data"),
                    };
                    g.stats.hits += 1;
                    return Ok(Acquire::Hit(lease));
                }
                SlotState::Write => {
                    let s = &mut g.slots[slot];
                    if !s.waiters.contains(&waiter) {
                        s.waiters.push(waiter);
                    }
                    g.stats.waits += 1;
                    return Ok(Acquire::MustWait(WaitToken { key, waiter }));
                }
                SlotState::Empty => unreachable!("indexed slot is never empty"),
            }
        }
        let slot = g.victim().ok_or(CacheError::NoEvictableSlot(self.level))?;
        let stamp = g.tick();
        let s = &mut g.slots[slot];
        s.key = Some(key);
        s.state = SlotState::Write;
        s.readers = 0;
        s.lru_stamp = stamp;
        s.generation += 1;
        let ticket = WriteTicket {
            tier: self.id,
            slot,
            generation: s.generation,
            key,
        };
        g.index.insert(key, slot);
        g.stats.misses += 1;
        Ok(Acquire::Miss(ticket))
    }

    fn check_ticket(&self, g: &Inner, ticket: &WriteTicket) {
        let s = &g.slots[ticket.slot];
        assert!(
            ticket.tier == self.id
                && s.generation == ticket.generation
                && s.state == SlotState::Write
                && s.key == Some(ticket.key),
            "stale or foreign write ticket for {}",
            ticket.key
        );
    }

    /// Fills the slot and flips it to `Read`. Returns the parked waiters.
    pub fn publish(
        &self,
        ticket: WriteTicket,
        data: ItemData,
    ) -> Result<Vec<WaiterId>, PublishError> {
        if data.byte_length() > self.slot_size {
            return Err(PublishError {
                error: CacheError::SlotOverflow {
                    len: data.byte_length(),
                    slot_size: self.slot_size,
                },
                ticket,
            });
        }
        let mut g = self.lock();
        self.check_ticket(&g, &ticket);
        let stamp = g.tick();
        let s = &mut g.slots[ticket.slot];
        s.state = SlotState::Read;
        s.data = Some(data);
        s.lru_stamp = stamp;
        let waiters = std::mem::take(&mut s.waiters);
        g.evictable.insert((stamp, ticket.slot));
        drop(g);
        self.changed.notify_all();
        Ok(waiters)
    }

    /// Gives up a write: the slot returns to `Empty`. Returns the parked
    /// waiters, which should retry `acquire` (one of them will get the miss).
    pub fn abort(&self, ticket: WriteTicket) -> Vec<WaiterId> {
        let mut g = self.lock();
        self.check_ticket(&g, &ticket);
        g.index.remove(&ticket.key);
        let s = &mut g.slots[ticket.slot];
        s.state = SlotState::Empty;
        s.key = None;
        s.data = None;
        let waiters = std::mem::take(&mut s.waiters);
        g.empty.push(ticket.slot);
        drop(g);
        self.changed.notify_all();
        waiters
    }

    pub fn release(&self, lease: ReadLease) {
        let mut g = self.lock();
        let s = &mut g.slots[lease.slot];
        assert!(
            lease.tier == self.id
                && s.generation == lease.generation
                && s.state == SlotState::Read
                && s.readers > 0,
            "release of a lease that is not live ({})",
            lease.key
        );
        s.readers -= 1;
        let slot = lease.slot;
        let now_free = s.readers == 0;
        let stamp = g.tick();
        let s = &mut g.slots[slot];
        s.lru_stamp = stamp;
        if now_free {
            g.evictable.insert((stamp, slot));
        }
        drop(g);
        if now_free {
            self.changed.notify_all();
        }
    }

    /// Published data for `key`, if present in `Read` state. Does not pin.
    pub fn peek(&self, key: ItemKey) -> Option<ItemData> {
        let g = self.lock();
        let &slot = g.index.get(&key)?;
        let s = &g.slots[slot];
        (s.state == SlotState::Read)
            .then(|| s.data.clone())
            .flatten()
    }

    /// Refreshes the LRU position of `key` without pinning it.
    pub fn touch(&self, key: ItemKey) {
        let mut g = self.lock();
        if let Some(&slot) = g.index.get(&key) {
            g.touch(slot);
        }
    }

    pub fn contains(&self, key: ItemKey) -> bool {
        self.lock().index.contains_key(&key)
    }

    /// Blocks until the slot for `token.key` is no longer being written, or
    /// until `timeout` elapses. Callers then retry `acquire`.
    pub fn wait(&self, token: WaitToken, timeout: Duration) {
        let g = self.lock();
        let _ = self
            .changed
            .wait_timeout_while(g, timeout, |g| match g.index.get(&token.key) {
                Some(&slot) => g.slots[slot].state == SlotState::Write,
                None => false,
            });
    }

    /// Blocking acquire for thread-per-job callers: never returns `MustWait`.
    pub fn acquire_blocking(&self, key: ItemKey, waiter: WaiterId) -> Acquire {
        loop {
            match self.acquire(key, waiter) {
                Ok(Acquire::MustWait(token)) => self.wait(token, Duration::from_millis(50)),
                Ok(other) => return other,
                Err(CacheError::NoEvictableSlot(_)) => {
                    let g = self.lock();
                    let _ = self
                        .changed
                        .wait_timeout_while(g, Duration::from_millis(50), |g| {
                            g.empty.is_empty() && g.evictable.is_empty()
                        });
                }
                Err(e) => unreachable!("acquire only fails with NoEvictableSlot: {e}"),
            }
        }
    }

    pub fn snapshot_stats(&self) -> TierStats {
        let g = self.lock();
        TierStats {
            occupancy: g.index.len(),
            ..g.stats
        }
    }

    pub fn slots(&self) -> Vec<SlotView> {
        self.lock()
            .slots
            .iter()
            .map(|s| SlotView {
                key: s.key,
                state: s.state,
                readers: s.readers,
                lru_stamp: s.lru_stamp,
            })
            .collect()
    }

    /// True when no slot is pinned: no readers and no writers.
    pub fn is_quiescent(&self) -> bool {
        self.lock()
            .slots
            .iter()
            .all(|s| s.readers == 0 && s.state != SlotState::Write)
    }

    /// Verifies the structural invariants; returns a description of the
    /// first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let g = self.lock();
        let mut occupied = 0;
        for (i, s) in g.slots.iter().enumerate() {
            match s.state {
                SlotState::Empty => {
                    if s.key.is_some() || s.readers != 0 {
                        return Err(format!("slot {i}: empty slot with key or readers"));
                    }
                }
                SlotState::Write => {
                    if s.readers != 0 {
                        return Err(format!("slot {i}: readers during write"));
                    }
                }
                SlotState::Read => {
                    if s.data.is_none() {
                        return Err(format!("slot {i}: read slot without data"));
                    }
                    let listed = g.evictable.contains(&(s.lru_stamp, i));
                    if listed != (s.readers == 0) {
                        return Err(format!("slot {i}: evictable set out of sync"));
                    }
                }
            }
            if let Some(k) = s.key {
                occupied += 1;
                if g.index.get(&k) != Some(&i) {
                    return Err(format!("slot {i}: index does not point back"));
                }
            }
        }
        if occupied != g.index.len() || occupied > g.slots.len() {
            return Err("index size mismatch".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::Stage;

    fn data(b: u8) -> ItemData {
        ItemData::new(Stage::Preprocessed, vec![b; 4])
    }

    fn miss(t: &CacheTier, k: u32) -> WriteTicket {
        match t.acquire(ItemKey(k), 0).unwrap() {
            Acquire::Miss(w) => w,
            other => panic!("expected miss, got {other:?}"),
        }
    }

    fn hit(t: &CacheTier, k: u32) -> ReadLease {
        match t.acquire(ItemKey(k), 0).unwrap() {
            Acquire::Hit(l) => l,
            other => panic!("expected hit, got {other:?}"),
        }
    }

    #[test]
    fn cold_miss_then_hit() {
        let t = CacheTier::new(TierLevel::Host, 4, 16);
        let w = miss(&t, 5);
        t.publish(w, data(5)).unwrap();
        let l = hit(&t, 5);
        assert_eq!(
            t.slots()
                .iter()
                .find(|s| s.key == Some(ItemKey(5)))
                .unwrap()
                .readers,
            1
        );
        assert_eq!(l.data(), &data(5));
        t.release(l);
        let s = t.snapshot_stats();
        assert_eq!((s.hits, s.misses), (1, 1));
    }

    #[test]
    fn stats_after_single_publish() {
        let t = CacheTier::new(TierLevel::Host, 4, 16);
        let w = miss(&t, 1);
        t.publish(w, data(1)).unwrap();
        let s = t.snapshot_stats();
        assert_eq!((s.hits, s.misses, s.occupancy), (0, 1, 1));
        let a = hit(&t, 1);
        let b = hit(&t, 1);
        t.release(a);
        t.release(b);
        assert_eq!(t.snapshot_stats().hits, 2);
    }

    #[test]
    fn lru_victim_is_oldest() {
        let t = CacheTier::new(TierLevel::Device(0), 2, 16);
        let w1 = miss(&t, 1);
        t.publish(w1, data(1)).unwrap();
        let w2 = miss(&t, 2);
        t.publish(w2, data(2)).unwrap();
        let _w3 = miss(&t, 3);
        assert!(!t.contains(ItemKey(1)));
        assert!(t.contains(ItemKey(2)));
        assert_eq!(t.snapshot_stats().evictions, 1);
    }

    #[test]
    fn writer_blocks_second_job_until_publish() {
        let t = CacheTier::new(TierLevel::Host, 4, 16);
        let w = miss(&t, 7);
        match t.acquire(ItemKey(7), 42).unwrap() {
            Acquire::MustWait(tok) => assert_eq!(tok.waiter, 42),
            other => panic!("{other:?}"),
        }
        let woken = t.publish(w, data(7)).unwrap();
        assert_eq!(woken, vec![42]);
        assert!(matches!(
            t.acquire(ItemKey(7), 42).unwrap(),
            Acquire::Hit(_)
        ));
    }

    #[test]
    fn abort_empties_slot_and_wakes_waiters() {
        let t = CacheTier::new(TierLevel::Host, 1, 16);
        let w = miss(&t, 7);
        assert!(matches!(
            t.acquire(ItemKey(7), 1).unwrap(),
            Acquire::MustWait(_)
        ));
        assert!(matches!(
            t.acquire(ItemKey(7), 2).unwrap(),
            Acquire::MustWait(_)
        ));
        let woken = t.abort(w);
        assert_eq!(woken, vec![1, 2]);
        assert_eq!(t.slots()[0].state, SlotState::Empty);
        // Retry order: the first retry gets the miss, the second waits.
        assert!(matches!(
            t.acquire(ItemKey(7), 1).unwrap(),
            Acquire::Miss(_)
        ));
        assert!(matches!(
            t.acquire(ItemKey(7), 2).unwrap(),
            Acquire::MustWait(_)
        ));
    }

    #[test]
    fn pinned_slots_are_never_evicted() {
        let t = CacheTier::new(TierLevel::Host, 2, 16);
        let w1 = miss(&t, 1);
        t.publish(w1, data(1)).unwrap();
        let l1 = hit(&t, 1);
        let _w2 = miss(&t, 2);
        assert_eq!(
            t.acquire(ItemKey(3), 0).unwrap_err(),
            CacheError::NoEvictableSlot(TierLevel::Host)
        );
        t.release(l1);
        assert!(matches!(
            t.acquire(ItemKey(3), 0).unwrap(),
            Acquire::Miss(_)
        ));
        assert!(!t.contains(ItemKey(1)));
    }

    #[test]
    fn release_counts_down() {
        let t = CacheTier::new(TierLevel::Host, 1, 16);
        let w = miss(&t, 1);
        t.publish(w, data(1)).unwrap();
        let a = hit(&t, 1);
        let b = hit(&t, 1);
        t.release(a);
        assert_eq!(t.slots()[0].readers, 1);
        assert!(t.acquire(ItemKey(2), 0).is_err());
        t.release(b);
        assert_eq!(t.slots()[0].readers, 0);
        let _w2 = miss(&t, 2);
        // Key 1 was evicted, so the next lookup misses again.
        assert!(!t.contains(ItemKey(1)));
    }

    #[test]
    fn oversized_publish_returns_ticket() {
        let t = CacheTier::new(TierLevel::Host, 1, 2);
        let w = miss(&t, 1);
        let err = t.publish(w, data(1)).unwrap_err();
        assert!(matches!(
            err.error,
            CacheError::SlotOverflow {
                len: 4,
                slot_size: 2
            }
        ));
        t.abort(err.ticket);
        assert!(t.is_quiescent());
    }

    #[test]
    fn no_evictions_when_capacity_suffices() {
        let t = CacheTier::new(TierLevel::Host, 8, 16);
        for k in 0..8 {
            let w = miss(&t, k);
            t.publish(w, data(k as u8)).unwrap();
        }
        assert_eq!(t.snapshot_stats().evictions, 0);
    }

    #[test]
    fn capacity_from_bytes_floors() {
        assert_eq!(Capacity::Bytes(100).slots(30), 3);
        assert_eq!(Capacity::Slots(7).slots(30), 7);
    }

    #[test]
    #[should_panic(expected = "not live")]
    fn forged_release_panics() {
        let t = CacheTier::new(TierLevel::Host, 1, 16);
        let w = miss(&t, 1);
        t.publish(w, data(1)).unwrap();
        let lease = hit(&t, 1);
        let forged = ReadLease {
            tier: lease.tier,
            slot: lease.slot,
            generation: lease.generation,
            key: lease.key,
            data: lease.data.clone(),
        };
        t.release(lease);
        t.release(forged);
    }
}
