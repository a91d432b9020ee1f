//! Per-node job engine. A `NodeCore` is a deterministic state machine: the
//! drivers feed it inputs (stage completions, frames, timers) and carry out
//! the actions it returns (run a stage on a lane, send a frame, arm a timer).

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::NodeMetrics;
use super::stage::{StageOutput, StageTask, Work};
use super::RunError;
use crate::app::{Application, ItemData, ItemKey, PairResult};
use crate::cache::{Acquire, CacheError, CacheTier, ReadLease, TierLevel, WaiterId, WriteTicket};
use crate::cluster::{Frame, RunConfig};
use crate::dist::{handle_probe, owner_of, CacheMessage, CandidatesTable, NodeId};
use crate::sched::{CompletionLedger, JobLimiter, Region, TaskNode, WorkerDeque};
use crate::util::mix64;

/// Completions are reported to node 0 in batches of this size, or earlier
/// when the node runs out of jobs.
pub const COMPLETION_BATCH: usize = 64;

const MAX_BACKOFF_DOUBLINGS: u32 = 6;

#[derive(Debug)]
pub enum Input {
    Start,
    StageDone { task: u64, output: StageOutput },
    Frame { src: NodeId, frame: Frame },
    Timer { token: u64 },
}

/// Backoffs are scaled like stage costs in real mode; timeouts are not.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TimerKind {
    Backoff,
    Timeout,
}

#[derive(Debug)]
pub enum Action {
    Stage(StageTask),
    Send {
        dst: NodeId,
        frame: Frame,
    },
    Timer {
        token: u64,
        after_s: f64,
        kind: TimerKind,
    },
    Finished,
}

#[derive(Debug)]
struct Device {
    tier: CacheTier,
    active: usize,
    slots: usize,
    /// Keys of active jobs, with multiplicity.
    reserved: HashMap<ItemKey, u32>,
    queue: VecDeque<u64>,
}

#[derive(Debug)]
struct Leaf {
    region: Region,
    next: u64,
    count: u64,
}

#[derive(Debug, PartialEq)]
enum WorkerState {
    Active,
    Remote { attempts: u32 },
    Backoff,
}

#[derive(Debug)]
struct Worker {
    deque: WorkerDeque,
    leaf: Option<Leaf>,
    state: WorkerState,
    /// Consecutive failed steal rounds; doubles the backoff, capped.
    idle_rounds: u32,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum JobPhase {
    Queued,
    Acquire,
    Compare,
    Result,
    Postprocess,
}

#[derive(Debug)]
struct Job {
    keys: [ItemKey; 2],
    device: u16,
    phase: JobPhase,
    wait: [KeyWait; 2],
    leases: [Option<ReadLease>; 2],
}

/// Per-key progress of a job in the `Acquire` phase. Both keys are
/// acquired concurrently.
#[derive(Copy, Clone, Debug, PartialEq)]
enum KeyWait {
    Idle,
    Slot,
    Fetch,
    Backoff,
    Ready,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum FetchPhase {
    Host,
    WaitHost,
    Backoff,
    Remote,
    Load,
    Parse,
    UploadParsed,
    Preprocess,
    Download,
    Upload,
}

#[derive(Debug)]
struct Fetch {
    key: ItemKey,
    device: u16,
    job: u64,
    device_ticket: Option<WriteTicket>,
    host_ticket: Option<WriteTicket>,
    host_lease: Option<ReadLease>,
    phase: FetchPhase,
}

#[derive(Copy, Clone, Debug)]
enum Pending {
    Fetch(u64),
    Job(u64),
}

#[derive(Copy, Clone, Debug)]
enum TimerTarget {
    JobRetry(u64, usize),
    FetchRetry(u64),
    FetchTimeout { fetch: u64, request: u64 },
    Steal(usize),
}

pub struct NodeCore {
    id: NodeId,
    p: usize,
    n: u32,
    app: Arc<dyn Application>,
    leaf_block: u32,
    steal_local: u32,
    steal_remote: u32,
    steal_backoff_s: f64,
    slot_backoff_s: f64,
    fetch_timeout_s: f64,
    dist_enabled: bool,
    keep_results: bool,
    devices: Vec<Device>,
    host: CacheTier,
    host_published: HashSet<ItemKey>,
    table: CandidatesTable,
    workers: Vec<Worker>,
    rr: usize,
    limiter: JobLimiter,
    jobs: HashMap<u64, Job>,
    fetches: HashMap<u64, Fetch>,
    pending: HashMap<u64, Pending>,
    timers: HashMap<u64, TimerTarget>,
    remote: HashMap<u64, u64>,
    steals: HashMap<u64, usize>,
    batch: Vec<(u32, u32)>,
    ledger: Option<CompletionLedger>,
    started: bool,
    terminated: bool,
    next_id: u64,
    rng: ChaCha8Rng,
    out: Vec<Action>,
    now: f64,
    metrics: NodeMetrics,
}

impl NodeCore {
    pub fn new(id: NodeId, cfg: &RunConfig, app: Arc<dyn Application>) -> Result<Self, RunError> {
        let node = &cfg.nodes[id as usize];
        let n = app.descriptor().n as u32;
        let slot_size = app.descriptor().slot_size;
        let mut devices = Vec::with_capacity(node.devices.len());
        for d in 0..node.devices.len() {
            let slots = cfg.device_slots(id as usize, d)?;
            devices.push(Device {
                tier: CacheTier::new(TierLevel::Device(d as u16), slots, slot_size),
                active: 0,
                slots,
                reserved: HashMap::new(),
                queue: VecDeque::new(),
            });
        }
        let host = CacheTier::new(TierLevel::Host, cfg.host_slots(id as usize)?, slot_size);
        let workers = (0..devices.len())
            .map(|_| Worker {
                deque: WorkerDeque::new(),
                leaf: None,
                state: WorkerState::Active,
                idle_rounds: 0,
            })
            .collect();
        Ok(NodeCore {
            id,
            p: cfg.p(),
            n,
            app,
            leaf_block: cfg.scheduler.leaf_block,
            steal_local: cfg.scheduler.steal_retry_local,
            steal_remote: cfg.scheduler.steal_retry_remote,
            steal_backoff_s: cfg.scheduler.steal_backoff_us as f64 * 1e-6,
            slot_backoff_s: cfg.runtime.slot_backoff_s,
            fetch_timeout_s: cfg.cache.fetch_timeout_s,
            dist_enabled: cfg.cache.enabled,
            keep_results: cfg.runtime.keep_results,
            devices,
            host,
            host_published: HashSet::new(),
            table: CandidatesTable::with_capacity(id, cfg.p(), cfg.cache.h, cfg.h_max()),
            workers,
            rr: 0,
            limiter: JobLimiter::new(cfg.job_limit(id as usize)?),
            jobs: HashMap::new(),
            fetches: HashMap::new(),
            pending: HashMap::new(),
            timers: HashMap::new(),
            remote: HashMap::new(),
            steals: HashMap::new(),
            batch: Vec::new(),
            ledger: (id == 0).then(|| CompletionLedger::new(n as usize)),
            started: false,
            terminated: false,
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ mix64(0x6e6f_6465 + id as u64))),
            out: Vec::new(),
            now: 0.0,
            metrics: NodeMetrics {
                node: id,
                ..Default::default()
            },
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn is_finished(&self) -> bool {
        self.terminated
    }

    pub fn in_flight_jobs(&self) -> usize {
        self.jobs.len()
    }

    /// Feeds one input and returns the resulting actions.
    pub fn handle(&mut self, now: f64, input: Input) -> Result<Vec<Action>, RunError> {
        self.now = now;
        if self.terminated {
            return Ok(Vec::new());
        }
        match input {
            Input::Start => self.start()?,
            Input::StageDone { task, output } => self.stage_done(task, output)?,
            Input::Frame { src, frame } => self.on_frame(src, frame)?,
            Input::Timer { token } => self.on_timer(token)?,
        }
        self.pump()?;
        self.maybe_flush();
        Ok(std::mem::take(&mut self.out))
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn request_id(&mut self) -> u64 {
        (self.id as u64) << 48 | self.fresh_id()
    }

    fn start(&mut self) -> Result<(), RunError> {
        if self.started {
            return Ok(());
        }
        self.started = true;
        if self.id == 0 {
            if self.n >= 2 {
                self.workers[0].deque.push(TaskNode::root(self.n));
            }
            if self.ledger.as_ref().is_some_and(CompletionLedger::is_full) {
                self.terminate();
            }
        }
        Ok(())
    }

    fn terminate(&mut self) {
        for dst in 1..self.p as NodeId {
            self.out.push(Action::Send {
                dst,
                frame: Frame::Terminate { from: self.id },
            });
        }
        self.finish();
    }

    fn finish(&mut self) {
        if self.terminated {
            return;
        }
        self.terminated = true;
        let mut unquiescent = u64::from(!self.host.is_quiescent());
        for d in &self.devices {
            unquiescent += u64::from(!d.tier.is_quiescent());
        }
        self.metrics.unquiescent_tiers = unquiescent;
        self.out.push(Action::Finished);
    }

    fn stage(&mut self, owner: Pending, work: Work, high_priority: bool) {
        let id = self.fresh_id();
        self.pending.insert(id, owner);
        self.out.push(Action::Stage(StageTask {
            id,
            lane: work.lane(),
            high_priority,
            work,
        }));
    }

    fn timer(&mut self, target: TimerTarget, after_s: f64, kind: TimerKind) {
        let token = self.fresh_id();
        self.timers.insert(token, target);
        self.out.push(Action::Timer {
            token,
            after_s,
            kind,
        });
    }

    fn send(&mut self, dst: NodeId, frame: Frame) {
        if frame.is_cache() && dst != self.id {
            self.metrics.dist.messages += 1;
        }
        self.out.push(Action::Send { dst, frame });
    }

    // ---- scheduling -------------------------------------------------------

    fn pump(&mut self) -> Result<(), RunError> {
        if self.terminated || !self.started {
            return Ok(());
        }
        let w = self.workers.len();
        loop {
            let mut progress = false;
            for k in 0..w {
                progress |= self.drive_worker((self.rr + k) % w)?;
            }
            self.rr = (self.rr + 1) % w;
            if !progress {
                return Ok(());
            }
        }
    }

    fn drive_worker(&mut self, w: usize) -> Result<bool, RunError> {
        if self.workers[w].state != WorkerState::Active {
            return Ok(false);
        }
        if let Some(leaf) = &mut self.workers[w].leaf {
            if self.limiter.is_full() {
                return Ok(false);
            }
            let (i, j) = leaf.region.nth_pair(leaf.next).expect("cursor inside leaf");
            leaf.next += 1;
            if leaf.next == leaf.count {
                self.workers[w].leaf = None;
            }
            self.submit(w, i, j)?;
            return Ok(true);
        }
        if let Some(task) = self.workers[w].deque.pop() {
            if task.region.is_leaf(self.leaf_block) {
                self.workers[w].leaf = Some(Leaf {
                    region: task.region,
                    next: 0,
                    count: task.region.pair_count(),
                });
            } else {
                for child in task.children().into_iter().rev() {
                    self.workers[w].deque.push(child);
                }
            }
            return Ok(true);
        }
        let nw = self.workers.len();
        if nw > 1 {
            for _ in 0..self.steal_local {
                let mut v = self.rng.gen_range(0..nw - 1);
                if v >= w {
                    v += 1;
                }
                if let Some(t) = self.workers[v].deque.steal() {
                    self.workers[w].deque.push(t);
                    self.workers[w].idle_rounds = 0;
                    self.metrics.steals.local += 1;
                    return Ok(true);
                }
            }
        }
        if self.p > 1 && self.steal_remote > 0 {
            self.send_steal(w, 0);
        } else {
            self.steal_backoff(w);
        }
        Ok(false)
    }

    fn send_steal(&mut self, w: usize, attempts: u32) {
        let mut dst = self.rng.gen_range(0..self.p - 1) as NodeId;
        if dst >= self.id {
            dst += 1;
        }
        let rid = self.request_id();
        self.steals.insert(rid, w);
        self.workers[w].state = WorkerState::Remote { attempts };
        self.metrics.steals.remote_requests += 1;
        self.send(
            dst,
            Frame::StealRequest {
                request_id: rid,
                thief: self.id,
            },
        );
    }

    fn steal_backoff(&mut self, w: usize) {
        let worker = &mut self.workers[w];
        worker.state = WorkerState::Backoff;
        let after =
            self.steal_backoff_s * f64::from(1u32 << worker.idle_rounds.min(MAX_BACKOFF_DOUBLINGS));
        worker.idle_rounds += 1;
        self.timer(TimerTarget::Steal(w), after, TimerKind::Backoff);
    }

    fn submit(&mut self, w: usize, i: ItemKey, j: ItemKey) -> Result<(), RunError> {
        let ok = self.limiter.try_acquire();
        debug_assert!(ok);
        let id = self.fresh_id();
        self.jobs.insert(
            id,
            Job {
                keys: [i, j],
                device: w as u16,
                phase: JobPhase::Queued,
                wait: [KeyWait::Idle; 2],
                leases: [None, None],
            },
        );
        self.devices[w].queue.push_back(id);
        self.admit(w)
    }

    /// Activates queued jobs, in order, while the keys of all active jobs
    /// fit in the device cache at the same time.
    fn admit(&mut self, d: usize) -> Result<(), RunError> {
        while let Some(&job) = self.devices[d].queue.front() {
            let keys = self.jobs[&job].keys;
            let dev = &mut self.devices[d];
            let extra = keys
                .iter()
                .filter(|k| !dev.reserved.contains_key(k))
                .count();
            if dev.reserved.len() + extra > dev.slots {
                break;
            }
            dev.queue.pop_front();
            for k in keys {
                *dev.reserved.entry(k).or_default() += 1;
            }
            dev.active += 1;
            self.jobs.get_mut(&job).expect("live job").phase = JobPhase::Acquire;
            self.acquire_key(job, 0)?;
            self.acquire_key(job, 1)?;
        }
        Ok(())
    }

    // ---- job flow ---------------------------------------------------------

    fn acquire_key(&mut self, job_id: u64, which: usize) -> Result<(), RunError> {
        let job = self.jobs.get_mut(&job_id).expect("live job");
        let key = job.keys[which];
        let d = job.device as usize;
        match self.devices[d].tier.acquire(key, job_id) {
            Ok(Acquire::Hit(lease)) => {
                job.leases[which] = Some(lease);
                job.wait[which] = KeyWait::Ready;
                if job.wait == [KeyWait::Ready; 2] {
                    self.dispatch_compare(job_id);
                }
                Ok(())
            }
            Ok(Acquire::MustWait(_)) => {
                job.wait[which] = KeyWait::Slot;
                Ok(())
            }
            Ok(Acquire::Miss(ticket)) => {
                job.wait[which] = KeyWait::Fetch;
                self.start_fetch(key, d as u16, job_id, ticket)
            }
            Err(CacheError::NoEvictableSlot(_)) => {
                job.wait[which] = KeyWait::Backoff;
                self.timer(
                    TimerTarget::JobRetry(job_id, which),
                    self.slot_backoff_s,
                    TimerKind::Backoff,
                );
                Ok(())
            }
            Err(e) => Err(RunError::Protocol(e.to_string())),
        }
    }

    fn dispatch_compare(&mut self, job_id: u64) {
        let job = self.jobs.get_mut(&job_id).expect("live job");
        job.phase = JobPhase::Compare;
        let left = job.leases[0].as_ref().expect("left lease").data().clone();
        let right = job.leases[1].as_ref().expect("right lease").data().clone();
        let work = Work::Compare {
            device: job.device,
            left: (job.keys[0], left),
            right: (job.keys[1], right),
        };
        self.stage(Pending::Job(job_id), work, false);
    }

    fn job_step(&mut self, job_id: u64, output: StageOutput) -> Result<(), RunError> {
        let job = self.jobs.get_mut(&job_id).expect("live job");
        let [i, j] = job.keys;
        let d = job.device;
        match (job.phase, output) {
            (JobPhase::Compare, StageOutput::Raw(raw)) => {
                job.phase = JobPhase::Result;
                let leases = [job.leases[0].take(), job.leases[1].take()];
                for lease in leases.into_iter().flatten() {
                    self.devices[d as usize].tier.release(lease);
                }
                let dev = &mut self.devices[d as usize];
                dev.active -= 1;
                for k in [i, j] {
                    let c = dev.reserved.get_mut(&k).expect("reserved key");
                    *c -= 1;
                    if *c == 0 {
                        dev.reserved.remove(&k);
                    }
                }
                self.stage(
                    Pending::Job(job_id),
                    Work::Result {
                        device: d,
                        i,
                        j,
                        raw,
                    },
                    false,
                );
                self.admit(d as usize)
            }
            (JobPhase::Result, StageOutput::Raw(raw)) => {
                job.phase = JobPhase::Postprocess;
                self.stage(Pending::Job(job_id), Work::Postprocess { i, j, raw }, true);
                Ok(())
            }
            (JobPhase::Postprocess, StageOutput::Pair(result)) => {
                self.jobs.remove(&job_id);
                self.limiter.release();
                self.complete(result)
            }
            (phase, out) => Err(RunError::Protocol(format!("job in {phase:?} got {out:?}"))),
        }
    }

    fn complete(&mut self, result: PairResult) -> Result<(), RunError> {
        self.metrics.comparisons += 1;
        self.metrics.finish_s = self.now;
        if self.keep_results {
            self.metrics.results.push(result);
        }
        let pair = (result.left.0, result.right.0);
        if self.id == 0 {
            self.record(&[pair])
        } else {
            self.batch.push(pair);
            Ok(())
        }
    }

    fn record(&mut self, pairs: &[(u32, u32)]) -> Result<(), RunError> {
        let ledger = self.ledger.as_mut().ok_or_else(|| {
            RunError::Protocol("completions sent to a node without ledger".into())
        })?;
        for &(i, j) in pairs {
            ledger.record(ItemKey(i), ItemKey(j))?;
        }
        if ledger.is_full() {
            self.terminate();
        }
        Ok(())
    }

    fn maybe_flush(&mut self) {
        if self.id != 0
            && !self.terminated
            && !self.batch.is_empty()
            && (self.batch.len() >= COMPLETION_BATCH || self.jobs.is_empty())
        {
            let pairs = std::mem::take(&mut self.batch);
            self.send(
                0,
                Frame::Completions {
                    from: self.id,
                    pairs,
                },
            );
        }
    }

    // ---- item fetches -----------------------------------------------------

    fn start_fetch(
        &mut self,
        key: ItemKey,
        device: u16,
        job: u64,
        ticket: WriteTicket,
    ) -> Result<(), RunError> {
        let id = self.fresh_id();
        self.fetches.insert(
            id,
            Fetch {
                key,
                device,
                job,
                device_ticket: Some(ticket),
                host_ticket: None,
                host_lease: None,
                phase: FetchPhase::Host,
            },
        );
        self.fetch_host(id)
    }

    fn fetch_host(&mut self, fid: u64) -> Result<(), RunError> {
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        let key = f.key;
        match self.host.acquire(key, fid) {
            Ok(Acquire::Hit(lease)) => {
                let data = lease.data().clone();
                f.host_lease = Some(lease);
                f.phase = FetchPhase::Upload;
                let device = f.device;
                self.stage(
                    Pending::Fetch(fid),
                    Work::Upload { key, device, data },
                    false,
                );
            }
            Ok(Acquire::MustWait(_)) => f.phase = FetchPhase::WaitHost,
            Ok(Acquire::Miss(ticket)) => {
                f.host_ticket = Some(ticket);
                if self.dist_enabled && self.p > 1 {
                    self.remote_lookup(fid);
                } else {
                    self.local_load(fid);
                }
            }
            Err(CacheError::NoEvictableSlot(_)) => {
                f.phase = FetchPhase::Backoff;
                self.timer(
                    TimerTarget::FetchRetry(fid),
                    self.slot_backoff_s,
                    TimerKind::Backoff,
                );
            }
            Err(e) => return Err(RunError::Protocol(e.to_string())),
        }
        Ok(())
    }

    fn remote_lookup(&mut self, fid: u64) {
        let rid = self.request_id();
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        f.phase = FetchPhase::Remote;
        let key = f.key;
        self.remote.insert(rid, fid);
        self.metrics.dist.requests += 1;
        self.timer(
            TimerTarget::FetchTimeout {
                fetch: fid,
                request: rid,
            },
            self.fetch_timeout_s,
            TimerKind::Timeout,
        );
        let owner = owner_of(key, self.p);
        if owner == self.id {
            let (dst, msg) = self.table.handle_request(rid, key, self.id);
            self.send(dst, Frame::Cache(msg));
        } else {
            self.send(
                owner,
                Frame::Cache(CacheMessage::Request {
                    request_id: rid,
                    key,
                    origin: self.id,
                }),
            );
        }
    }

    fn local_load(&mut self, fid: u64) {
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        f.phase = FetchPhase::Load;
        let key = f.key;
        self.metrics.loads += 1;
        let path = self.app.path_for_key(key);
        self.stage(Pending::Fetch(fid), Work::Load { key, path }, false);
    }

    fn publish_host(&mut self, fid: u64, data: ItemData) -> Result<(), RunError> {
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        let ticket = f.host_ticket.take().expect("host ticket");
        let key = f.key;
        let waiters = self
            .host
            .publish(ticket, data)
            .map_err(|e| RunError::Protocol(format!("host publish of {key}: {}", e.error)))?;
        self.host_published.insert(key);
        self.wake_all(waiters)
    }

    fn publish_device(&mut self, fid: u64, data: ItemData) -> Result<(), RunError> {
        let f = self.fetches.remove(&fid).expect("live fetch");
        if !self.host_published.contains(&f.key) {
            self.metrics.write_through_violations += 1;
        }
        let ticket = f.device_ticket.expect("device ticket");
        let waiters = self.devices[f.device as usize]
            .tier
            .publish(ticket, data)
            .map_err(|e| RunError::Protocol(format!("device publish of {}: {}", f.key, e.error)))?;
        self.wake_all(waiters)?;
        let job = self.jobs.get(&f.job).expect("fetch owner is live");
        let which = usize::from(job.keys[1] == f.key);
        match (job.phase, job.wait[which]) {
            (JobPhase::Acquire, KeyWait::Fetch) => self.acquire_key(f.job, which),
            other => Err(RunError::Protocol(format!(
                "fetch of {} finished for job in {other:?}",
                f.key
            ))),
        }
    }

    fn wake_all(&mut self, waiters: Vec<WaiterId>) -> Result<(), RunError> {
        for w in waiters {
            if let Some(job) = self.jobs.get(&w) {
                let waiting = job.wait.map(|k| k == KeyWait::Slot);
                for (which, _) in waiting.iter().enumerate().filter(|(_, &b)| b) {
                    if self.jobs[&w].wait[which] == KeyWait::Slot {
                        self.acquire_key(w, which)?;
                    }
                }
            } else if let Some(f) = self.fetches.get(&w) {
                if f.phase == FetchPhase::WaitHost {
                    self.fetch_host(w)?;
                }
            }
        }
        Ok(())
    }

    fn fetch_step(&mut self, fid: u64, output: StageOutput) -> Result<(), RunError> {
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        let (key, device) = (f.key, f.device);
        let StageOutput::Item(data) = output else {
            return Err(RunError::Protocol(format!(
                "fetch of {key} got a non-item output"
            )));
        };
        match f.phase {
            FetchPhase::Load => {
                f.phase = FetchPhase::Parse;
                self.stage(Pending::Fetch(fid), Work::Parse { key, raw: data }, false);
            }
            FetchPhase::Parse => {
                f.phase = FetchPhase::UploadParsed;
                self.stage(
                    Pending::Fetch(fid),
                    Work::Upload { key, device, data },
                    false,
                );
            }
            FetchPhase::UploadParsed => {
                f.phase = FetchPhase::Preprocess;
                self.stage(
                    Pending::Fetch(fid),
                    Work::Preprocess {
                        key,
                        device,
                        parsed: data,
                    },
                    false,
                );
            }
            FetchPhase::Preprocess => {
                f.phase = FetchPhase::Download;
                self.stage(
                    Pending::Fetch(fid),
                    Work::Download { key, device, data },
                    false,
                );
            }
            FetchPhase::Download => {
                self.publish_host(fid, data.clone())?;
                self.publish_device(fid, data)?;
            }
            FetchPhase::Upload => {
                if let Some(lease) = f.host_lease.take() {
                    self.host.release(lease);
                }
                self.publish_device(fid, data)?;
            }
            other => {
                return Err(RunError::Protocol(format!(
                    "fetch of {key} in {other:?} got a stage result"
                )))
            }
        }
        Ok(())
    }

    fn remote_data(&mut self, fid: u64, payload: ItemData) -> Result<(), RunError> {
        self.publish_host(fid, payload.clone())?;
        let f = self.fetches.get_mut(&fid).expect("live fetch");
        f.phase = FetchPhase::Upload;
        let (key, device) = (f.key, f.device);
        self.stage(
            Pending::Fetch(fid),
            Work::Upload {
                key,
                device,
                data: payload,
            },
            false,
        );
        Ok(())
    }

    // ---- inputs -----------------------------------------------------------

    fn stage_done(&mut self, task: u64, output: StageOutput) -> Result<(), RunError> {
        match self.pending.remove(&task) {
            Some(Pending::Fetch(fid)) => self.fetch_step(fid, output),
            Some(Pending::Job(jid)) => self.job_step(jid, output),
            None => Err(RunError::Protocol(format!("unknown stage task {task}"))),
        }
    }

    fn on_timer(&mut self, token: u64) -> Result<(), RunError> {
        match self.timers.remove(&token) {
            Some(TimerTarget::JobRetry(job, which)) => {
                if self
                    .jobs
                    .get(&job)
                    .is_some_and(|j| j.wait[which] == KeyWait::Backoff)
                {
                    self.acquire_key(job, which)?;
                }
            }
            Some(TimerTarget::FetchRetry(fid)) => {
                if self
                    .fetches
                    .get(&fid)
                    .is_some_and(|f| f.phase == FetchPhase::Backoff)
                {
                    self.fetch_host(fid)?;
                }
            }
            Some(TimerTarget::FetchTimeout { fetch, request }) => {
                if self.remote.remove(&request).is_some() {
                    self.metrics.dist.timeouts += 1;
                    self.local_load(fetch);
                }
            }
            Some(TimerTarget::Steal(w)) => {
                if self.workers[w].state == WorkerState::Backoff {
                    self.workers[w].state = WorkerState::Active;
                }
            }
            None => {}
        }
        Ok(())
    }

    fn on_frame(&mut self, src: NodeId, frame: Frame) -> Result<(), RunError> {
        match frame {
            Frame::Cache(msg) => self.on_cache(msg),
            Frame::StealRequest { request_id, thief } => {
                let nw = self.workers.len();
                let first = self.rng.gen_range(0..nw);
                let task = (0..nw).find_map(|k| self.workers[(first + k) % nw].deque.steal());
                self.send(
                    thief,
                    Frame::StealResponse {
                        request_id,
                        victim: self.id,
                        task,
                    },
                );
                Ok(())
            }
            Frame::StealResponse {
                request_id, task, ..
            } => {
                let Some(w) = self.steals.remove(&request_id) else {
                    return Ok(());
                };
                let WorkerState::Remote { attempts } = self.workers[w].state else {
                    return Err(RunError::Protocol(
                        "steal response for a worker that is not stealing".into(),
                    ));
                };
                match task {
                    Some(t) => {
                        self.workers[w].deque.push(t);
                        self.workers[w].state = WorkerState::Active;
                        self.workers[w].idle_rounds = 0;
                        self.metrics.steals.remote += 1;
                    }
                    None if attempts + 1 < self.steal_remote => self.send_steal(w, attempts + 1),
                    None => self.steal_backoff(w),
                }
                Ok(())
            }
            Frame::Completions { pairs, .. } => self.record(&pairs),
            Frame::Terminate { .. } => {
                self.finish();
                Ok(())
            }
            Frame::NodeReport { .. } | Frame::Hello { .. } => Err(RunError::Protocol(format!(
                "unexpected control frame from node {src}"
            ))),
        }
    }

    fn on_cache(&mut self, msg: CacheMessage) -> Result<(), RunError> {
        match msg {
            CacheMessage::Request {
                request_id,
                key,
                origin,
            } => {
                if owner_of(key, self.p) != self.id {
                    return Err(RunError::Protocol(format!(
                        "request for {key} routed to node {}",
                        self.id
                    )));
                }
                let (dst, out) = self.table.handle_request(request_id, key, origin);
                self.send(dst, Frame::Cache(out));
            }
            CacheMessage::Forward {
                request_id,
                key,
                origin,
                remaining,
                hop,
            } => {
                let copy = self.host.peek(key);
                let (dst, out) = handle_probe(request_id, key, origin, &remaining, hop, copy);
                self.send(dst, Frame::Cache(out));
            }
            CacheMessage::Data {
                request_id,
                hop,
                payload,
                ..
            } => {
                if let Some(fid) = self.remote.remove(&request_id) {
                    let hits = &mut self.metrics.dist.hits_by_hop;
                    if hits.len() <= hop as usize {
                        hits.resize(hop as usize + 1, 0);
                    }
                    hits[hop as usize] += 1;
                    self.remote_data(fid, payload)?;
                }
            }
            CacheMessage::Failure { request_id, .. } => {
                if let Some(fid) = self.remote.remove(&request_id) {
                    self.metrics.dist.failures += 1;
                    self.local_load(fid);
                }
            }
        }
        Ok(())
    }

    // ---- inspection -------------------------------------------------------

    pub fn metrics(&self) -> NodeMetrics {
        let mut m = self.metrics.clone();
        m.host = self.host.snapshot_stats();
        m.device = Default::default();
        for d in &self.devices {
            m.device.accumulate(&d.tier.snapshot_stats());
        }
        m
    }

    pub fn check_tiers(&self) -> Result<(), String> {
        self.host.check_invariants()?;
        for d in &self.devices {
            d.tier.check_invariants()?;
        }
        Ok(())
    }

    /// Human-readable state of every job and fetch, for deadlock reports.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "node {}: {} jobs, {} fetches, limiter {}/{}, terminated {}",
            self.id,
            self.jobs.len(),
            self.fetches.len(),
            self.limiter.in_flight(),
            self.limiter.limit(),
            self.terminated
        );
        for (d, dev) in self.devices.iter().enumerate() {
            let _ = writeln!(
                s,
                "  device {d}: active {}, reserved {}/{}, queued {}",
                dev.active,
                dev.reserved.len(),
                dev.slots,
                dev.queue.len()
            );
        }
        for (w, worker) in self.workers.iter().enumerate() {
            let _ = writeln!(
                s,
                "  worker {w}: {:?}, deque {}, leaf {:?}",
                worker.state,
                worker.deque.len(),
                worker.leaf.as_ref().map(|l| (l.region, l.next, l.count))
            );
        }
        let mut jobs: Vec<_> = self.jobs.iter().collect();
        jobs.sort_by_key(|(id, _)| **id);
        for (id, j) in jobs.iter().take(32) {
            let _ = writeln!(
                s,
                "  job {id} ({}, {}) on device {}: {:?} {:?}",
                j.keys[0], j.keys[1], j.device, j.phase, j.wait
            );
        }
        let mut fetches: Vec<_> = self.fetches.iter().collect();
        fetches.sort_by_key(|(id, _)| **id);
        for (id, f) in fetches.iter().take(32) {
            let _ = writeln!(s, "  fetch {id} {} for job {}: {:?}", f.key, f.job, f.phase);
        }
        s
    }
}
