//! Threaded driver. Every lane is a pool of OS threads; stage costs are
//! reproduced by holding the lane for `duration * time_scale` of wall time,
//! and storage reads go through a shared token bucket. Nodes talk through a
//! [`Transport`]: in-process channels or TCP sockets.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, unbounded, Receiver, Sender};

use super::node::{Action, Input, NodeCore, TimerKind};
use super::stage::{CostContext, Lane, StageOutput, StageTask, Work};
use super::{assemble, cost_context, NodeMetrics, RunError, RunOutput, TraceEvent};
use crate::app::{AppError, Application};
use crate::cluster::{
    in_process, Frame, Inbox, RunConfig, Storage, TcpTransport, TokenBucket, Transport,
};
use crate::dist::NodeId;

const POLL: Duration = Duration::from_millis(20);
const SPIN_TAIL: Duration = Duration::from_micros(200);
const MIN_BACKOFF: Duration = Duration::from_micros(100);
const SHUTDOWN_WAIT: Duration = Duration::from_secs(60);

struct Shared {
    app: Arc<dyn Application>,
    storage: Arc<dyn Storage>,
    bucket: Option<TokenBucket>,
    epoch: Instant,
    scale: f64,
    storage_latency: Duration,
    abort: Arc<AtomicBool>,
    messages: Option<Arc<Mutex<HashMap<u64, u64>>>>,
}

impl Shared {
    fn new(cfg: &RunConfig, app: Arc<dyn Application>, storage: Arc<dyn Storage>) -> Self {
        let scale = cfg.runtime.time_scale;
        let bucket = (scale > 0.0).then(|| {
            let rate = cfg.storage.bandwidth_bps / scale;
            TokenBucket::new(rate, (rate * 1e-3).max(64.0 * 1024.0))
        });
        Shared {
            app,
            storage,
            bucket,
            epoch: Instant::now(),
            scale,
            storage_latency: Duration::from_secs_f64(cfg.storage.latency_s * scale),
            abort: Arc::new(AtomicBool::new(false)),
            messages: None,
        }
    }

    /// Wall time converted to modelled seconds. A zero scale runs
    /// unthrottled and reports wall time.
    fn modelled(&self, at: Instant) -> f64 {
        self.to_modelled(at.duration_since(self.epoch).as_secs_f64())
    }

    fn to_modelled(&self, wall_s: f64) -> f64 {
        if self.scale > 0.0 {
            wall_s / self.scale
        } else {
            wall_s
        }
    }
}

struct Done {
    task: u64,
    result: Result<StageOutput, AppError>,
    lane: String,
    label: &'static str,
    keys: (u32, Option<u32>),
    start: Instant,
    end: Instant,
}

struct LaneHandle {
    lane: Lane,
    high: Sender<StageTask>,
    low: Sender<StageTask>,
}

fn hold_until(deadline: Instant) {
    let now = Instant::now();
    if deadline <= now {
        return;
    }
    if deadline - now > SPIN_TAIL {
        thread::sleep(deadline - now - SPIN_TAIL);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

fn lane_loop(
    name: String,
    high: Receiver<StageTask>,
    low: Receiver<StageTask>,
    done: Sender<Done>,
    shared: Arc<Shared>,
    ctx: Arc<CostContext>,
) {
    loop {
        let task = match high.try_recv() {
            Ok(t) => t,
            Err(_) => select! {
                recv(high) -> t => match t { Ok(t) => t, Err(_) => return },
                recv(low) -> t => match t { Ok(t) => t, Err(_) => return },
            },
        };
        let start = Instant::now();
        let result = task
            .work
            .execute(shared.app.as_ref(), shared.storage.as_ref());
        match (&task.work, &result) {
            (Work::Load { .. }, Ok(StageOutput::Item(raw))) => {
                if let Some(b) = &shared.bucket {
                    b.take(ctx.raw_bytes(raw.byte_length()));
                }
                if !shared.storage_latency.is_zero() {
                    thread::sleep(shared.storage_latency);
                }
            }
            (_, Ok(_)) => {
                hold_until(start + Duration::from_secs_f64(ctx.duration(&task.work) * shared.scale))
            }
            _ => {}
        }
        let (i, j) = task.work.keys();
        let msg = Done {
            task: task.id,
            result,
            lane: name.clone(),
            label: task.work.label(),
            keys: (i.0, j.map(|k| k.0)),
            start,
            end: Instant::now(),
        };
        if done.send(msg).is_err() {
            return;
        }
    }
}

struct NodeRun {
    metrics: NodeMetrics,
    trace: Vec<TraceEvent>,
    reports: Vec<NodeMetrics>,
}

struct Dispatcher<'a> {
    cfg: &'a RunConfig,
    core: NodeCore,
    shared: Arc<Shared>,
    transport: &'a dyn Transport,
    lanes: Vec<LaneHandle>,
    timers: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: u64,
    ctx: Arc<CostContext>,
    io_bytes: u64,
    busy: BTreeMap<String, f64>,
    trace: Vec<TraceEvent>,
    reports: Vec<NodeMetrics>,
    finished: bool,
}

impl Dispatcher<'_> {
    fn feed(&mut self, input: Input) -> Result<(), RunError> {
        let now = self.shared.modelled(Instant::now());
        let actions = self.core.handle(now, input)?;
        for a in actions {
            match a {
                Action::Stage(task) => {
                    let lane = self
                        .lanes
                        .iter()
                        .find(|l| l.lane == task.lane)
                        .expect("lane exists");
                    let tx = if task.high_priority {
                        &lane.high
                    } else {
                        &lane.low
                    };
                    tx.send(task)
                        .map_err(|_| RunError::Protocol("lane thread exited".into()))?;
                }
                Action::Send { dst, frame } => {
                    if let (Some(m), Frame::Cache(c)) = (&self.shared.messages, &frame) {
                        if dst != self.core.id() {
                            *m.lock().unwrap().entry(c.request_id()).or_default() += 1;
                        }
                    }
                    self.transport.send(dst, &frame)?;
                }
                Action::Timer {
                    token,
                    after_s,
                    kind,
                } => {
                    let wait = match kind {
                        TimerKind::Backoff => {
                            Duration::from_secs_f64(after_s * self.shared.scale).max(MIN_BACKOFF)
                        }
                        TimerKind::Timeout => Duration::from_secs_f64(after_s),
                    };
                    self.timer_seq += 1;
                    self.timers
                        .push(Reverse((Instant::now() + wait, self.timer_seq, token)));
                }
                Action::Finished => self.finished = true,
            }
        }
        Ok(())
    }

    fn on_done(&mut self, d: Done) -> Result<(), RunError> {
        let output = d.result?;
        let busy = self
            .shared
            .to_modelled(d.end.duration_since(d.start).as_secs_f64());
        let lane_key = if d.lane.starts_with("cpu") {
            "cpu".to_owned()
        } else {
            d.lane.clone()
        };
        *self.busy.entry(lane_key).or_default() += busy;
        if let (StageOutput::Item(raw), "load") = (&output, d.label) {
            self.io_bytes += self.ctx.raw_bytes(raw.byte_length());
        }
        if self.cfg.runtime.profile {
            self.trace.push(TraceEvent {
                node: self.core.id(),
                lane: d.lane,
                label: d.label.to_owned(),
                start_ns: (self.shared.modelled(d.start) * 1e9).round() as u64,
                end_ns: (self.shared.modelled(d.end) * 1e9).round() as u64,
                i: d.keys.0,
                j: d.keys.1,
            });
        }
        self.feed(Input::StageDone {
            task: d.task,
            output,
        })
    }

    fn on_frame(&mut self, src: NodeId, frame: Frame) -> Result<(), RunError> {
        match frame {
            Frame::NodeReport { json, .. } => {
                let m: NodeMetrics = serde_json::from_str(&json)
                    .map_err(|e| RunError::Protocol(format!("bad node report from {src}: {e}")))?;
                self.reports.push(m);
                Ok(())
            }
            frame => self.feed(Input::Frame { src, frame }),
        }
    }

    fn fire_timers(&mut self) -> Result<(), RunError> {
        let now = Instant::now();
        while let Some(Reverse((at, _, token))) = self.timers.peek().copied() {
            if at > now {
                break;
            }
            self.timers.pop();
            self.feed(Input::Timer { token })?;
        }
        Ok(())
    }

    fn main_loop(&mut self, done_rx: &Receiver<Done>, inbox: &Inbox) -> Result<(), RunError> {
        let stall =
            Duration::from_secs_f64((self.cfg.runtime.stall_limit_s * self.shared.scale).max(60.0));
        let mut last_progress = Instant::now();
        self.feed(Input::Start)?;
        while !self.finished {
            if self.shared.abort.load(Ordering::Relaxed) {
                return Err(RunError::Aborted);
            }
            let now = Instant::now();
            let wait = self
                .timers
                .peek()
                .map(|Reverse((at, _, _))| at.saturating_duration_since(now))
                .unwrap_or(POLL)
                .min(POLL);
            select! {
                recv(done_rx) -> d => {
                    let d = d.map_err(|_| RunError::Protocol("lane threads exited".into()))?;
                    last_progress = Instant::now();
                    self.on_done(d)?;
                }
                recv(inbox) -> m => {
                    let (src, frame) = m.map_err(|_| RunError::Protocol("inbox closed".into()))?;
                    last_progress = Instant::now();
                    self.on_frame(src, frame)?;
                }
                default(wait) => {}
            }
            self.fire_timers()?;
            if last_progress.elapsed() > stall {
                return Err(RunError::Deadlock(self.core.dump()));
            }
        }
        Ok(())
    }

    /// Non-zero nodes report to node 0 and stay reachable until node 0 has
    /// heard from everyone, so no peer ever sends to an exited process.
    fn shutdown(&mut self, inbox: &Inbox) -> Result<(), RunError> {
        let p = self.cfg.p();
        let id = self.core.id();
        let deadline = Instant::now() + SHUTDOWN_WAIT;
        if id != 0 {
            let json = serde_json::to_string(&self.node_metrics()).expect("metrics serialize");
            self.transport
                .send(0, &Frame::NodeReport { from: id, json })?;
            loop {
                match inbox.recv_deadline(deadline) {
                    Ok((0, Frame::Terminate { .. })) | Err(_) => return Ok(()),
                    Ok(_) => {}
                }
            }
        }
        while self.reports.len() + 1 < p {
            match inbox.recv_deadline(deadline) {
                Ok((src, Frame::NodeReport { json, .. })) => {
                    self.on_frame(src, Frame::NodeReport { from: src, json })?
                }
                Ok(_) => {}
                Err(_) => {
                    return Err(RunError::Protocol(format!(
                        "only {} of {} node reports arrived",
                        self.reports.len(),
                        p - 1
                    )))
                }
            }
        }
        for dst in 1..p {
            self.transport
                .send(dst as NodeId, &Frame::Terminate { from: 0 })?;
        }
        Ok(())
    }

    fn node_metrics(&self) -> NodeMetrics {
        let mut m = self.core.metrics();
        m.io_bytes = self.io_bytes;
        m.lane_busy_s = self.busy.clone();
        if self.core.check_tiers().is_err() {
            m.unquiescent_tiers += 1;
        }
        m
    }
}

fn run_node(
    cfg: &RunConfig,
    id: usize,
    transport: &dyn Transport,
    inbox: Inbox,
    shared: Arc<Shared>,
) -> Result<NodeRun, RunError> {
    let core = NodeCore::new(id as NodeId, cfg, shared.app.clone())?;
    let ctx = Arc::new(cost_context(cfg, shared.app.as_ref(), id));
    let (done_tx, done_rx) = unbounded();
    let mut lanes = Vec::new();
    let mut threads = Vec::new();
    let mut spawn = |lane: Lane, count: usize| {
        let (htx, hrx) = unbounded();
        let (ltx, lrx) = unbounded();
        for t in 0..count {
            let name = match lane {
                Lane::Cpu => format!("cpu{t}"),
                other => other.to_string(),
            };
            let (hrx, lrx, done, shared, ctx) = (
                hrx.clone(),
                lrx.clone(),
                done_tx.clone(),
                shared.clone(),
                ctx.clone(),
            );
            threads.push(
                thread::Builder::new()
                    .name(format!("n{id}-{name}"))
                    .spawn(move || lane_loop(name, hrx, lrx, done, shared, ctx))
                    .expect("spawn lane thread"),
            );
        }
        lanes.push(LaneHandle {
            lane,
            high: htx,
            low: ltx,
        });
    };
    spawn(Lane::Cpu, cfg.cpu_threads(id).max(1));
    spawn(Lane::Io, 1);
    for d in 0..cfg.nodes[id].devices.len() as u16 {
        spawn(Lane::Device(d), 1);
        spawn(Lane::Up(d), 1);
        spawn(Lane::Down(d), 1);
    }
    drop(done_tx);
    let mut disp = Dispatcher {
        cfg,
        core,
        shared: shared.clone(),
        transport,
        lanes,
        timers: BinaryHeap::new(),
        timer_seq: 0,
        ctx,
        io_bytes: 0,
        busy: BTreeMap::new(),
        trace: Vec::new(),
        reports: Vec::new(),
        finished: false,
    };
    let result = disp
        .main_loop(&done_rx, &inbox)
        .and_then(|_| disp.shutdown(&inbox));
    if result.is_err() {
        shared.abort.store(true, Ordering::Relaxed);
    }
    disp.lanes.clear();
    drop(done_rx);
    for t in threads {
        let _ = t.join();
    }
    result?;
    Ok(NodeRun {
        metrics: disp.node_metrics(),
        trace: std::mem::take(&mut disp.trace),
        reports: std::mem::take(&mut disp.reports),
    })
}

/// Runs every node of the cluster as a set of threads in this process.
pub fn run_real(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let (app, storage) = cfg.app.build(cfg.seed)?;
    let mut shared = Shared::new(cfg, app.clone(), storage);
    let messages = Arc::new(Mutex::new(HashMap::new()));
    shared.messages = Some(messages.clone());
    let shared = Arc::new(shared);
    let started = Instant::now();
    let endpoints = in_process(cfg.p());
    let results: Vec<Result<NodeRun, RunError>> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .enumerate()
            .map(|(id, (transport, inbox))| {
                let shared = shared.clone();
                thread::Builder::new()
                    .name(format!("node{id}"))
                    .spawn_scoped(s, move || run_node(cfg, id, &transport, inbox, shared))
                    .expect("spawn node thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("node thread panicked"))
            .collect()
    });
    let wall = started.elapsed().as_secs_f64();
    let mut runs = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(RunError::Aborted) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if runs.len() != cfg.p() {
        return Err(RunError::Aborted);
    }
    let mut trace: Vec<TraceEvent> = runs
        .iter_mut()
        .flat_map(|r| std::mem::take(&mut r.trace))
        .collect();
    trace.sort_by_key(|e| (e.start_ns, e.node));
    let max_messages = messages
        .lock()
        .unwrap()
        .values()
        .copied()
        .max()
        .unwrap_or(0);
    let metrics = assemble(
        cfg,
        &app,
        runs.into_iter().map(|r| r.metrics).collect(),
        wall,
        max_messages,
    );
    Ok(RunOutput { metrics, trace })
}

/// Runs one node of a multi-process cluster over TCP. `peers[r]` is the
/// listen address of rank `r`. Rank 0 returns the merged metrics; the other
/// ranks return their own trace only.
pub fn run_rank(
    cfg: &RunConfig,
    rank: usize,
    peers: &[String],
    connect_timeout: Duration,
) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    if peers.len() != cfg.p() {
        return Err(RunError::Protocol(format!(
            "{} peer addresses for a {}-node configuration",
            peers.len(),
            cfg.p()
        )));
    }
    let (app, storage) = cfg.app.build(cfg.seed)?;
    let shared = Arc::new(Shared::new(cfg, app.clone(), storage));
    let (transport, inbox) = TcpTransport::connect(rank, peers, connect_timeout)?;
    let started = Instant::now();
    let run = run_node(cfg, rank, &transport, inbox, shared)?;
    let wall = started.elapsed().as_secs_f64();
    let mut nodes = run.reports;
    nodes.push(run.metrics);
    let mut metrics = assemble(cfg, &app, nodes, wall, 0);
    if rank != 0 {
        metrics.p = cfg.p();
    }
    Ok(RunOutput {
        metrics,
        trace: run.trace,
    })
}
