//! Discrete-event driver: one thread, virtual time, lanes modelled as
//! servers, a shared processor-sharing storage server and a simulated
//! interconnect.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use super::node::{Action, Input, NodeCore};
use super::stage::{CostContext, Lane, StageOutput, StageTask, Work};
use super::{assemble, cost_context, RunError, RunOutput, TraceEvent};
use crate::app::Application;
use crate::cluster::{wire, Frame, RunConfig, SimNetwork, SimStorage, Storage};
use crate::dist::NodeId;
use crate::util::secs_to_ns;

#[derive(Debug)]
enum EventKind {
    LaneDone {
        node: usize,
        lane: usize,
        server: usize,
    },
    IoCheck {
        version: u64,
    },
    IoDone {
        node: usize,
        server: usize,
    },
    Deliver {
        src: NodeId,
        dst: NodeId,
        frame: Frame,
    },
    Timer {
        node: usize,
        token: u64,
    },
}

#[derive(Debug)]
struct Event {
    t: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.seq.cmp(&self.seq))
    }
}

struct Running {
    task: u64,
    start: f64,
    label: &'static str,
    keys: (u32, Option<u32>),
    output: StageOutput,
}

struct LaneState {
    name: Lane,
    servers: Vec<Option<Running>>,
    high: VecDeque<StageTask>,
    low: VecDeque<StageTask>,
    busy_s: f64,
}

struct NodeState {
    core: NodeCore,
    lanes: Vec<LaneState>,
    ctx: CostContext,
    io_bytes: u64,
    finished: bool,
}

fn lane_index(lane: Lane) -> usize {
    match lane {
        Lane::Cpu => 0,
        Lane::Io => 1,
        Lane::Device(d) => 2 + 3 * d as usize,
        Lane::Up(d) => 3 + 3 * d as usize,
        Lane::Down(d) => 4 + 3 * d as usize,
    }
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    app: Arc<dyn Application>,
    storage: Arc<dyn Storage>,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    nodes: Vec<NodeState>,
    net: SimNetwork,
    io: SimStorage,
    io_version: u64,
    io_reads: HashMap<u64, (usize, usize)>,
    next_io: u64,
    request_messages: HashMap<u64, u64>,
    trace: Vec<TraceEvent>,
    last_progress: f64,
    unfinished: usize,
}

impl Sim<'_> {
    fn push(&mut self, t: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            t,
            seq: self.seq,
            kind,
        });
    }

    fn feed(&mut self, node: usize, input: Input) -> Result<(), RunError> {
        if self.nodes[node].finished {
            return Ok(());
        }
        let actions = self.nodes[node].core.handle(self.now, input)?;
        let mut touched = Vec::new();
        for a in actions {
            match a {
                Action::Stage(task) => {
                    let li = lane_index(task.lane);
                    let lane = &mut self.nodes[node].lanes[li];
                    if task.high_priority {
                        lane.high.push_back(task);
                    } else {
                        lane.low.push_back(task);
                    }
                    if !touched.contains(&li) {
                        touched.push(li);
                    }
                }
                Action::Send { dst, frame } => {
                    let src = node as NodeId;
                    if let Frame::Cache(m) = &frame {
                        if src != dst {
                            *self.request_messages.entry(m.request_id()).or_default() += 1;
                        }
                    }
                    let bytes = match &frame {
                        Frame::Cache(crate::dist::CacheMessage::Data { payload, .. }) => {
                            wire::HEADER_LEN as u64 + 9 + self.nodes[node].ctx.item_bytes(payload)
                        }
                        f => wire::encode(f).len() as u64,
                    };
                    let at = self.net.send(src, dst, bytes, self.now);
                    self.push(at, EventKind::Deliver { src, dst, frame });
                }
                Action::Timer { token, after_s, .. } => {
                    self.push(self.now + after_s, EventKind::Timer { node, token });
                }
                Action::Finished => {
                    self.nodes[node].finished = true;
                    self.unfinished -= 1;
                }
            }
        }
        for li in touched {
            self.try_start(node, li)?;
        }
        Ok(())
    }

    fn try_start(&mut self, node: usize, li: usize) -> Result<(), RunError> {
        loop {
            let lane = &mut self.nodes[node].lanes[li];
            let Some(server) = lane.servers.iter().position(Option::is_none) else {
                return Ok(());
            };
            let Some(task) = lane.high.pop_front().or_else(|| lane.low.pop_front()) else {
                return Ok(());
            };
            let output = task
                .work
                .execute(self.app.as_ref(), self.storage.as_ref())?;
            let (i, j) = task.work.keys();
            let running = Running {
                task: task.id,
                start: self.now,
                label: task.work.label(),
                keys: (i.0, j.map(|k| k.0)),
                output,
            };
            if let Work::Load { .. } = task.work {
                let StageOutput::Item(raw) = &running.output else {
                    unreachable!("loads produce items")
                };
                let bytes = self.nodes[node].ctx.raw_bytes(raw.byte_length());
                self.nodes[node].io_bytes += bytes;
                self.next_io += 1;
                let id = self.next_io;
                self.io.start(id, bytes, self.now);
                self.io_reads.insert(id, (node, server));
                self.schedule_io();
            } else {
                let dur = self.nodes[node].ctx.duration(&task.work);
                self.push(
                    self.now + dur,
                    EventKind::LaneDone {
                        node,
                        lane: li,
                        server,
                    },
                );
            }
            self.nodes[node].lanes[li].servers[server] = Some(running);
        }
    }

    fn schedule_io(&mut self) {
        self.io_version += 1;
        if let Some((t, _)) = self.io.next_completion() {
            self.push(
                t.max(self.now),
                EventKind::IoCheck {
                    version: self.io_version,
                },
            );
        }
    }

    fn lane_done(&mut self, node: usize, li: usize, server: usize) -> Result<(), RunError> {
        self.last_progress = self.now;
        let lane = &mut self.nodes[node].lanes[li];
        let r = lane.servers[server].take().expect("server was busy");
        lane.busy_s += self.now - r.start;
        if self.cfg.runtime.profile {
            let lane_name = match lane.name {
                Lane::Cpu => format!("cpu{server}"),
                other => other.to_string(),
            };
            self.trace.push(TraceEvent {
                node: node as u16,
                lane: lane_name,
                label: r.label.to_owned(),
                start_ns: secs_to_ns(r.start),
                end_ns: secs_to_ns(self.now),
                i: r.keys.0,
                j: r.keys.1,
            });
        }
        self.feed(
            node,
            Input::StageDone {
                task: r.task,
                output: r.output,
            },
        )?;
        self.try_start(node, li)
    }

    fn deadlock(&self, why: &str) -> RunError {
        let mut s = format!("{why} at t = {:.6} s\n", self.now);
        for n in &self.nodes {
            s.push_str(&n.core.dump());
        }
        RunError::Deadlock(s)
    }

    fn run(&mut self) -> Result<(), RunError> {
        for node in 0..self.nodes.len() {
            self.feed(node, Input::Start)?;
        }
        while self.unfinished > 0 {
            let Some(ev) = self.heap.pop() else {
                return Err(self.deadlock("no pending events with an incomplete ledger"));
            };
            self.now = ev.t;
            if self.now - self.last_progress > self.cfg.runtime.stall_limit_s {
                return Err(self.deadlock("no stage completed within the stall limit"));
            }
            match ev.kind {
                EventKind::LaneDone { node, lane, server } => self.lane_done(node, lane, server)?,
                EventKind::IoCheck { version } => {
                    if version == self.io_version {
                        if let Some((t, id)) = self.io.next_completion() {
                            let t = t.max(self.now);
                            self.io.finish(id, t);
                            let (node, server) = self.io_reads.remove(&id).expect("read in flight");
                            self.push(
                                t + self.cfg.storage.latency_s,
                                EventKind::IoDone { node, server },
                            );
                            self.schedule_io();
                        }
                    }
                }
                EventKind::IoDone { node, server } => {
                    self.lane_done(node, lane_index(Lane::Io), server)?
                }
                EventKind::Deliver { src, dst, frame } => {
                    self.feed(dst as usize, Input::Frame { src, frame })?
                }
                EventKind::Timer { node, token } => self.feed(node, Input::Timer { token })?,
            }
        }
        Ok(())
    }
}

pub fn run_sim(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    let started = std::time::Instant::now();
    let (app, storage) = cfg.app.build(cfg.seed)?;
    let p = cfg.p();
    let mut nodes = Vec::with_capacity(p);
    for id in 0..p {
        let core = NodeCore::new(id as NodeId, cfg, app.clone())?;
        let devices = cfg.nodes[id].devices.len();
        let mut lanes = Vec::with_capacity(2 + 3 * devices);
        lanes.push(LaneState::new(Lane::Cpu, cfg.cpu_threads(id)));
        lanes.push(LaneState::new(Lane::Io, 1));
        for d in 0..devices as u16 {
            lanes.push(LaneState::new(Lane::Device(d), 1));
            lanes.push(LaneState::new(Lane::Up(d), 1));
            lanes.push(LaneState::new(Lane::Down(d), 1));
        }
        nodes.push(NodeState {
            core,
            lanes,
            ctx: cost_context(cfg, app.as_ref(), id),
            io_bytes: 0,
            finished: false,
        });
    }
    let mut sim = Sim {
        cfg,
        app: app.clone(),
        storage,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        nodes,
        net: SimNetwork::new(cfg.network.latency_s, cfg.network.bandwidth_bps),
        io: SimStorage::new(cfg.storage.bandwidth_bps),
        io_version: 0,
        io_reads: HashMap::new(),
        next_io: 0,
        request_messages: HashMap::new(),
        trace: Vec::new(),
        last_progress: 0.0,
        unfinished: p,
    };
    sim.run()?;
    let max_messages = sim.request_messages.values().copied().max().unwrap_or(0);
    let per_node = sim.nodes.iter().map(|n| n.metrics()).collect();
    let metrics = assemble(
        cfg,
        &app,
        per_node,
        started.elapsed().as_secs_f64(),
        max_messages,
    );
    let mut trace = std::mem::take(&mut sim.trace);
    trace.sort_by_key(|e| (e.start_ns, e.node));
    Ok(RunOutput { metrics, trace })
}

impl LaneState {
    fn new(name: Lane, servers: usize) -> Self {
        LaneState {
            name,
            servers: (0..servers.max(1)).map(|_| None).collect(),
            high: VecDeque::new(),
            low: VecDeque::new(),
            busy_s: 0.0,
        }
    }
}

impl NodeState {
    fn metrics(&self) -> super::NodeMetrics {
        let mut m = self.core.metrics();
        m.io_bytes = self.io_bytes;
        for lane in &self.lanes {
            *m.lane_busy_s.entry(lane.name.to_string()).or_default() += lane.busy_s;
        }
        if self.core.check_tiers().is_err() {
            m.unquiescent_tiers += 1;
        }
        m
    }
}
