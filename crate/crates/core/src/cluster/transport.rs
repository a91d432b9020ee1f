//! Reliable, per-pair FIFO transports. Frames arrive decoded on the node's
//! inbox channel as `(source, frame)`.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use super::wire::{decode, encode, read_frame, Frame};
use crate::dist::NodeId;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot connect to node {node} at {addr}: {reason}")]
    ConnectFailure {
        node: NodeId,
        addr: String,
        reason: String,
    },
    #[error("channel to node {0} is broken")]
    Broken(NodeId),
    #[error("handshake failed: {0}")]
    Handshake(String),
}

pub type Inbox = Receiver<(NodeId, Frame)>;

pub trait Transport: Send + Sync {
    fn node(&self) -> NodeId;
    fn peers(&self) -> usize;
    fn send(&self, dst: NodeId, frame: &Frame) -> Result<(), TransportError>;
    /// Number of bidirectional node-to-node channels.
    fn channels(&self) -> usize;
}

/// Transport between nodes living in one process. Every frame is encoded
/// and decoded, so the in-process path exercises the wire format too.
pub struct InProcTransport {
    node: NodeId,
    outboxes: Vec<Sender<(NodeId, Frame)>>,
}

/// Builds connected endpoints for `p` in-process nodes.
pub fn in_process(p: usize) -> Vec<(InProcTransport, Inbox)> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..p).map(|_| unbounded()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(i, rx)| {
            (
                InProcTransport {
                    node: i as NodeId,
                    outboxes: txs.clone(),
                },
                rx,
            )
        })
        .collect()
}

impl Transport for InProcTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn peers(&self) -> usize {
        self.outboxes.len()
    }

    fn send(&self, dst: NodeId, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode(frame);
        let frame = decode(&bytes).expect("encoded frame decodes");
        self.outboxes
            .get(dst as usize)
            .ok_or(TransportError::Broken(dst))?
            .send((self.node, frame))
            .map_err(|_| TransportError::Broken(dst))
    }

    fn channels(&self) -> usize {
        let p = self.outboxes.len();
        p * (p - 1) / 2
    }
}

/// One OS process per node, a TCP connection per node pair.
pub struct TcpTransport {
    node: NodeId,
    p: usize,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    local: Sender<(NodeId, Frame)>,
}

impl TcpTransport {
    /// Listens on `peers[rank]`, connects to lower ranks and accepts higher
    /// ranks. Gives up with `ConnectFailure` after `timeout`.
    pub fn connect(
        rank: usize,
        peers: &[String],
        timeout: Duration,
    ) -> Result<(Self, Inbox), TransportError> {
        let p = peers.len();
        assert!(rank < p, "rank out of range");
        let node = rank as NodeId;
        let addrs: Vec<SocketAddr> = peers
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.parse().map_err(
                    |e: std::net::AddrParseError| TransportError::ConnectFailure {
                        node: i as NodeId,
                        addr: a.clone(),
                        reason: e.to_string(),
                    },
                )
            })
            .collect::<Result<_, _>>()?;
        let listener =
            TcpListener::bind(addrs[rank]).map_err(|e| TransportError::ConnectFailure {
                node,
                addr: peers[rank].clone(),
                reason: e.to_string(),
            })?;
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..p).map(|_| None).collect();
        for (j, addr) in addrs.iter().enumerate().take(rank) {
            let mut s = loop {
                match TcpStream::connect_timeout(addr, Duration::from_millis(200)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(TransportError::ConnectFailure {
                            node: j as NodeId,
                            addr: peers[j].clone(),
                            reason: e.to_string(),
                        })
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(20)),
                }
            };
            s.write_all(&encode(&Frame::Hello {
                from: node,
                p: p as u16,
            }))
            .map_err(|e| TransportError::Handshake(e.to_string()))?;
            streams[j] = Some(s);
        }
        listener
            .set_nonblocking(true)
            .map_err(|e| TransportError::Handshake(e.to_string()))?;
        let mut pending = p - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)
                        .map_err(|e| TransportError::Handshake(e.to_string()))?;
                    s.set_read_timeout(Some(timeout))
                        .map_err(|e| TransportError::Handshake(e.to_string()))?;
                    let mut r = &s;
                    match read_frame(&mut r) {
                        Ok(Some(Frame::Hello { from, p: their_p }))
                            if (from as usize) > rank
                                && (from as usize) < p
                                && their_p as usize == p =>
                        {
                            if streams[from as usize].is_some() {
                                return Err(TransportError::Handshake(format!(
                                    "duplicate hello from {from}"
                                )));
                            }
                            s.set_read_timeout(None)
                                .map_err(|e| TransportError::Handshake(e.to_string()))?;
                            streams[from as usize] = Some(s);
                            pending -= 1;
                        }
                        other => {
                            return Err(TransportError::Handshake(format!(
                                "unexpected greeting {other:?}"
                            )))
                        }
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing = (rank + 1..p)
                            .find(|&j| streams[j].is_none())
                            .unwrap_or(rank);
                        return Err(TransportError::ConnectFailure {
                            node: missing as NodeId,
                            addr: peers[missing].clone(),
                            reason: "peer never connected".into(),
                        });
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(TransportError::Handshake(e.to_string())),
            }
        }
        let (tx, rx) = unbounded();
        let mut writers = Vec::with_capacity(p);
        for (j, s) in streams.into_iter().enumerate() {
            match s {
                None => writers.push(None),
                Some(s) => {
                    let _ = s.set_nodelay(true);
                    let read_half = s
                        .try_clone()
                        .map_err(|e| TransportError::Handshake(e.to_string()))?;
                    let tx = tx.clone();
                    std::thread::Builder::new()
                        .name(format!("recv-{rank}-{j}"))
                        .spawn(move || {
                            let mut r = BufReader::new(read_half);
                            while let Ok(Some(frame)) = read_frame(&mut r) {
                                if tx.send((j as NodeId, frame)).is_err() {
                                    break;
                                }
                            }
                        })
                        .expect("spawn receiver");
                    writers.push(Some(Mutex::new(BufWriter::new(s))));
                }
            }
        }
        Ok((
            TcpTransport {
                node,
                p,
                writers,
                local: tx,
            },
            rx,
        ))
    }
}

impl Transport for TcpTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn peers(&self) -> usize {
        self.p
    }

    fn send(&self, dst: NodeId, frame: &Frame) -> Result<(), TransportError> {
        if dst == self.node {
            return self
                .local
                .send((self.node, frame.clone()))
                .map_err(|_| TransportError::Broken(dst));
        }
        let w = self
            .writers
            .get(dst as usize)
            .and_then(Option::as_ref)
            .ok_or(TransportError::Broken(dst))?;
        let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(&encode(frame))
            .and_then(|_| w.flush())
            .map_err(|_| TransportError::Broken(dst))
    }

    fn channels(&self) -> usize {
        self.writers.iter().filter(|w| w.is_some()).count()
    }
}
