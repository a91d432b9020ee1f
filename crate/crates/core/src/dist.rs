//! Third-level cache: point-of-contact lookup of items held in remote host
//! caches.
//!
//! Item `i` has a point of contact at node `i mod p`. That node does not store
//! the item; it remembers which nodes asked for it most recently and routes
//! new requests through them. A request costs at most `h + 2` messages:
//! `Request` to the owner, up to `h` probes along the candidate chain
//! (`Forward`), and one `Data` or `Failure` reply straight to the origin.

use std::collections::HashMap;

use crate::app::{ItemData, ItemKey};

pub type NodeId = u16;

/// Point of contact for `key` in a cluster of `p` nodes.
pub fn owner_of(key: ItemKey, p: usize) -> NodeId {
    assert!(p >= 1, "cluster has at least one node");
    (key.0 as usize % p) as NodeId
}

/// Retained candidates per key when none is configured.
pub fn default_h_max(h: usize) -> usize {
    h.max(4)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheMessage {
    Request {
        request_id: u64,
        key: ItemKey,
        origin: NodeId,
    },
    Forward {
        request_id: u64,
        key: ItemKey,
        origin: NodeId,
        remaining: Vec<NodeId>,
        /// 1-based position of the receiving candidate in the chain.
        hop: u8,
    },
    Data {
        request_id: u64,
        key: ItemKey,
        origin: NodeId,
        hop: u8,
        payload: ItemData,
    },
    Failure {
        request_id: u64,
        key: ItemKey,
        origin: NodeId,
    },
}

impl CacheMessage {
    pub fn request_id(&self) -> u64 {
        match self {
            CacheMessage::Request { request_id, .. }
            | CacheMessage::Forward { request_id, .. }
            | CacheMessage::Data { request_id, .. }
            | CacheMessage::Failure { request_id, .. } => *request_id,
        }
    }

    pub fn key(&self) -> ItemKey {
        match self {
            CacheMessage::Request { key, .. }
            | CacheMessage::Forward { key, .. }
            | CacheMessage::Data { key, .. }
            | CacheMessage::Failure { key, .. } => *key,
        }
    }

    pub fn origin(&self) -> NodeId {
        match self {
            CacheMessage::Request { origin, .. }
            | CacheMessage::Forward { origin, .. }
            | CacheMessage::Data { origin, .. }
            | CacheMessage::Failure { origin, .. } => *origin,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CacheMessage::Request { .. } => "request",
            CacheMessage::Forward { .. } => "forward",
            CacheMessage::Data { .. } => "data",
            CacheMessage::Failure { .. } => "failure",
        }
    }
}

/// Per-owner bookkeeping: most recent requesters of each owned key.
#[derive(Clone, Debug)]
pub struct CandidatesTable {
    node: NodeId,
    p: usize,
    h: usize,
    h_max: usize,
    lists: HashMap<ItemKey, Vec<NodeId>>,
}

impl CandidatesTable {
    pub fn new(node: NodeId, p: usize, h: usize) -> Self {
        Self::with_capacity(node, p, h, default_h_max(h))
    }

    pub fn with_capacity(node: NodeId, p: usize, h: usize, h_max: usize) -> Self {
        assert!(h_max >= h, "table must retain at least h candidates");
        CandidatesTable {
            node,
            p,
            h,
            h_max,
            lists: HashMap::new(),
        }
    }

    pub fn hops(&self) -> usize {
        self.h
    }

    pub fn candidates(&self, key: ItemKey) -> &[NodeId] {
        self.lists.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Seeds a list directly; used to set up protocol scenarios.
    pub fn set_candidates(&mut self, key: ItemKey, nodes: Vec<NodeId>) {
        let mut list = Vec::new();
        for n in nodes {
            if !list.contains(&n) {
                list.push(n);
            }
        }
        list.truncate(self.h_max);
        self.lists.insert(key, list);
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Handles a `Request` at the point of contact. Returns the destination
    /// and message to send next (a `Forward` to the first candidate or a
    /// `Failure` back to the origin). The origin is recorded either way.
    pub fn handle_request(
        &mut self,
        request_id: u64,
        key: ItemKey,
        origin: NodeId,
    ) -> (NodeId, CacheMessage) {
        debug_assert_eq!(
            owner_of(key, self.p),
            self.node,
            "request routed to wrong owner"
        );
        let list = self.lists.entry(key).or_default();
        let probe: Vec<NodeId> = list.iter().copied().take(self.h).collect();
        list.retain(|&n| n != origin);
        list.insert(0, origin);
        list.truncate(self.h_max);
        match probe.split_first() {
            Some((&first, rest)) => (
                first,
                CacheMessage::Forward {
                    request_id,
                    key,
                    origin,
                    remaining: rest.to_vec(),
                    hop: 1,
                },
            ),
            None => (
                origin,
                CacheMessage::Failure {
                    request_id,
                    key,
                    origin,
                },
            ),
        }
    }
}

/// Handles a `Forward` at a candidate, given what its host cache holds.
/// A slot that is still being written counts as a miss.
pub fn handle_probe(
    request_id: u64,
    key: ItemKey,
    origin: NodeId,
    remaining: &[NodeId],
    hop: u8,
    host_copy: Option<ItemData>,
) -> (NodeId, CacheMessage) {
    if let Some(payload) = host_copy {
        return (
            origin,
            CacheMessage::Data {
                request_id,
                key,
                origin,
                hop,
                payload,
            },
        );
    }
    match remaining.split_first() {
        Some((&next, rest)) => (
            next,
            CacheMessage::Forward {
                request_id,
                key,
                origin,
                remaining: rest.to_vec(),
                hop: hop.saturating_add(1),
            },
        ),
        None => (
            origin,
            CacheMessage::Failure {
                request_id,
                key,
                origin,
            },
        ),
    }
}

/// Outcome of one lookup as seen by the origin.
#[derive(Clone, Debug, PartialEq)]
pub enum FetchOutcome {
    Data { hop: u8, payload: ItemData },
    Failure,
}

/// Runs one lookup to completion over an instantaneous, lossless network.
/// `host` answers whether a node's host cache holds the key. Returns the
/// outcome and the number of messages exchanged between distinct nodes
/// plus self-addressed probes (a `Request` whose origin is the owner is a
/// local table operation and costs nothing).
pub fn run_fetch(
    tables: &mut [CandidatesTable],
    origin: NodeId,
    key: ItemKey,
    request_id: u64,
    mut host: impl FnMut(NodeId, ItemKey) -> Option<ItemData>,
) -> (FetchOutcome, usize) {
    let p = tables.len();
    let owner = owner_of(key, p);
    let mut messages = usize::from(owner != origin);
    let (mut dst, mut msg) = tables[owner as usize].handle_request(request_id, key, origin);
    loop {
        messages += 1;
        match msg {
            CacheMessage::Forward {
                request_id,
                key,
                origin,
                remaining,
                hop,
            } => {
                let copy = host(dst, key);
                (dst, msg) = handle_probe(request_id, key, origin, &remaining, hop, copy);
            }
            CacheMessage::Data { hop, payload, .. } => {
                debug_assert_eq!(dst, origin);
                return (FetchOutcome::Data { hop, payload }, messages);
            }
            CacheMessage::Failure { .. } => {
                debug_assert_eq!(dst, origin);
                return (FetchOutcome::Failure, messages);
            }
            CacheMessage::Request { .. } => unreachable!("requests are only sent by origins"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::Stage;

    const A: NodeId = 0;
    const B: NodeId = 1;
    const C: NodeId = 2;

    #[test]
    fn owner_is_key_mod_p() {
        assert_eq!(owner_of(ItemKey(7), 4), 3);
        assert_eq!(owner_of(ItemKey(8), 4), 0);
        assert_eq!(owner_of(ItemKey(5), 1), 0);
    }

    #[test]
    fn empty_list_fails_and_records_origin() {
        // Owner of key 3 in a 3-node cluster is node 0; request from node 2.
        let mut t = CandidatesTable::new(0, 3, 1);
        let (dst, msg) = t.handle_request(1, ItemKey(3), C);
        assert_eq!(dst, C);
        assert!(matches!(msg, CacheMessage::Failure { .. }));
        assert_eq!(t.candidates(ItemKey(3)), &[C]);
    }

    #[test]
    fn forwards_to_first_candidate_with_rest() {
        let mut t = CandidatesTable::with_capacity(0, 4, 2, 2);
        t.set_candidates(ItemKey(4), vec![B, C]);
        let (dst, msg) = t.handle_request(9, ItemKey(4), 3);
        assert_eq!(dst, B);
        match msg {
            CacheMessage::Forward { remaining, hop, .. } => {
                assert_eq!(remaining, vec![C]);
                assert_eq!(hop, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(t.candidates(ItemKey(4)), &[3, B]);
    }

    #[test]
    fn self_reference_is_legal() {
        let mut t = CandidatesTable::new(0, 2, 1);
        t.set_candidates(ItemKey(2), vec![B]);
        let (dst, _) = t.handle_request(1, ItemKey(2), B);
        assert_eq!(dst, B);
        assert_eq!(t.candidates(ItemKey(2)), &[B]);
    }

    #[test]
    fn probe_transitions() {
        let payload = ItemData::new(Stage::Preprocessed, vec![1u8, 2]);
        let (dst, msg) = handle_probe(1, ItemKey(0), A, &[], 1, Some(payload.clone()));
        assert_eq!(dst, A);
        assert!(matches!(msg, CacheMessage::Data { hop: 1, .. }));
        let (dst, msg) = handle_probe(1, ItemKey(0), A, &[3], 1, None);
        assert_eq!(dst, 3);
        assert!(
            matches!(msg, CacheMessage::Forward { ref remaining, hop: 2, .. } if remaining.is_empty())
        );
        let (dst, msg) = handle_probe(1, ItemKey(0), A, &[], 2, None);
        assert_eq!(dst, A);
        assert!(matches!(msg, CacheMessage::Failure { .. }));
    }

    #[test]
    fn trace_hit_at_first_hop_is_h_plus_two() {
        // p = 4, h = 1; node 2 requested key 7 earlier and still holds it.
        let mut tables: Vec<_> = (0..4).map(|n| CandidatesTable::new(n, 4, 1)).collect();
        tables[3].set_candidates(ItemKey(7), vec![2]);
        let item = ItemData::new(Stage::Preprocessed, vec![7u8; 3]);
        let (out, msgs) = run_fetch(&mut tables, 0, ItemKey(7), 1, |n, _| {
            (n == 2).then(|| item.clone())
        });
        assert_eq!(
            out,
            FetchOutcome::Data {
                hop: 1,
                payload: item
            }
        );
        assert_eq!(msgs, 3);
    }

    #[test]
    fn trace_empty_table_is_two_messages() {
        let mut tables: Vec<_> = (0..4).map(|n| CandidatesTable::new(n, 4, 1)).collect();
        let (out, msgs) = run_fetch(&mut tables, 0, ItemKey(7), 1, |_, _| None);
        assert_eq!(out, FetchOutcome::Failure);
        assert_eq!(msgs, 2);
    }

    #[test]
    fn trace_full_chain_miss_is_five_messages() {
        let mut tables: Vec<_> = (0..5).map(|n| CandidatesTable::new(n, 5, 3)).collect();
        tables[4].set_candidates(ItemKey(9), vec![1, 2, 3]);
        let (out, msgs) = run_fetch(&mut tables, 0, ItemKey(9), 1, |_, _| None);
        assert_eq!(out, FetchOutcome::Failure);
        assert_eq!(msgs, 5);
    }
}
