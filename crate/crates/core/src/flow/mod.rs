//! Per-connection grouping of captured packets and the statistical
//! signature extracted from each connection.

mod catalog;
mod extract;

use std::collections::BTreeMap;
use std::net::SocketAddrV4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::PacketRecord;

pub use catalog::{
    conn_index, dir_index, signature_feature_names, trace_feature_names, ConnFeature, DirFeature, Direction,
    TraceFeatureVector, CATALOG_VERSION, CONN_FEATURES, DIR_FEATURES, SIGNATURE_DIM, TRACE_DIM,
};
pub use extract::extract_trace_features;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("flow contains no packets")]
    EmptyFlow,
    #[error("catalog version mismatch: {left} vs {right}")]
    CatalogMismatch { left: u32, right: u32 },
    #[error("no connection present in both the client and the server trace")]
    NoFlowFound,
}

/// Capture point of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vantage {
    ClientSide,
    ServerSide,
}

/// Connection 4-tuple, oriented so `a` is the initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub a: SocketAddrV4,
    pub b: SocketAddrV4,
}

impl FlowKey {
    fn endpoints(p: &PacketRecord) -> (SocketAddrV4, SocketAddrV4) {
        (
            SocketAddrV4::new(p.src_ip, p.src_port),
            SocketAddrV4::new(p.dst_ip, p.dst_port),
        )
    }

    /// Orientation-free identity used for grouping.
    fn unordered(p: &PacketRecord) -> (SocketAddrV4, SocketAddrV4) {
        let (s, d) = Self::endpoints(p);
        if s <= d {
            (s, d)
        } else {
            (d, s)
        }
    }

    pub fn direction_of(&self, p: &PacketRecord) -> Option<Direction> {
        let (s, d) = Self::endpoints(p);
        if s == self.a && d == self.b {
            Some(Direction::A2b)
        } else if s == self.b && d == self.a {
            Some(Direction::B2a)
        } else {
            None
        }
    }
}

/// Both directions of one connection episode as seen at one vantage.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub key: FlowKey,
    pub vantage: Vantage,
    pub packets_a2b: Vec<PacketRecord>,
    pub packets_b2a: Vec<PacketRecord>,
    /// Capture order across both lists: the k-th packet of the connection
    /// is the next unread packet of the named direction.
    pub timeline: Vec<Direction>,
}

impl FlowTrace {
    pub fn new(key: FlowKey, vantage: Vantage) -> Self {
        Self {
            key,
            vantage,
            packets_a2b: Vec::new(),
            packets_b2a: Vec::new(),
            timeline: Vec::new(),
        }
    }

    pub fn push(&mut self, dir: Direction, p: PacketRecord) {
        match dir {
            Direction::A2b => self.packets_a2b.push(p),
            Direction::B2a => self.packets_b2a.push(p),
        }
        self.timeline.push(dir);
    }

    pub fn packets(&self, dir: Direction) -> &[PacketRecord] {
        match dir {
            Direction::A2b => &self.packets_a2b,
            Direction::B2a => &self.packets_b2a,
        }
    }

    pub fn len(&self) -> usize {
        self.timeline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timeline.is_empty()
    }

    /// Packets of both directions in capture order.
    pub fn iter_ordered(&self) -> impl Iterator<Item = (Direction, &PacketRecord)> {
        let mut next = [0usize; 2];
        self.timeline.iter().map(move |&dir| {
            let slot = &mut next[dir as usize];
            let p = &self.packets(dir)[*slot];
            *slot += 1;
            (dir, p)
        })
    }
}

fn seq_in(seq: u32, lo: u32, hi: u32) -> bool {
    seq.wrapping_sub(lo) <= hi.wrapping_sub(lo)
}

struct Episode {
    flow: usize,
    /// First and one-past-last sequence numbers seen from each endpoint,
    /// indexed by [`Direction`].
    span: [Option<(u32, u32)>; 2],
}

/// Groups packets into connection episodes, in order of first appearance.
///
/// A SYN whose sequence number falls outside everything the same endpoint
/// sent in the current episode starts a new episode on the same 4-tuple.
pub fn assemble_flows(packets: &[PacketRecord], vantage: Vantage) -> Vec<FlowTrace> {
    let mut flows: Vec<FlowTrace> = Vec::new();
    let mut open: BTreeMap<(SocketAddrV4, SocketAddrV4), Episode> = BTreeMap::new();

    for p in packets {
        let id = FlowKey::unordered(p);
        let is_new_syn = p.flags.syn() && !p.flags.ack();
        let reuse = match open.get(&id) {
            None => false,
            Some(ep) if is_new_syn => {
                let dir = flows[ep.flow].key.direction_of(p).expect("grouped by tuple");
                match ep.span[dir as usize] {
                    Some((lo, hi)) => seq_in(p.seq, lo, hi),
                    None => flows[ep.flow].packets(dir).is_empty(),
                }
            }
            Some(_) => true,
        };
        if !reuse {
            let (s, d) = FlowKey::endpoints(p);
            // the receiver of a SYN-ACK is the initiator; otherwise the sender
            let key = if p.flags.syn() && p.flags.ack() {
                FlowKey { a: d, b: s }
            } else {
                FlowKey { a: s, b: d }
            };
            flows.push(FlowTrace::new(key, vantage));
            open.insert(
                id,
                Episode {
                    flow: flows.len() - 1,
                    span: [None, None],
                },
            );
        }
        let ep = open.get_mut(&id).expect("inserted above");
        let flow = &mut flows[ep.flow];
        let dir = flow.key.direction_of(p).expect("grouped by tuple");
        let end = p.seq.wrapping_add(p.seq_len());
        let span = &mut ep.span[dir as usize];
        *span = Some(match *span {
            None => (p.seq, end),
            Some((lo, hi)) => {
                let lo = if (p.seq.wrapping_sub(lo) as i32) < 0 { p.seq } else { lo };
                let hi = if (end.wrapping_sub(hi) as i32) > 0 { end } else { hi };
                (lo, hi)
            }
        });
        flow.push(dir, p.clone());
    }
    flows
}

/// Client-vantage vector followed by server-vantage vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureVector {
    pub catalog_version: u32,
    pub x: Vec<f64>,
}

impl SignatureVector {
    pub fn names() -> Vec<String> {
        signature_feature_names()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        signature_feature_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.x[i])
    }
}

pub fn build_signature(
    client: &TraceFeatureVector,
    server: &TraceFeatureVector,
) -> Result<SignatureVector, FeatureError> {
    if client.catalog_version != server.catalog_version {
        return Err(FeatureError::CatalogMismatch {
            left: client.catalog_version,
            right: server.catalog_version,
        });
    }
    let mut x = Vec::with_capacity(client.values.len() + server.values.len());
    x.extend_from_slice(&client.values);
    x.extend_from_slice(&server.values);
    Ok(SignatureVector {
        catalog_version: client.catalog_version,
        x,
    })
}

/// Extracts the signature of the largest connection present in both traces.
pub fn signature_from_traces(
    client: &[PacketRecord],
    server: &[PacketRecord],
) -> Result<SignatureVector, FeatureError> {
    let cl = assemble_flows(client, Vantage::ClientSide);
    let sv = assemble_flows(server, Vantage::ServerSide);
    let mut best: Option<(&FlowTrace, &FlowTrace)> = None;
    for c in &cl {
        let Some(s) = sv.iter().filter(|s| s.key == c.key).max_by_key(|s| s.len()) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((bc, bs)) => c.len() + s.len() > bc.len() + bs.len(),
        };
        if better {
            best = Some((c, s));
        }
    }
    let (c, s) = best.ok_or(FeatureError::NoFlowFound)?;
    build_signature(&extract_trace_features(c)?, &extract_trace_features(s)?)
}
