use std::collections::BTreeMap;

use super::catalog::{ConnFeature, DirFeature, Direction, TraceFeatureVector};
use super::{FeatureError, FlowTrace};
use crate::pcap::{PacketRecord, SackBlock};

/// Byte ranges already observed, kept merged.
#[derive(Debug, Default)]
struct RangeSet {
    ranges: BTreeMap<i64, i64>,
}

impl RangeSet {
    fn overlaps(&self, start: i64, end: i64) -> bool {
        self.ranges.range(..end).next_back().is_some_and(|(_, &e)| e > start)
    }

    fn insert(&mut self, mut start: i64, mut end: i64) {
        let touching: Vec<i64> = self
            .ranges
            .range(..=end)
            .rev()
            .take_while(|(_, &e)| e >= start)
            .map(|(&s, _)| s)
            .collect();
        for s in touching {
            let e = self.ranges.remove(&s).expect("present");
            start = start.min(s);
            end = end.max(e);
        }
        self.ranges.insert(start, end);
    }

    fn covered(&self) -> i64 {
        self.ranges.iter().map(|(s, e)| e - s).sum()
    }
}

fn seq_le(a: u32, b: u32) -> bool {
    (b.wrapping_sub(a) as i32) >= 0
}

fn block_within(inner: &SackBlock, outer: &SackBlock) -> bool {
    seq_le(outer.left, inner.left) && seq_le(inner.right, outer.right)
}

/// D-SACK blocks in one ACK: blocks at or below the cumulative ACK, plus a
/// first block that lies inside the second.
fn dsack_blocks(p: &PacketRecord) -> usize {
    let blocks = &p.options.sack_blocks;
    if !p.flags.ack() || blocks.is_empty() {
        return 0;
    }
    let below = blocks.iter().filter(|b| seq_le(b.right, p.ack)).count();
    let first_in_second = blocks.len() >= 2 && !seq_le(blocks[0].right, p.ack) && block_within(&blocks[0], &blocks[1]);
    below + first_in_second as usize
}

struct Segment {
    end: i64,
    sent_us: u64,
    ambiguous: bool,
}

/// Running state for one direction while walking the capture timeline.
#[derive(Default)]
struct DirState {
    base: Option<u32>,
    syn_seen: bool,
    window_shift: u32,

    total: u64,
    acks: u64,
    pure_acks: u64,
    data_pkts: u64,
    data_bytes: u64,
    rexmt_pkts: u64,
    rexmt_bytes: u64,
    ooo_pkts: u64,
    pushed: u64,
    syns: u64,
    fins: u64,
    resets: u64,
    zwp_pkts: u64,
    zwp_bytes: u64,
    sack_blocks: u64,
    max_sack_blocks: u64,
    dsack_blocks: u64,
    segm_min: Option<u32>,
    segm_max: u32,
    win_min: Option<u64>,
    win_max: u64,
    win_sum: f64,
    win_count: u64,
    zero_win: u64,
    dupacks: u64,
    triple_dupacks: u64,
    dup_run: u32,
    last_ack: Option<(u32, u16, Vec<SackBlock>)>,
    max_idle_us: u64,
    last_ts: Option<u64>,
    first_data_us: Option<u64>,
    last_data_us: Option<u64>,

    seen: RangeSet,
    max_end: Option<i64>,
    min_start: Option<i64>,
    transmissions: BTreeMap<i64, u32>,
    segments: BTreeMap<i64, Segment>,
    highest_acked: Option<i64>,
    first_data_acked: bool,
    init_bytes: u64,
    init_pkts: u64,
    rtt_ms: Vec<f64>,

    /// Last window this side advertised, scaled to bytes.
    last_adv_window: Option<u64>,
}

impl DirState {
    fn rel(&self, seq: u32) -> i64 {
        seq.wrapping_sub(self.base.unwrap_or(seq)) as i32 as i64
    }

    fn scaled_window(&self, p: &PacketRecord) -> u64 {
        if p.flags.syn() {
            p.window as u64
        } else {
            (p.window as u64) << self.window_shift
        }
    }
}

/// Computes every catalog feature for one vantage trace of one connection.
pub fn extract_trace_features(flow: &FlowTrace) -> Result<TraceFeatureVector, FeatureError> {
    if flow.is_empty() {
        return Err(FeatureError::EmptyFlow);
    }
    let mut st: [DirState; 2] = Default::default();

    // handshake options and sequence bases
    let syn_of = |dir: Direction| flow.packets(dir).iter().find(|p| p.flags.syn());
    let syns = [syn_of(Direction::A2b), syn_of(Direction::B2a)];
    let both_scale = syns.iter().all(|s| s.is_some_and(|p| p.options.window_scale.is_some()));
    for dir in [Direction::A2b, Direction::B2a] {
        let s = &mut st[dir as usize];
        if let Some(syn) = syns[dir as usize] {
            s.syn_seen = true;
            s.base = Some(syn.seq.wrapping_add(1));
            if both_scale {
                s.window_shift = syn.options.window_scale.unwrap_or(0).min(14) as u32;
            }
        } else if let Some(first) = flow.packets(dir).first() {
            s.base = Some(first.seq);
        }
    }

    for (dir, p) in flow.iter_ordered() {
        let t = p.ts.as_micros();
        let (me, peer) = split(&mut st, dir);
        observe_packet(me, peer, p, t);
    }

    let mut v = TraceFeatureVector::zeros();
    for dir in [Direction::A2b, Direction::B2a] {
        let s = &st[dir as usize];
        let syn = syns[dir as usize];
        write_direction(&mut v, dir, s, syn);
    }

    let first = flow.iter_ordered().map(|(_, p)| p.ts.as_micros()).min().unwrap_or(0);
    let last = flow.iter_ordered().map(|(_, p)| p.ts.as_micros()).max().unwrap_or(0);
    v.set_conn(ConnFeature::DurationS, (last - first) as f64 * 1e-6);
    v.set_conn(ConnFeature::TotalPktsBoth, flow.len() as f64);
    v.set_conn(ConnFeature::HandshakeComplete, handshake_complete(flow) as u8 as f64);
    let clean = st.iter().all(|s| s.fins > 0) && st.iter().all(|s| s.resets == 0);
    v.set_conn(ConnFeature::CleanClose, clean as u8 as f64);
    Ok(v)
}

fn split(st: &mut [DirState; 2], dir: Direction) -> (&mut DirState, &mut DirState) {
    let (a, b) = st.split_at_mut(1);
    match dir {
        Direction::A2b => (&mut a[0], &mut b[0]),
        Direction::B2a => (&mut b[0], &mut a[0]),
    }
}

fn observe_packet(me: &mut DirState, peer: &mut DirState, p: &PacketRecord, t: u64) {
    me.total += 1;
    if let Some(prev) = me.last_ts {
        me.max_idle_us = me.max_idle_us.max(t.saturating_sub(prev));
    }
    me.last_ts = Some(t);

    let flags = p.flags;
    if flags.syn() {
        me.syns += 1;
    }
    if flags.fin() {
        me.fins += 1;
    }
    if flags.rst() {
        me.resets += 1;
    } else {
        let w = me.scaled_window(p);
        me.win_max = me.win_max.max(w);
        me.win_min = Some(me.win_min.map_or(w, |m| m.min(w)));
        me.win_sum += w as f64;
        me.win_count += 1;
        if w == 0 && !flags.syn() {
            me.zero_win += 1;
        }
        me.last_adv_window = Some(w);
    }

    let nblocks = p.options.sack_blocks.len() as u64;
    me.sack_blocks += nblocks;
    me.max_sack_blocks = me.max_sack_blocks.max(nblocks);
    me.dsack_blocks += dsack_blocks(p) as u64;

    if flags.ack() {
        me.acks += 1;
        let pure = p.payload_len == 0 && !flags.syn() && !flags.fin() && !flags.rst();
        if pure {
            me.pure_acks += 1;
        }
        let current = (p.ack, p.window, p.options.sack_blocks.clone());
        let repeat = me.last_ack.as_ref() == Some(&current);
        if pure && repeat {
            me.dupacks += 1;
            me.dup_run += 1;
            if me.dup_run == 3 {
                me.triple_dupacks += 1;
            }
        } else {
            me.dup_run = 0;
        }
        me.last_ack = Some(current);
        on_ack(peer, p.ack, t);
    }

    if p.payload_len > 0 {
        on_data(me, peer, p, t);
    }
}

fn on_data(me: &mut DirState, peer: &DirState, p: &PacketRecord, t: u64) {
    let len = p.payload_len;
    let start = me.rel(p.seq) + p.flags.syn() as i64;
    let end = start + len as i64;

    me.data_pkts += 1;
    me.data_bytes += len as u64;
    if p.flags.psh() {
        me.pushed += 1;
    }
    me.segm_max = me.segm_max.max(len);
    me.segm_min = Some(me.segm_min.map_or(len, |m| m.min(len)));
    me.first_data_us.get_or_insert(t);
    me.last_data_us = Some(t);

    if len <= 1 && peer.last_adv_window == Some(0) {
        me.zwp_pkts += 1;
        me.zwp_bytes += len as u64;
    }

    let rexmt = me.seen.overlaps(start, end);
    if rexmt {
        me.rexmt_pkts += 1;
        me.rexmt_bytes += len as u64;
        for (_, seg) in me.segments.range_mut(..end) {
            if seg.end > start {
                seg.ambiguous = true;
            }
        }
    } else {
        if me.max_end.is_some_and(|m| start < m) {
            me.ooo_pkts += 1;
        }
        if me.syn_seen && !me.first_data_acked {
            me.init_bytes += len as u64;
            me.init_pkts += 1;
        }
    }
    *me.transmissions.entry(start).or_insert(0) += 1;
    me.segments.entry(start).or_insert(Segment {
        end,
        sent_us: t,
        ambiguous: rexmt,
    });
    me.seen.insert(start, end);
    me.max_end = Some(me.max_end.map_or(end, |m| m.max(end)));
    me.min_start = Some(me.min_start.map_or(start, |m| m.min(start)));
}

/// An acknowledgement from the other side covering this side's data.
fn on_ack(sender: &mut DirState, ack: u32, t: u64) {
    let Some(min_start) = sender.min_start else {
        return;
    };
    let acked = sender.rel(ack);
    if acked <= min_start {
        return;
    }
    sender.first_data_acked = true;
    if sender.highest_acked.is_some_and(|h| acked <= h) {
        return;
    }
    let floor = sender.highest_acked.unwrap_or(i64::MIN);
    sender.highest_acked = Some(acked);

    // the newest segment this ACK completes, preferring an exact edge match
    let candidate = sender
        .segments
        .range(..acked)
        .rev()
        .filter(|(_, seg)| seg.end <= acked && seg.end > floor)
        .max_by_key(|(_, seg)| (seg.end == acked, seg.end))
        .map(|(_, seg)| (seg.ambiguous, seg.sent_us));
    if let Some((false, sent)) = candidate {
        if t >= sent {
            sender.rtt_ms.push((t - sent) as f64 / 1000.0);
        }
    }
}

fn handshake_complete(flow: &FlowTrace) -> bool {
    let syn = flow.packets_a2b.iter().any(|p| p.flags.syn() && !p.flags.ack());
    let Some(synack) = flow.packets_b2a.iter().find(|p| p.flags.syn() && p.flags.ack()) else {
        return false;
    };
    let want = synack.seq.wrapping_add(1);
    syn && flow
        .packets_a2b
        .iter()
        .any(|p| !p.flags.syn() && p.flags.ack() && p.ack == want)
}

fn write_direction(v: &mut TraceFeatureVector, dir: Direction, s: &DirState, syn: Option<&PacketRecord>) {
    use DirFeature as F;
    let mut set = |f: F, x: f64| v.set_dir(dir, f, x);

    set(F::TotalPkts, s.total as f64);
    set(F::AckPkts, s.acks as f64);
    set(F::PureAcks, s.pure_acks as f64);
    let unique = s.seen.covered();
    set(F::UniqueBytes, unique as f64);
    set(F::DataPkts, s.data_pkts as f64);
    set(F::DataBytes, s.data_bytes as f64);
    set(F::RexmtDataPkts, s.rexmt_pkts as f64);
    set(F::RexmtDataBytes, s.rexmt_bytes as f64);
    set(F::OutOfOrderPkts, s.ooo_pkts as f64);
    set(F::PushedDataPkts, s.pushed as f64);
    set(F::SynPkts, s.syns as f64);
    set(F::FinPkts, s.fins as f64);
    set(F::Resets, s.resets as f64);
    set(F::ZeroWindowProbePkts, s.zwp_pkts as f64);
    set(F::ZeroWindowProbeBytes, s.zwp_bytes as f64);

    let opts = syn.map(|p| &p.options);
    set(F::SackPermitted, opts.is_some_and(|o| o.sack_permitted) as u8 as f64);
    set(F::SackBlocksSent, s.sack_blocks as f64);
    set(F::MaxSackBlocksInPkt, s.max_sack_blocks as f64);
    set(F::DsackBlocksSent, s.dsack_blocks as f64);
    set(
        F::WindowScaleRequested,
        opts.is_some_and(|o| o.window_scale.is_some()) as u8 as f64,
    );
    set(F::AdvWindowScale, opts.and_then(|o| o.window_scale).unwrap_or(0) as f64);
    set(
        F::TimestampRequested,
        opts.is_some_and(|o| o.timestamps.is_some()) as u8 as f64,
    );
    set(F::MssRequested, opts.and_then(|o| o.mss).unwrap_or(0) as f64);

    set(F::MaxSegmSize, s.segm_max as f64);
    set(F::MinSegmSize, s.segm_min.unwrap_or(0) as f64);
    let avg_segm = if s.data_pkts > 0 {
        s.data_bytes as f64 / s.data_pkts as f64
    } else {
        0.0
    };
    set(F::AvgSegmSize, avg_segm);

    set(F::MaxWinAdv, s.win_max as f64);
    set(F::MinWinAdv, s.win_min.unwrap_or(0) as f64);
    let avg_win = if s.win_count > 0 {
        s.win_sum / s.win_count as f64
    } else {
        0.0
    };
    set(F::AvgWinAdv, avg_win);
    set(F::ZeroWinAdvCount, s.zero_win as f64);
    set(F::InitialWindowBytes, s.init_bytes as f64);
    set(F::InitialWindowPkts, s.init_pkts as f64);
    set(F::DuplicateAcksSent, s.dupacks as f64);
    set(F::TripleDupacks, s.triple_dupacks as f64);
    set(F::MaxIdleMs, s.max_idle_us as f64 / 1000.0);

    let xmit_us = match (s.first_data_us, s.last_data_us) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    let throughput = if xmit_us > 0 {
        unique as f64 / (xmit_us as f64 * 1e-6)
    } else {
        0.0
    };
    set(F::ThroughputBps, throughput);
    set(F::DataXmitMs, xmit_us as f64 / 1000.0);

    let n = s.rtt_ms.len();
    set(F::RttSamples, n as f64);
    if n > 0 {
        let mean = s.rtt_ms.iter().sum::<f64>() / n as f64;
        let min = s.rtt_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.rtt_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let stdev = if n > 1 {
            let ss: f64 = s.rtt_ms.iter().map(|r| (r - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        // guard the ordering invariant against summation rounding
        set(F::RttMinMs, min);
        set(F::RttAvgMs, mean.clamp(min, max));
        set(F::RttMaxMs, max);
        set(F::RttStdevMs, stdev);
    }

    let max_rexmt = s.transmissions.values().map(|c| c - 1).max().unwrap_or(0);
    set(F::MaxRexmtOfSegment, max_rexmt as f64);
    let missed = match (s.min_start, s.max_end) {
        (Some(lo), Some(hi)) => (hi - lo.min(0) - unique).max(0),
        _ => 0,
    };
    set(F::MissedDataBytes, missed as f64);
}
