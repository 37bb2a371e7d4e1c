//! Event loop and the two TCP endpoints.
//!
//! Sequence numbers are kept internally as 64-bit offsets from each sender's
//! ISN (0 is the SYN, data starts at 1) and only mapped to 32-bit wire values
//! when a packet is captured.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::link::Link;
use super::seed::derive_seed;
use super::{EmuError, FaultConfig, LinkConfig, SimOutcome, TcpVariant, TransferConfig};
use crate::pcap::{PacketRecord, SackBlock, TcpFlags, TcpOptionSet, Timestamp};

const MS: u64 = 1_000_000;
const DEFAULT_BUFFER: u64 = 4 << 20;
const WINDOW_SHIFT: u8 = 7;
const TS_OPTION_LEN: u32 = 12;
const MAX_SACK_BLOCKS: usize = 3;
const DUP_THRESH: u32 = 3;
const RTO_MIN: u64 = 200 * MS;
const RTO_MAX: u64 = 60_000 * MS;
const RTO_INIT: u64 = 1_000 * MS;
const DELACK: u64 = 40 * MS;
const READ_TICK: u64 = 2 * MS;
const READ_CHUNK: u64 = 16 * 1024;
const SIM_LIMIT: u64 = 600_000 * MS;
const CUBIC_C: f64 = 0.4;
const BIC_MAX_INC: f64 = 32.0;
const BIC_MIN_INC: f64 = 0.01;

const CLIENT: usize = 0;
const SERVER: usize = 1;

#[derive(Debug, Clone)]
struct Wire {
    from: usize,
    seq: u64,
    len: u32,
    syn: bool,
    fin: bool,
    ack: Option<u64>,
    psh: bool,
    window: u16,
    sack: Vec<(u64, u64)>,
    syn_opts: Option<SynOpts>,
    tsval: u32,
    tsecr: u32,
}

impl Wire {
    fn seq_end(&self) -> u64 {
        self.seq + self.len as u64 + self.syn as u64 + self.fin as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct SynOpts {
    mss: u16,
    sack_permitted: bool,
    window_scale: u8,
}

#[derive(Debug, Clone)]
struct Seg {
    end: u64,
    fin: bool,
    psh: bool,
    probe: bool,
    xmits: u32,
    sent_at: u64,
    sacked: bool,
    lost: bool,
    /// Retransmitted since the current loss episode began.
    rexmitted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    Syn,
    Rto,
    Persist,
    DelAck,
    ReadTick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Closed,
    SynSent,
    SynReceived,
    Established,
}

enum Next {
    Retransmit(u64),
    New { len: u64, psh: bool },
    Fin,
}

struct Endpoint {
    addr: (Ipv4Addr, u16),
    isn: u32,
    ts_offset: u32,
    phase: Phase,
    offer_sack: bool,
    make_dsack: bool,
    mss_announce: u16,
    variant: TcpVariant,

    // negotiated
    sack_ok: bool,
    peer_shift: u8,
    seg_size: u64,
    ts_recent: u32,

    // sending
    segs: BTreeMap<u64, Seg>,
    snd_una: u64,
    snd_max: u64,
    app_total: u64,
    app_written: u64,
    write_bounds: BTreeSet<u64>,
    sndbuf: u64,
    data_ready: bool,
    fin_queued: bool,
    fin_sent: bool,
    fin_acked: bool,
    cwnd: f64,
    ssthresh: f64,
    w_max: f64,
    epoch_start: Option<u64>,
    in_recovery: bool,
    recover: u64,
    dupacks: u32,
    rescue_done: bool,
    peer_edge: u64,
    peer_wnd: u64,
    max_peer_wnd: u64,
    last_ack_window: Option<(u64, u16)>,
    srtt: Option<f64>,
    rttvar: f64,
    rto: u64,
    backoff: u32,

    // receiving
    rcv_nxt: u64,
    ooo: BTreeMap<u64, u64>,
    recent: Vec<u64>,
    peer_fin: Option<u64>,
    rcvbuf: u64,
    app_read: u64,
    adv_edge: u64,
    last_adv: u64,
    unacked_segs: u32,
    pending_dsack: Option<(u64, u64)>,
    read_all: bool,

    timers: BTreeMap<Timer, u64>,
}

impl Endpoint {
    fn new(addr: (Ipv4Addr, u16), isn: u32, ts_offset: u32, transfer: &TransferConfig) -> Self {
        Self {
            addr,
            isn,
            ts_offset,
            phase: Phase::Closed,
            offer_sack: true,
            make_dsack: true,
            mss_announce: transfer.mss,
            variant: transfer.tcp_variant,
            sack_ok: false,
            peer_shift: 0,
            seg_size: transfer.mss as u64 - TS_OPTION_LEN as u64,
            ts_recent: 0,
            segs: BTreeMap::new(),
            snd_una: 0,
            snd_max: 0,
            app_total: 0,
            app_written: 1,
            write_bounds: BTreeSet::new(),
            sndbuf: DEFAULT_BUFFER,
            data_ready: false,
            fin_queued: false,
            fin_sent: false,
            fin_acked: false,
            cwnd: (transfer.initial_cwnd as u64 * (transfer.mss as u64 - TS_OPTION_LEN as u64)) as f64,
            ssthresh: f64::INFINITY,
            w_max: 0.0,
            epoch_start: None,
            in_recovery: false,
            recover: 0,
            dupacks: 0,
            rescue_done: false,
            peer_edge: 0,
            peer_wnd: 0,
            max_peer_wnd: 0,
            last_ack_window: None,
            srtt: None,
            rttvar: 0.0,
            rto: RTO_INIT,
            backoff: 0,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            recent: Vec::new(),
            peer_fin: None,
            rcvbuf: DEFAULT_BUFFER,
            app_read: 1,
            adv_edge: 0,
            last_adv: 0,
            unacked_segs: 0,
            pending_dsack: None,
            read_all: false,
            timers: BTreeMap::new(),
        }
    }

    fn mss(&self) -> f64 {
        self.seg_size as f64
    }

    fn current_rto(&self) -> u64 {
        (self.rto << self.backoff.min(16)).min(RTO_MAX)
    }

    fn ooo_bytes(&self) -> u64 {
        self.ooo.iter().map(|(s, e)| e - s).sum()
    }

    /// Receive window in bytes after silly-window avoidance.
    fn free_window(&self) -> u64 {
        let buffered = self.rcv_nxt.saturating_sub(self.app_read) + self.ooo_bytes();
        let free = self.rcvbuf.saturating_sub(buffered);
        let floor = self.seg_size.min(self.rcvbuf / 2);
        if free < floor {
            0
        } else {
            free
        }
    }

    /// Header window field plus the byte window it represents.
    fn window_field(&self, syn: bool) -> (u16, u64) {
        let free = self.free_window();
        if syn {
            let f = free.min(u16::MAX as u64);
            return (f as u16, f);
        }
        let unit = 1u64 << WINDOW_SHIFT;
        let field = free.div_ceil(unit).min(u16::MAX as u64);
        (field as u16, field * unit)
    }

    fn outstanding(&self) -> bool {
        self.snd_max > self.snd_una
    }

    fn has_unsent(&self) -> bool {
        self.snd_max < self.app_written
    }

    fn pipe(&self) -> u64 {
        let mut pipe = 0;
        for (start, s) in &self.segs {
            if s.sacked {
                continue;
            }
            let len = s.end - start;
            if !s.lost {
                pipe += len;
            }
            if s.rexmitted {
                pipe += len;
            }
        }
        if self.in_recovery && !self.sack_ok {
            // each duplicate ACK stands for a segment that left the network
            pipe = pipe.saturating_sub(self.dupacks as u64 * self.seg_size);
        }
        pipe
    }

    fn next_segment(&mut self) -> Option<Next> {
        if self.phase != Phase::Established {
            return None;
        }
        let pipe = self.pipe() as f64;
        if pipe > 0.0 && self.cwnd - pipe < self.mss() {
            return None;
        }
        if let Some((&start, _)) = self.segs.iter().find(|(_, s)| s.lost && !s.rexmitted && !s.sacked) {
            return Some(Next::Retransmit(start));
        }
        if self.has_unsent() {
            let bound = *self
                .write_bounds
                .range(self.snd_max + 1..)
                .next()
                .expect("write end is a bound");
            let room = self.peer_edge.saturating_sub(self.snd_max);
            let len = self.seg_size.min(bound - self.snd_max).min(room);
            let ends_write = self.snd_max + len == bound;
            if len > 0 && (len == self.seg_size || ends_write || len * 2 >= self.max_peer_wnd) {
                return Some(Next::New { len, psh: ends_write });
            }
        } else if self.fin_queued && !self.fin_sent {
            return Some(Next::Fin);
        }
        if self.in_recovery && self.sack_ok {
            let high_sacked = self.segs.iter().filter(|(_, s)| s.sacked).map(|(_, s)| s.end).max();
            if let Some(high) = high_sacked {
                let hole = self
                    .segs
                    .iter()
                    .find(|(&st, s)| st < high && !s.sacked && !s.lost && !s.rexmitted && !s.probe);
                if let Some((&start, _)) = hole {
                    return Some(Next::Retransmit(start));
                }
            }
            if !self.rescue_done {
                let last = self.segs.iter().rev().find(|(_, s)| !s.sacked && !s.rexmitted);
                if let Some((&start, _)) = last {
                    self.rescue_done = true;
                    return Some(Next::Retransmit(start));
                }
            }
        }
        None
    }

    /// Marks unSACKed segments with enough SACKed segments above them as lost.
    fn detect_sack_losses(&mut self) {
        let mut sacked_above = 0u32;
        for s in self.segs.values_mut().rev() {
            if s.sacked {
                sacked_above += 1;
            } else if sacked_above >= DUP_THRESH && !s.lost && !s.probe {
                s.lost = true;
                s.rexmitted = false;
            }
        }
    }

    fn enter_recovery(&mut self, now: u64) {
        self.in_recovery = true;
        self.recover = self.snd_max;
        self.rescue_done = false;
        self.reduce_window(now);
        self.cwnd = self.ssthresh;
        for s in self.segs.values_mut() {
            s.rexmitted = false;
        }
        if let Some(s) = self.segs.values_mut().next() {
            s.lost = true;
        }
    }

    fn reduce_window(&mut self, now: u64) {
        let beta = self.variant.beta();
        self.w_max = self.cwnd;
        self.ssthresh = (self.cwnd * beta).max(2.0 * self.mss());
        self.epoch_start = Some(now);
    }

    fn grow_window(&mut self, acked: u64, now: u64) {
        let mss = self.mss();
        let acked = acked as f64;
        if self.cwnd < self.ssthresh {
            self.cwnd += acked.min(mss);
            return;
        }
        let reno = mss * acked / self.cwnd;
        let inc = match self.variant {
            TcpVariant::Reno => reno,
            TcpVariant::CubicLike => {
                let epoch = *self.epoch_start.get_or_insert(now);
                let w_max = (self.w_max / mss).max(self.cwnd / mss);
                let k = (w_max * (1.0 - self.variant.beta()) / CUBIC_C).cbrt();
                let rtt = self.srtt.unwrap_or(0.1);
                let t = (now - epoch) as f64 / 1e9 + rtt;
                let target = (CUBIC_C * (t - k).powi(3) + w_max) * mss;
                let cubic = if target > self.cwnd {
                    (target - self.cwnd) * acked / self.cwnd
                } else {
                    0.01 * mss * acked / self.cwnd
                };
                cubic.max(reno)
            }
            TcpVariant::BicLike => {
                let dist = if self.cwnd < self.w_max {
                    (self.w_max - self.cwnd) / 2.0
                } else {
                    self.cwnd - self.w_max
                };
                let step = dist.clamp(BIC_MIN_INC * mss, BIC_MAX_INC * mss);
                step * acked / self.cwnd
            }
        };
        self.cwnd += inc;
    }

    fn rtt_sample(&mut self, sample_ns: u64) {
        let r = sample_ns as f64;
        match self.srtt {
            None => {
                self.srtt = Some(r / 1e9);
                self.rttvar = r / 2.0;
                self.rto = (r + 4.0 * self.rttvar) as u64;
            }
            Some(srtt_s) => {
                let srtt = srtt_s * 1e9;
                self.rttvar = 0.75 * self.rttvar + 0.25 * (srtt - r).abs();
                let srtt = 0.875 * srtt + 0.125 * r;
                self.srtt = Some(srtt / 1e9);
                self.rto = (srtt + 4.0 * self.rttvar) as u64;
            }
        }
        self.rto = self.rto.clamp(RTO_MIN, RTO_MAX);
    }

    /// SACK blocks for the next ACK: an optional D-SACK block, then the most
    /// recently changed out-of-order blocks.
    fn sack_blocks(&mut self) -> Vec<(u64, u64)> {
        if !self.sack_ok {
            self.pending_dsack = None;
            return vec![];
        }
        let mut blocks = Vec::new();
        if let Some(d) = self.pending_dsack.take() {
            if self.make_dsack {
                blocks.push(d);
                if d.0 >= self.rcv_nxt {
                    if let Some(b) = self.block_containing(d.0) {
                        if b != d {
                            blocks.push(b);
                        }
                    }
                }
            }
        }
        self.recent.retain(|&s| s >= self.rcv_nxt);
        let mut seen = Vec::new();
        for &s in self.recent.iter().rev() {
            if let Some(b) = self.block_containing(s) {
                if !seen.contains(&b) && !blocks.contains(&b) {
                    seen.push(b);
                }
            }
        }
        for b in seen {
            if blocks.len() == MAX_SACK_BLOCKS {
                break;
            }
            blocks.push(b);
        }
        blocks
    }

    fn block_containing(&self, seq: u64) -> Option<(u64, u64)> {
        self.ooo
            .range(..=seq)
            .next_back()
            .filter(|(_, &e)| e > seq)
            .map(|(&s, &e)| (s, e))
    }

    fn insert_ooo(&mut self, mut start: u64, mut end: u64) {
        let touching: Vec<u64> = self
            .ooo
            .range(..=end)
            .rev()
            .take_while(|(_, &e)| e >= start)
            .map(|(&s, _)| s)
            .collect();
        for s in touching {
            let e = self.ooo.remove(&s).expect("present");
            start = start.min(s);
            end = end.max(e);
        }
        self.ooo.insert(start, end);
    }

    /// Length of `[start, end)` already held out of order.
    fn ooo_overlap(&self, start: u64, end: u64) -> Option<(u64, u64)> {
        self.ooo.range(..end).next_back().and_then(|(&s, &e)| {
            let (lo, hi) = (s.max(start), e.min(end));
            (lo < hi).then_some((lo, hi))
        })
    }

    fn advance_in_order(&mut self) {
        while let Some((&s, &e)) = self.ooo.iter().next() {
            if s > self.rcv_nxt {
                break;
            }
            self.ooo.remove(&s);
            self.rcv_nxt = self.rcv_nxt.max(e);
        }
    }

    fn data_received_end(&self) -> u64 {
        match self.peer_fin {
            Some(f) if self.rcv_nxt > f => f,
            _ => self.rcv_nxt,
        }
    }

    /// Application writes into the send buffer as space allows.
    fn app_write(&mut self) {
        if !self.data_ready {
            return;
        }
        let end = 1 + self.app_total;
        while self.app_written < end {
            let used = self.app_written - self.snd_una.max(1);
            let free = self.sndbuf.saturating_sub(used);
            let remaining = end - self.app_written;
            let wanted = (self.sndbuf / 3).max(1).min(remaining);
            if free < wanted {
                break;
            }
            self.app_written += free.min(remaining);
            self.write_bounds.insert(self.app_written);
        }
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrive { to: usize, id: usize },
    Timer { host: usize, timer: Timer, gen: u64 },
}

struct Sim {
    now: u64,
    counter: u64,
    gen: u64,
    queue: BinaryHeap<Reverse<(u64, u64, Event)>>,
    in_flight: BTreeMap<usize, Wire>,
    next_id: usize,
    ep: [Endpoint; 2],
    links: [Link; 2],
    captures: [Vec<PacketRecord>; 2],
    request_bytes: u64,
    response_bytes: u64,
}

impl Sim {
    fn schedule(&mut self, at: u64, ev: Event) {
        self.counter += 1;
        self.queue.push(Reverse((at, self.counter, ev)));
    }

    fn arm(&mut self, host: usize, timer: Timer, delay: u64) {
        self.gen += 1;
        let gen = self.gen;
        self.ep[host].timers.insert(timer, gen);
        self.schedule(self.now + delay, Event::Timer { host, timer, gen });
    }

    fn disarm(&mut self, host: usize, timer: Timer) {
        self.ep[host].timers.remove(&timer);
    }

    fn armed(&self, host: usize, timer: Timer) -> bool {
        self.ep[host].timers.contains_key(&timer)
    }

    fn record(&self, w: &Wire, at: u64) -> PacketRecord {
        let from = &self.ep[w.from];
        let to = &self.ep[1 - w.from];
        let mut flags = TcpFlags::default();
        if w.syn {
            flags.insert(TcpFlags::SYN);
        }
        if w.fin {
            flags.insert(TcpFlags::FIN);
        }
        if w.psh {
            flags.insert(TcpFlags::PSH);
        }
        let ack = match w.ack {
            Some(a) => {
                flags.insert(TcpFlags::ACK);
                to.isn.wrapping_add(a as u32)
            }
            None => 0,
        };
        let mut options = TcpOptionSet {
            timestamps: Some((w.tsval, w.tsecr)),
            sack_blocks: w
                .sack
                .iter()
                .map(|&(l, r)| SackBlock::new(to.isn.wrapping_add(l as u32), to.isn.wrapping_add(r as u32)))
                .collect(),
            ..Default::default()
        };
        if let Some(o) = w.syn_opts {
            options.mss = Some(o.mss);
            options.sack_permitted = o.sack_permitted;
            options.window_scale = Some(o.window_scale);
        }
        PacketRecord::new(
            Timestamp::from_micros(at / 1000),
            from.addr,
            to.addr,
            from.isn.wrapping_add(w.seq as u32),
            ack,
            flags,
            w.window,
            w.len,
            options,
        )
    }

    fn emit(&mut self, w: Wire) {
        let rec = self.record(&w, self.now);
        let bytes = rec.frame_len();
        self.captures[w.from].push(rec);
        if let Some(at) = self.links[w.from].transmit(self.now, bytes) {
            let id = self.next_id;
            self.next_id += 1;
            let to = 1 - w.from;
            self.in_flight.insert(id, w);
            self.schedule(at, Event::Arrive { to, id });
        }
    }

    fn base_wire(&mut self, h: usize, seq: u64) -> Wire {
        let ep = &self.ep[h];
        let syn = matches!(ep.phase, Phase::SynSent | Phase::Closed | Phase::SynReceived) && seq == 0;
        let (window, bytes) = ep.window_field(syn);
        let ack = (ep.phase != Phase::SynSent && ep.phase != Phase::Closed).then_some(ep.rcv_nxt);
        let w = Wire {
            from: h,
            seq,
            len: 0,
            syn: false,
            fin: false,
            ack,
            psh: false,
            window,
            sack: vec![],
            syn_opts: None,
            tsval: (self.now / MS) as u32 + ep.ts_offset,
            tsecr: ep.ts_recent,
        };
        let ep = &mut self.ep[h];
        if ack.is_some() {
            ep.adv_edge = ep.adv_edge.max(ep.rcv_nxt + bytes);
            ep.last_adv = bytes;
            ep.unacked_segs = 0;
            ep.timers.remove(&Timer::DelAck);
        }
        w
    }

    fn send_syn(&mut self, h: usize) {
        let seq = 0;
        let mut w = self.base_wire(h, seq);
        let ep = &self.ep[h];
        w.syn = true;
        w.syn_opts = Some(SynOpts {
            mss: ep.mss_announce,
            sack_permitted: if h == CLIENT { ep.offer_sack } else { ep.sack_ok },
            window_scale: WINDOW_SHIFT,
        });
        self.ep[h].snd_max = 1;
        self.emit(w);
        let delay = self.ep[h].current_rto();
        self.arm(h, Timer::Syn, delay);
    }

    fn send_ack(&mut self, h: usize) {
        let seq = self.ep[h].snd_max;
        let mut w = self.base_wire(h, seq);
        w.sack = self.ep[h].sack_blocks();
        self.emit(w);
    }

    fn send_segment(&mut self, h: usize, start: u64, fresh: bool) {
        let seg = self.ep[h].segs[&start].clone();
        let mut w = self.base_wire(h, start);
        w.fin = seg.fin;
        w.len = (seg.end - start - seg.fin as u64) as u32;
        w.psh = seg.psh;
        let now = self.now;
        let ep = &mut self.ep[h];
        let s = ep.segs.get_mut(&start).expect("segment exists");
        s.xmits += 1;
        s.sent_at = now;
        if !fresh {
            s.rexmitted = true;
        }
        self.emit(w);
    }

    fn try_send(&mut self, h: usize) {
        while let Some(next) = self.ep[h].next_segment() {
            match next {
                Next::Retransmit(start) => self.send_segment(h, start, false),
                Next::New { len, psh } => {
                    let ep = &mut self.ep[h];
                    let start = ep.snd_max;
                    ep.segs.insert(start, new_seg(start + len, psh, false, false));
                    ep.snd_max += len;
                    self.send_segment(h, start, true);
                }
                Next::Fin => {
                    let ep = &mut self.ep[h];
                    let start = ep.snd_max;
                    ep.segs.insert(start, new_seg(start + 1, false, true, false));
                    ep.snd_max += 1;
                    ep.fin_sent = true;
                    self.send_segment(h, start, true);
                }
            }
        }
        self.update_timers(h);
    }

    fn update_timers(&mut self, h: usize) {
        let ep = &self.ep[h];
        if ep.phase != Phase::Established {
            return;
        }
        let real_outstanding = ep.segs.values().any(|s| !s.probe && !s.sacked);
        if real_outstanding {
            if !self.armed(h, Timer::Rto) {
                let d = ep.current_rto();
                self.arm(h, Timer::Rto, d);
            }
        } else {
            self.disarm(h, Timer::Rto);
        }
        let ep = &self.ep[h];
        let blocked = ep.has_unsent() && ep.peer_edge <= ep.snd_max && !real_outstanding;
        if blocked {
            if !self.armed(h, Timer::Persist) {
                let d = ep.current_rto();
                self.arm(h, Timer::Persist, d);
            }
        } else {
            self.disarm(h, Timer::Persist);
        }
    }

    fn on_timer(&mut self, h: usize, timer: Timer, gen: u64) {
        if self.ep[h].timers.get(&timer) != Some(&gen) {
            return;
        }
        self.ep[h].timers.remove(&timer);
        match timer {
            Timer::Syn => {
                let ep = &mut self.ep[h];
                if matches!(ep.phase, Phase::SynSent | Phase::SynReceived) {
                    ep.backoff += 1;
                    self.send_syn(h);
                }
            }
            Timer::Rto => self.on_rto(h),
            Timer::Persist => self.on_persist(h),
            Timer::DelAck => {
                if self.ep[h].unacked_segs > 0 {
                    self.send_ack(h);
                }
            }
            Timer::ReadTick => self.on_read_tick(h),
        }
    }

    fn on_rto(&mut self, h: usize) {
        let now = self.now;
        let ep = &mut self.ep[h];
        if !ep.segs.values().any(|s| !s.probe && !s.sacked) {
            return;
        }
        ep.reduce_window(now);
        ep.cwnd = ep.mss();
        ep.in_recovery = false;
        ep.recover = ep.snd_max;
        ep.dupacks = 0;
        ep.backoff += 1;
        for s in ep.segs.values_mut() {
            if !s.sacked {
                s.lost = true;
                s.rexmitted = false;
            }
        }
        self.try_send(h);
        let d = self.ep[h].current_rto();
        self.arm(h, Timer::Rto, d);
    }

    fn on_persist(&mut self, h: usize) {
        let ep = &mut self.ep[h];
        if let Some((&start, _)) = ep.segs.iter().find(|(_, s)| s.probe) {
            ep.backoff += 1;
            self.send_segment(h, start, false);
        } else if ep.has_unsent() {
            let start = ep.snd_max;
            let psh = ep.write_bounds.contains(&(start + 1));
            ep.segs.insert(start, new_seg(start + 1, psh, false, true));
            ep.snd_max += 1;
            ep.backoff += 1;
            self.send_segment(h, start, true);
        }
        let d = self.ep[h].current_rto();
        self.arm(h, Timer::Persist, d);
    }

    fn on_read_tick(&mut self, h: usize) {
        let before = self.ep[h].free_window();
        let ep = &mut self.ep[h];
        let available = ep.data_received_end().saturating_sub(ep.app_read);
        ep.app_read += available.min(READ_CHUNK);
        let total_end = 1 + self.response_bytes;
        ep.read_all = ep.app_read >= total_end;
        let after = self.ep[h].free_window();
        let last = self.ep[h].last_adv;
        let reopened = last == 0 && after > 0;
        let grew = after >= 2 * last.max(1) && after - last >= 2 * self.ep[h].seg_size;
        if after > before && (reopened || grew) {
            self.send_ack(h);
        }
        self.maybe_close(h);
        if !self.ep[h].read_all {
            self.arm(h, Timer::ReadTick, READ_TICK);
        }
    }

    fn maybe_close(&mut self, h: usize) {
        let ep = &mut self.ep[h];
        let peer_done = ep.peer_fin.is_some_and(|f| ep.rcv_nxt > f);
        if h == CLIENT && ep.read_all && peer_done && !ep.fin_queued {
            ep.fin_queued = true;
            self.try_send(h);
        }
    }

    fn on_arrive(&mut self, h: usize, w: Wire) {
        self.captures[h].push(self.record(&w, self.now));
        let ep = &mut self.ep[h];
        if w.seq <= ep.rcv_nxt || ep.phase != Phase::Established {
            ep.ts_recent = w.tsval;
        }
        match ep.phase {
            Phase::Closed if w.syn && w.ack.is_none() => {
                let o = w.syn_opts.expect("syn carries options");
                ep.sack_ok = o.sack_permitted && ep.offer_sack;
                ep.peer_shift = o.window_scale;
                ep.seg_size = (o.mss.min(ep.mss_announce) as u64) - TS_OPTION_LEN as u64;
                ep.rcv_nxt = 1;
                ep.app_read = 1;
                ep.peer_wnd = w.window as u64;
                ep.peer_edge = w.window as u64 + 1;
                ep.max_peer_wnd = ep.peer_wnd;
                ep.phase = Phase::SynReceived;
                self.send_syn(h);
                return;
            }
            Phase::SynReceived if w.syn => {
                self.send_syn(h);
                return;
            }
            Phase::SynSent if w.syn && w.ack == Some(1) => {
                let o = w.syn_opts.expect("syn carries options");
                ep.sack_ok = o.sack_permitted && ep.offer_sack;
                ep.peer_shift = o.window_scale;
                ep.seg_size = (o.mss.min(ep.mss_announce) as u64) - TS_OPTION_LEN as u64;
                ep.rcv_nxt = 1;
                ep.snd_una = 1;
                ep.peer_wnd = w.window as u64;
                ep.peer_edge = 1 + w.window as u64;
                ep.max_peer_wnd = ep.peer_wnd;
                ep.phase = Phase::Established;
                ep.backoff = 0;
                ep.data_ready = true;
                ep.app_write();
                self.disarm(h, Timer::Syn);
                self.send_ack(h);
                self.arm(h, Timer::ReadTick, READ_TICK);
                self.try_send(h);
                return;
            }
            Phase::Established if w.syn => {
                // our handshake ACK was lost
                self.send_ack(h);
                return;
            }
            Phase::SynReceived if w.ack.is_some_and(|a| a >= 1) => {
                ep.phase = Phase::Established;
                ep.snd_una = 1;
                ep.backoff = 0;
                self.disarm(h, Timer::Syn);
            }
            Phase::Established => {}
            _ => return,
        }
        self.on_ack(h, &w);
        self.on_data(h, &w);
        self.try_send(h);
    }

    fn on_ack(&mut self, h: usize, w: &Wire) {
        let Some(ack) = w.ack else { return };
        let now = self.now;
        let ep = &mut self.ep[h];
        if ack > ep.snd_max {
            return;
        }
        if ep.sack_ok {
            for (i, &(l, r)) in w.sack.iter().enumerate() {
                let dsack = r <= ack || (i == 0 && w.sack.get(1).is_some_and(|&(l2, r2)| l >= l2 && r <= r2));
                if dsack {
                    continue;
                }
                for (&st, s) in ep.segs.range_mut(l..r) {
                    if s.end <= r && st >= l {
                        s.sacked = true;
                    }
                }
            }
        }
        let window = (w.window as u64) << ep.peer_shift;
        let window_changed = ep.last_ack_window.is_some_and(|(a, win)| a == ack && win != w.window);
        if ack >= ep.snd_una {
            ep.peer_wnd = window;
            ep.peer_edge = ack + window;
            ep.max_peer_wnd = ep.max_peer_wnd.max(window);
        }

        if ack > ep.snd_una {
            let acked = ack - ep.snd_una;
            // Karn: no sample once anything being acknowledged was resent
            let mut sample = Some(u64::MAX);
            let covered: Vec<u64> = ep.segs.range(..ack).map(|(&s, _)| s).collect();
            for start in covered {
                let seg = ep.segs.remove(&start).expect("present");
                if seg.end > ack {
                    // partially acknowledged: keep the remainder
                    ep.segs.insert(ack, seg);
                    continue;
                }
                if seg.xmits > 1 || seg.sacked {
                    sample = None;
                }
                sample = sample.map(|r| r.min(now - seg.sent_at));
                if seg.fin {
                    ep.fin_acked = true;
                }
            }
            if let Some(r) = sample.filter(|&r| r != u64::MAX) {
                ep.rtt_sample(r);
            }
            ep.snd_una = ack;
            ep.backoff = 0;
            if ep.in_recovery {
                if ack >= ep.recover {
                    ep.in_recovery = false;
                    ep.dupacks = 0;
                    let flight = (ep.snd_max - ep.snd_una) as f64;
                    ep.cwnd = ep.ssthresh.min(flight + ep.mss()).max(ep.mss());
                    for s in ep.segs.values_mut() {
                        s.rexmitted = false;
                    }
                } else if !ep.sack_ok {
                    ep.dupacks = 0;
                    if let Some(s) = ep.segs.values_mut().next() {
                        s.lost = true;
                        s.rexmitted = false;
                    }
                }
            } else {
                ep.dupacks = 0;
                ep.grow_window(acked, now);
            }
            self.disarm(h, Timer::Rto);
            let ep = &mut self.ep[h];
            if ep.peer_wnd > 0 {
                for s in ep.segs.values_mut().filter(|s| s.probe) {
                    s.probe = false;
                    s.lost = true;
                    s.rexmitted = false;
                }
            }
            ep.app_write();
        } else {
            let is_dup = ack == ep.snd_una
                && w.len == 0
                && !w.syn
                && !w.fin
                && ep.outstanding()
                && !window_changed
                && ep.segs.values().any(|s| !s.probe);
            if is_dup {
                ep.dupacks += 1;
                if !ep.in_recovery && ep.dupacks == DUP_THRESH && ep.snd_una >= ep.recover {
                    ep.enter_recovery(now);
                }
            }
            if ep.peer_wnd > 0 {
                for s in ep.segs.values_mut().filter(|s| s.probe) {
                    s.probe = false;
                    s.lost = true;
                    s.rexmitted = false;
                }
            }
        }
        let ep = &mut self.ep[h];
        ep.last_ack_window = Some((ack, w.window));
        if ep.sack_ok && ep.outstanding() {
            ep.detect_sack_losses();
            let head_lost = ep.segs.values().next().is_some_and(|s| s.lost);
            if !ep.in_recovery && head_lost && ep.snd_una >= ep.recover && ep.segs.values().any(|s| s.sacked) {
                ep.enter_recovery(now);
            }
        }
    }

    fn on_data(&mut self, h: usize, w: &Wire) {
        let ep = &mut self.ep[h];
        if w.len == 0 && !w.fin {
            return;
        }
        let start = w.seq;
        let data_end = w.seq + w.len as u64;
        let end = w.seq_end();
        let mut immediate = w.fin;

        if end <= ep.rcv_nxt {
            ep.pending_dsack = Some((start, end));
            self.send_ack(h);
            return;
        }
        let edge = ep.adv_edge.max(ep.rcv_nxt);
        if w.len > 0 && start >= edge {
            // nothing fits in the window
            self.send_ack(h);
            return;
        }
        // an accepted FIN occupies one unit of sequence space, also when out of order
        let fin_in = w.fin && data_end <= edge;
        if fin_in {
            ep.peer_fin = Some(data_end);
        }
        let accept_end = if fin_in { end } else { data_end.min(edge) };
        if start < ep.rcv_nxt {
            ep.pending_dsack = Some((start, ep.rcv_nxt));
        } else if let Some(dup) = ep.ooo_overlap(start, accept_end) {
            ep.pending_dsack = Some(dup);
        }
        let had_holes = !ep.ooo.is_empty();
        if start <= ep.rcv_nxt {
            if accept_end > ep.rcv_nxt {
                ep.rcv_nxt = accept_end;
            }
            ep.advance_in_order();
            if had_holes {
                immediate = true;
            }
        } else {
            if accept_end > start {
                ep.insert_ooo(start, accept_end);
                ep.recent.push(start);
                if ep.recent.len() > 16 {
                    ep.recent.remove(0);
                }
            }
            immediate = true;
        }
        if ep.pending_dsack.is_some() {
            immediate = true;
        }
        if h == SERVER {
            ep.app_read = ep.data_received_end();
            if !ep.data_ready && ep.app_read > self.request_bytes {
                ep.data_ready = true;
                ep.app_total = self.response_bytes;
                ep.fin_queued = true;
                ep.app_write();
            }
        }
        let ep = &mut self.ep[h];
        ep.unacked_segs += 1;
        if immediate || ep.unacked_segs >= 2 {
            self.send_ack(h);
        } else if !self.armed(h, Timer::DelAck) {
            self.arm(h, Timer::DelAck, DELACK);
        }
        self.maybe_close(h);
    }

    fn finished(&self) -> bool {
        self.ep.iter().all(|e| e.fin_acked)
    }
}

fn new_seg(end: u64, psh: bool, fin: bool, probe: bool) -> Seg {
    Seg {
        end,
        fin,
        psh,
        probe,
        xmits: 0,
        sent_at: 0,
        sacked: false,
        lost: false,
        rexmitted: false,
    }
}

/// Runs one transfer and returns the client-side and server-side captures.
pub fn simulate_transfer(
    link: &LinkConfig,
    fault: &FaultConfig,
    transfer: &TransferConfig,
) -> Result<SimOutcome, EmuError> {
    link.validate()?;
    transfer.validate()?;
    for cap in [fault.read_buffer_bytes, fault.write_buffer_bytes]
        .into_iter()
        .flatten()
    {
        if (cap as u64) < transfer.mss as u64 {
            return Err(EmuError::ConfigInvalid(format!("buffer cap {cap} is below one MSS")));
        }
    }

    let mut ids = ChaCha8Rng::seed_from_u64(derive_seed(link.seed, &[0]));
    let client_port = ids.random_range(32768..61000);
    let mut client = Endpoint::new(
        (Ipv4Addr::new(10, 0, 0, 1), client_port),
        ids.random(),
        ids.random(),
        transfer,
    );
    let server = Endpoint::new((Ipv4Addr::new(10, 0, 0, 2), 80), ids.random(), ids.random(), transfer);
    client.offer_sack = !fault.sack_disabled;
    client.make_dsack = !fault.dsack_disabled;
    if let Some(r) = fault.read_buffer_bytes {
        client.rcvbuf = r as u64;
    }
    if let Some(wb) = fault.write_buffer_bytes {
        client.sndbuf = wb as u64;
    }
    client.app_total = transfer.request_bytes;
    client.phase = Phase::SynSent;

    let links = [
        Link::new(
            link.rate_mbps,
            link.one_way_delay_ms,
            link.loss_pct,
            link.queue_packets,
            derive_seed(link.seed, &[1]),
        ),
        Link::new(
            link.rate_mbps,
            link.one_way_delay_ms,
            link.loss_pct,
            link.queue_packets,
            derive_seed(link.seed, &[2]),
        ),
    ];
    let mut sim = Sim {
        now: 0,
        counter: 0,
        gen: 0,
        queue: BinaryHeap::new(),
        in_flight: BTreeMap::new(),
        next_id: 0,
        ep: [client, server],
        links,
        captures: [Vec::new(), Vec::new()],
        request_bytes: transfer.request_bytes,
        response_bytes: transfer.bytes_to_send,
    };
    sim.send_syn(CLIENT);

    let mut stalled = false;
    while let Some(Reverse((at, _, ev))) = sim.queue.pop() {
        if sim.finished() {
            break;
        }
        if at > SIM_LIMIT {
            stalled = true;
            break;
        }
        sim.now = at;
        match ev {
            Event::Arrive { to, id } => {
                let w = sim.in_flight.remove(&id).expect("packet in flight");
                sim.on_arrive(to, w);
            }
            Event::Timer { host, timer, gen } => sim.on_timer(host, timer, gen),
        }
    }
    if !sim.finished() {
        stalled = true;
        log::warn!("transfer did not complete (seed {})", link.seed);
    }
    let [client_cap, server_cap] = sim.captures;
    Ok(SimOutcome {
        client: client_cap,
        server: server_cap,
        stalled,
        sim_time_s: sim.now as f64 / 1e9,
    })
}
