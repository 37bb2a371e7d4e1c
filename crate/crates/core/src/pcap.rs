//! Classic pcap reading and writing.
//!
//! Only the microsecond-resolution libpcap format is handled (magic
//! `0xa1b2c3d4`, either byte order). Frames are decoded down to the TCP
//! header; payload bytes are never inspected.
//!
//! See <https://wiki.wireshark.org/Development/LibpcapFileFormat>.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const DEFAULT_SNAPLEN: u32 = 65535;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
/// `DLT_RAW` as written by several BSD-derived capture tools.
pub const LINKTYPE_RAW_BSD: u32 = 12;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETH_HEADER_LEN: usize = 14;
const IPV4_HEADER_LEN: usize = 20;
const TCP_HEADER_LEN: usize = 20;
const MAX_TCP_OPTIONS_LEN: usize = 40;
const IPPROTO_TCP: u8 = 6;

pub const MAX_SACK_BLOCKS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcapError {
    #[error("unrecognized pcap magic number {0:#010x}")]
    BadMagic(u32),
    #[error("capture truncated at offset {offset}: need {needed} bytes, {available} remain")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),
    #[error("packet {index} cannot be encoded: {reason}")]
    InvalidRecord { index: usize, reason: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum OptionError {
    #[error("malformed TCP option kind {kind} at offset {offset}")]
    MalformedOption { kind: u8, offset: usize },
}

/// Capture timestamp with the microsecond resolution of the classic format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp {
    pub secs: u32,
    pub micros: u32,
}

impl Timestamp {
    pub fn new(secs: u32, micros: u32) -> Self {
        Self { secs, micros }
    }

    pub fn from_micros(total: u64) -> Self {
        Self {
            secs: (total / 1_000_000) as u32,
            micros: (total % 1_000_000) as u32,
        }
    }

    pub fn as_micros(&self) -> u64 {
        self.secs as u64 * 1_000_000 + self.micros as u64
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.secs as f64 + self.micros as f64 * 1e-6
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);

    const ALL: u8 = 0x3f;

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    /// Keeps only the six classic flag bits.
    pub const fn from_bits_truncate(bits: u8) -> Self {
        TcpFlags(bits & Self::ALL)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: TcpFlags) {
        self.0 |= other.0;
    }

    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }
    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }
    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }
    pub fn rst(self) -> bool {
        self.contains(Self::RST)
    }
    pub fn psh(self) -> bool {
        self.contains(Self::PSH)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, &str); 6] = [
            (TcpFlags::SYN, "SYN"),
            (TcpFlags::ACK, "ACK"),
            (TcpFlags::FIN, "FIN"),
            (TcpFlags::RST, "RST"),
            (TcpFlags::PSH, "PSH"),
            (TcpFlags::URG, "URG"),
        ];
        let set: Vec<&str> = NAMES
            .iter()
            .filter(|(flag, _)| self.contains(*flag))
            .map(|(_, name)| *name)
            .collect();
        write!(f, "[{}]", set.join("|"))
    }
}

/// One SACK block as carried on the wire: `[left, right)` in sequence space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SackBlock {
    pub left: u32,
    pub right: u32,
}

impl SackBlock {
    pub fn new(left: u32, right: u32) -> Self {
        Self { left, right }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TcpOptionSet {
    pub mss: Option<u16>,
    pub window_scale: Option<u8>,
    pub sack_permitted: bool,
    pub sack_blocks: Vec<SackBlock>,
    /// `(tsval, tsecr)`
    pub timestamps: Option<(u32, u32)>,
}

impl TcpOptionSet {
    /// Encoded length in bytes, already padded to a 32-bit boundary.
    pub fn encoded_len(&self) -> usize {
        let mut len = 0;
        if self.mss.is_some() {
            len += 4;
        }
        len += match (self.sack_permitted, self.timestamps.is_some()) {
            (_, true) => 12,
            (true, false) => 4,
            (false, false) => 0,
        };
        if self.window_scale.is_some() {
            len += 4;
        }
        if !self.sack_blocks.is_empty() {
            len += 4 + 8 * self.sack_blocks.len();
        }
        len
    }

    /// Linux-style option layout; every group is padded with NOPs to a
    /// 4-byte boundary so the total needs no trailing EOL.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        if let Some(mss) = self.mss {
            out.extend_from_slice(&[2, 4]);
            out.extend_from_slice(&mss.to_be_bytes());
        }
        match (self.sack_permitted, self.timestamps) {
            (true, Some((val, ecr))) => {
                out.extend_from_slice(&[4, 2, 8, 10]);
                out.extend_from_slice(&val.to_be_bytes());
                out.extend_from_slice(&ecr.to_be_bytes());
            }
            (false, Some((val, ecr))) => {
                out.extend_from_slice(&[1, 1, 8, 10]);
                out.extend_from_slice(&val.to_be_bytes());
                out.extend_from_slice(&ecr.to_be_bytes());
            }
            (true, None) => out.extend_from_slice(&[1, 1, 4, 2]),
            (false, None) => {}
        }
        if let Some(shift) = self.window_scale {
            out.extend_from_slice(&[1, 3, 3, shift]);
        }
        if !self.sack_blocks.is_empty() {
            out.extend_from_slice(&[1, 1, 5, (2 + 8 * self.sack_blocks.len()) as u8]);
            for block in &self.sack_blocks {
                out.extend_from_slice(&block.left.to_be_bytes());
                out.extend_from_slice(&block.right.to_be_bytes());
            }
        }
        debug_assert_eq!(out.len(), self.encoded_len());
        out
    }
}

/// Decodes the TCP option region (the bytes between the fixed 20-byte header
/// and the data offset).
pub fn decode_options(region: &[u8]) -> Result<TcpOptionSet, OptionError> {
    let mut opts = TcpOptionSet::default();
    let mut i = 0;
    while i < region.len() {
        let kind = region[i];
        match kind {
            0 => break,
            1 => {
                i += 1;
                continue;
            }
            _ => {}
        }
        let malformed = OptionError::MalformedOption { kind, offset: i };
        let len = *region.get(i + 1).ok_or(malformed.clone())? as usize;
        if len < 2 || i + len > region.len() {
            return Err(malformed);
        }
        let body = &region[i + 2..i + len];
        match kind {
            2 if len == 4 => opts.mss = Some(u16::from_be_bytes([body[0], body[1]])),
            3 if len == 3 => opts.window_scale = Some(body[0]),
            4 if len == 2 => opts.sack_permitted = true,
            5 if (len - 2) % 8 == 0 => {
                opts.sack_blocks = body
                    .chunks_exact(8)
                    .map(|c| {
                        SackBlock::new(
                            u32::from_be_bytes([c[0], c[1], c[2], c[3]]),
                            u32::from_be_bytes([c[4], c[5], c[6], c[7]]),
                        )
                    })
                    .collect();
            }
            8 if len == 10 => {
                opts.timestamps = Some((
                    u32::from_be_bytes([body[0], body[1], body[2], body[3]]),
                    u32::from_be_bytes([body[4], body[5], body[6], body[7]]),
                ))
            }
            2..=5 | 8 => return Err(malformed),
            _ => {}
        }
        i += len;
    }
    Ok(opts)
}

/// One captured TCP/IPv4 frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PacketRecord {
    pub ts: Timestamp,
    pub captured_len: u32,
    pub original_len: u32,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    /// Raw header value, before any window scaling.
    pub window: u16,
    pub payload_len: u32,
    pub options: TcpOptionSet,
}

impl PacketRecord {
    /// Builds a full-frame Ethernet record; `captured_len == original_len`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ts: Timestamp,
        src: (Ipv4Addr, u16),
        dst: (Ipv4Addr, u16),
        seq: u32,
        ack: u32,
        flags: TcpFlags,
        window: u16,
        payload_len: u32,
        options: TcpOptionSet,
    ) -> Self {
        let mut rec = Self {
            ts,
            captured_len: 0,
            original_len: 0,
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            seq,
            ack,
            flags,
            window,
            payload_len,
            options,
        };
        rec.original_len = rec.frame_len() as u32;
        rec.captured_len = rec.original_len;
        rec
    }

    pub fn tcp_header_len(&self) -> usize {
        TCP_HEADER_LEN + self.options.encoded_len()
    }

    pub fn headers_len(&self) -> usize {
        ETH_HEADER_LEN + IPV4_HEADER_LEN + self.tcp_header_len()
    }

    /// Length of the Ethernet frame this record describes.
    pub fn frame_len(&self) -> usize {
        self.headers_len() + self.payload_len as usize
    }

    /// Sequence space consumed: payload plus one each for SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        self.payload_len + self.flags.syn() as u32 + self.flags.fin() as u32
    }

    /// Truncates the captured portion to `snaplen`, like a capture tool would.
    pub fn with_snaplen(mut self, snaplen: u32) -> Self {
        self.captured_len = self.original_len.min(snaplen);
        self
    }

    fn validate(&self, index: usize) -> Result<(), PcapError> {
        let invalid = |reason: String| PcapError::InvalidRecord { index, reason };
        if self.options.encoded_len() > MAX_TCP_OPTIONS_LEN {
            return Err(invalid(format!(
                "options need {} bytes, at most {MAX_TCP_OPTIONS_LEN} fit",
                self.options.encoded_len()
            )));
        }
        if self.options.sack_blocks.len() > MAX_SACK_BLOCKS {
            return Err(invalid("more than 4 SACK blocks".into()));
        }
        if self.frame_len() - ETH_HEADER_LEN > u16::MAX as usize {
            return Err(invalid("IP total length exceeds 65535".into()));
        }
        if self.original_len as usize != self.frame_len() {
            return Err(invalid(format!(
                "original_len {} does not match frame length {}",
                self.original_len,
                self.frame_len()
            )));
        }
        if (self.captured_len as usize) < self.headers_len() || self.captured_len > self.original_len {
            return Err(invalid(format!(
                "captured_len {} outside [{}, {}]",
                self.captured_len,
                self.headers_len(),
                self.original_len
            )));
        }
        Ok(())
    }
}

/// Result of parsing a capture file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PcapTrace {
    pub link_type: u32,
    pub snaplen: u32,
    pub packets: Vec<PacketRecord>,
    /// Records that were not IPv4/TCP, were fragments, or were unparseable.
    pub skipped: usize,
}

impl PcapTrace {
    pub fn records(&self) -> usize {
        self.packets.len() + self.skipped
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

fn need(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], PcapError> {
    bytes.get(offset..offset + len).ok_or(PcapError::Truncated {
        offset,
        needed: len,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Parses a classic pcap capture held in memory.
pub fn read_pcap(bytes: &[u8]) -> Result<PcapTrace, PcapError> {
    let header = need(bytes, 0, GLOBAL_HEADER_LEN)?;
    let magic_le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
    let endian = if magic_le == MAGIC_MICROS {
        Endian::Little
    } else if magic_le.swap_bytes() == MAGIC_MICROS {
        Endian::Big
    } else {
        return Err(PcapError::BadMagic(magic_le));
    };
    let snaplen = endian.u32(&header[16..20]);
    let link_type = endian.u32(&header[20..24]);
    if !matches!(link_type, LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_RAW_BSD) {
        return Err(PcapError::UnsupportedLinkType(link_type));
    }

    let mut trace = PcapTrace {
        link_type,
        snaplen,
        ..Default::default()
    };
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        let rec = need(bytes, offset, RECORD_HEADER_LEN)?;
        let ts = Timestamp::new(endian.u32(&rec[0..4]), endian.u32(&rec[4..8]));
        let incl_len = endian.u32(&rec[8..12]);
        let orig_len = endian.u32(&rec[12..16]);
        offset += RECORD_HEADER_LEN;
        let frame = need(bytes, offset, incl_len as usize)?;
        offset += incl_len as usize;

        let ip = if link_type == LINKTYPE_ETHERNET {
            strip_ethernet(frame)
        } else {
            Some(frame)
        };
        match ip.and_then(|ip| parse_ipv4_tcp(ip, ts, incl_len, orig_len)) {
            Some(packet) => trace.packets.push(packet),
            None => trace.skipped += 1,
        }
    }
    Ok(trace)
}

fn strip_ethernet(frame: &[u8]) -> Option<&[u8]> {
    if frame.len() < ETH_HEADER_LEN {
        return None;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut start = ETH_HEADER_LEN;
    if ethertype == ETHERTYPE_VLAN {
        let tag = frame.get(14..18)?;
        ethertype = u16::from_be_bytes([tag[2], tag[3]]);
        start += 4;
    }
    (ethertype == ETHERTYPE_IPV4).then(|| &frame[start..])
}

fn parse_ipv4_tcp(ip: &[u8], ts: Timestamp, incl_len: u32, orig_len: u32) -> Option<PacketRecord> {
    if ip.len() < IPV4_HEADER_LEN || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = frag & 0x2000 != 0;
    let frag_offset = frag & 0x1fff;
    if ihl < IPV4_HEADER_LEN || ip[9] != IPPROTO_TCP || more_fragments || frag_offset != 0 {
        return None;
    }
    let tcp = ip.get(ihl..)?;
    if tcp.len() < TCP_HEADER_LEN {
        return None;
    }
    let doff = (tcp[12] >> 4) as usize * 4;
    if doff < TCP_HEADER_LEN || tcp.len() < doff || total_len < ihl + doff {
        return None;
    }
    let options = decode_options(&tcp[TCP_HEADER_LEN..doff]).ok()?;
    Some(PacketRecord {
        ts,
        captured_len: incl_len,
        original_len: orig_len,
        src_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        dst_ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        src_port: u16::from_be_bytes([tcp[0], tcp[1]]),
        dst_port: u16::from_be_bytes([tcp[2], tcp[3]]),
        seq: u32::from_be_bytes([tcp[4], tcp[5], tcp[6], tcp[7]]),
        ack: u32::from_be_bytes([tcp[8], tcp[9], tcp[10], tcp[11]]),
        flags: TcpFlags::from_bits_truncate(tcp[13]),
        window: u16::from_be_bytes([tcp[14], tcp[15]]),
        payload_len: (total_len - ihl - doff) as u32,
        options,
    })
}

fn mac_for(ip: Ipv4Addr) -> [u8; 6] {
    let o = ip.octets();
    [0x02, 0x00, o[0], o[1], o[2], o[3]]
}

fn checksum_add(mut sum: u32, bytes: &[u8]) -> u32 {
    let mut chunks = bytes.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    sum
}

fn checksum_fold(mut sum: u32) -> u16 {
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes one record to its full Ethernet frame (zero-filled payload).
pub fn encode_frame(p: &PacketRecord) -> Vec<u8> {
    let tcp_len = p.tcp_header_len();
    let ip_total = IPV4_HEADER_LEN + tcp_len + p.payload_len as usize;
    let mut frame = Vec::with_capacity(ETH_HEADER_LEN + ip_total);

    frame.extend_from_slice(&mac_for(p.dst_ip));
    frame.extend_from_slice(&mac_for(p.src_ip));
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip_start = frame.len();
    frame.extend_from_slice(&[0x45, 0]);
    frame.extend_from_slice(&(ip_total as u16).to_be_bytes());
    // id 0, DF set, ttl 64
    frame.extend_from_slice(&[0, 0, 0x40, 0, 64, IPPROTO_TCP, 0, 0]);
    frame.extend_from_slice(&p.src_ip.octets());
    frame.extend_from_slice(&p.dst_ip.octets());
    let ip_csum = checksum_fold(checksum_add(0, &frame[ip_start..]));
    frame[ip_start + 10..ip_start + 12].copy_from_slice(&ip_csum.to_be_bytes());

    let tcp_start = frame.len();
    frame.extend_from_slice(&p.src_port.to_be_bytes());
    frame.extend_from_slice(&p.dst_port.to_be_bytes());
    frame.extend_from_slice(&p.seq.to_be_bytes());
    frame.extend_from_slice(&p.ack.to_be_bytes());
    frame.push(((tcp_len / 4) as u8) << 4);
    frame.push(p.flags.bits());
    frame.extend_from_slice(&p.window.to_be_bytes());
    frame.extend_from_slice(&[0, 0, 0, 0]);
    frame.extend_from_slice(&p.options.encode());
    frame.resize(frame.len() + p.payload_len as usize, 0);

    let tcp_segment_len = (tcp_len + p.payload_len as usize) as u32;
    let mut sum = checksum_add(0, &p.src_ip.octets());
    sum = checksum_add(sum, &p.dst_ip.octets());
    sum += IPPROTO_TCP as u32 + tcp_segment_len;
    // zero payload contributes nothing to the sum
    sum = checksum_add(sum, &frame[tcp_start..tcp_start + tcp_len]);
    let tcp_csum = checksum_fold(sum);
    frame[tcp_start + 16..tcp_start + 18].copy_from_slice(&tcp_csum.to_be_bytes());
    frame
}

/// Writes a little-endian classic pcap with an Ethernet link type.
pub fn write_pcap(packets: &[PacketRecord]) -> Result<Vec<u8>, PcapError> {
    let body: usize = packets
        .iter()
        .map(|p| RECORD_HEADER_LEN + p.captured_len as usize)
        .sum();
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&DEFAULT_SNAPLEN.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());

    for (index, p) in packets.iter().enumerate() {
        p.validate(index)?;
        let frame = encode_frame(p);
        out.extend_from_slice(&p.ts.secs.to_le_bytes());
        out.extend_from_slice(&p.ts.micros.to_le_bytes());
        out.extend_from_slice(&p.captured_len.to_le_bytes());
        out.extend_from_slice(&p.original_len.to_le_bytes());
        out.extend_from_slice(&frame[..p.captured_len as usize]);
    }
    Ok(out)
}
