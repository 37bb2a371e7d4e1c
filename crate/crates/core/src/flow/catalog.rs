//! Versioned feature catalog. The order of names defines the vector layout.

use serde::{Deserialize, Serialize};

pub const CATALOG_VERSION: u32 = 1;

macro_rules! dir_features {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// Per-direction features, in layout order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        #[repr(usize)]
        pub enum DirFeature {
            $($variant),+
        }

        impl DirFeature {
            pub const ALL: &'static [DirFeature] = &[$(DirFeature::$variant),+];
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn name(self) -> &'static str {
                Self::NAMES[self as usize]
            }
        }
    };
}

dir_features! {
    TotalPkts => "total_pkts",
    AckPkts => "ack_pkts",
    PureAcks => "pure_acks",
    UniqueBytes => "unique_bytes",
    DataPkts => "data_pkts",
    DataBytes => "data_bytes",
    RexmtDataPkts => "rexmt_data_pkts",
    RexmtDataBytes => "rexmt_data_bytes",
    OutOfOrderPkts => "out_of_order_pkts",
    PushedDataPkts => "pushed_data_pkts",
    SynPkts => "syn_pkts",
    FinPkts => "fin_pkts",
    Resets => "resets",
    ZeroWindowProbePkts => "zero_window_probe_pkts",
    ZeroWindowProbeBytes => "zero_window_probe_bytes",
    SackPermitted => "sack_permitted",
    SackBlocksSent => "sack_blocks_sent",
    MaxSackBlocksInPkt => "max_sack_blocks_in_pkt",
    DsackBlocksSent => "dsack_blocks_sent",
    WindowScaleRequested => "window_scale_requested",
    AdvWindowScale => "adv_window_scale",
    TimestampRequested => "timestamp_requested",
    MssRequested => "mss_requested",
    MaxSegmSize => "max_segm_size",
    MinSegmSize => "min_segm_size",
    AvgSegmSize => "avg_segm_size",
    MaxWinAdv => "max_win_adv",
    MinWinAdv => "min_win_adv",
    AvgWinAdv => "avg_win_adv",
    ZeroWinAdvCount => "zero_win_adv_count",
    InitialWindowBytes => "initial_window_bytes",
    InitialWindowPkts => "initial_window_pkts",
    DuplicateAcksSent => "duplicate_acks_sent",
    TripleDupacks => "triple_dupacks",
    MaxIdleMs => "max_idle_ms",
    ThroughputBps => "throughput_Bps",
    DataXmitMs => "data_xmit_ms",
    RttSamples => "rtt_samples",
    RttMinMs => "rtt_min_ms",
    RttAvgMs => "rtt_avg_ms",
    RttMaxMs => "rtt_max_ms",
    RttStdevMs => "rtt_stdev_ms",
    MaxRexmtOfSegment => "max_rexmt_of_segment",
    MissedDataBytes => "missed_data_bytes",
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum ConnFeature {
    DurationS,
    TotalPktsBoth,
    HandshakeComplete,
    CleanClose,
}

impl ConnFeature {
    pub const ALL: &'static [ConnFeature] = &[
        ConnFeature::DurationS,
        ConnFeature::TotalPktsBoth,
        ConnFeature::HandshakeComplete,
        ConnFeature::CleanClose,
    ];
    pub const NAMES: &'static [&'static str] = &["duration_s", "total_pkts_both", "handshake_complete", "clean_close"];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    A2b,
    B2a,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::A2b => "a2b",
            Direction::B2a => "b2a",
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::A2b => Direction::B2a,
            Direction::B2a => Direction::A2b,
        }
    }
}

pub const DIR_FEATURES: usize = 44;
pub const CONN_FEATURES: usize = 4;
/// Features extracted from one vantage trace.
pub const TRACE_DIM: usize = 2 * DIR_FEATURES + CONN_FEATURES;
/// Client-vantage vector followed by server-vantage vector.
pub const SIGNATURE_DIM: usize = 2 * TRACE_DIM;

const _: () = assert!(DirFeature::NAMES.len() == DIR_FEATURES);

pub fn dir_index(dir: Direction, f: DirFeature) -> usize {
    match dir {
        Direction::A2b => f as usize,
        Direction::B2a => DIR_FEATURES + f as usize,
    }
}

pub fn conn_index(f: ConnFeature) -> usize {
    2 * DIR_FEATURES + f as usize
}

/// Ordered names of one trace vector, e.g. `a2b_total_pkts`.
pub fn trace_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(TRACE_DIM);
    for dir in [Direction::A2b, Direction::B2a] {
        names.extend(DirFeature::NAMES.iter().map(|n| format!("{}_{n}", dir.prefix())));
    }
    names.extend(ConnFeature::NAMES.iter().map(|n| n.to_string()));
    names
}

/// Ordered names of a signature vector, e.g. `cl_a2b_total_pkts`, `sv_duration_s`.
pub fn signature_feature_names() -> Vec<String> {
    let trace = trace_feature_names();
    ["cl", "sv"]
        .iter()
        .flat_map(|side| trace.iter().map(move |n| format!("{side}_{n}")))
        .collect()
}

/// Statistical features of one vantage trace of one connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFeatureVector {
    pub catalog_version: u32,
    pub values: Vec<f64>,
}

impl TraceFeatureVector {
    pub fn zeros() -> Self {
        Self {
            catalog_version: CATALOG_VERSION,
            values: vec![0.0; TRACE_DIM],
        }
    }

    pub fn dir(&self, dir: Direction, f: DirFeature) -> f64 {
        self.values[dir_index(dir, f)]
    }

    pub fn set_dir(&mut self, dir: Direction, f: DirFeature, v: f64) {
        self.values[dir_index(dir, f)] = v;
    }

    pub fn conn(&self, f: ConnFeature) -> f64 {
        self.values[conn_index(f)]
    }

    pub fn set_conn(&mut self, f: ConnFeature, v: f64) {
        self.values[conn_index(f)] = v;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        trace_feature_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (String, f64)> + '_ {
        trace_feature_names().into_iter().zip(self.values.iter().copied())
    }
}
