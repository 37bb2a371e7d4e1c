//! Deterministic discrete-event emulation of a client/server bulk transfer
//! over a bottleneck link, with injectable client-side faults. Produces the
//! packet lists a capture at each host would see.

mod dataset;
mod link;
mod seed;
mod tcp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::{PacketRecord, PcapError};

pub use dataset::{
    fault_for, gen_dataset, generate_samples, read_manifest, BufferLevel, ClassPlan, DatasetSpec, GeneratedSample,
    LinkPlan, ManifestEntry, MANIFEST_FILE,
};
pub use seed::{derive_seed, splitmix64};
pub use tcp::simulate_transfer;

#[derive(Debug, Error)]
pub enum EmuError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    #[serde(rename = "rate_Mbps")]
    pub rate_mbps: f64,
    pub one_way_delay_ms: f64,
    /// Independent per-packet loss probability in each direction, in percent.
    pub loss_pct: f64,
    pub seed: u64,
    /// Drop-tail depth of the bottleneck queue, in packets.
    pub queue_packets: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            rate_mbps: 80.0,
            one_way_delay_ms: 10.0,
            loss_pct: 0.0,
            seed: 0,
            queue_packets: 100,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), EmuError> {
        let ok = self.rate_mbps > 0.0
            && self.rate_mbps.is_finite()
            && self.one_way_delay_ms > 0.0
            && self.one_way_delay_ms.is_finite()
            && (0.0..=100.0).contains(&self.loss_pct)
            && self.queue_packets > 0;
        if ok {
            Ok(())
        } else {
            Err(EmuError::ConfigInvalid(format!("link {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub sack_disabled: bool,
    pub dsack_disabled: bool,
    pub read_buffer_bytes: Option<u32>,
    pub write_buffer_bytes: Option<u32>,
}

impl FaultConfig {
    pub fn is_healthy(&self) -> bool {
        *self == FaultConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcpVariant {
    Reno,
    CubicLike,
    BicLike,
}

impl TcpVariant {
    pub fn name(self) -> &'static str {
        match self {
            TcpVariant::Reno => "reno",
            TcpVariant::CubicLike => "cubic_like",
            TcpVariant::BicLike => "bic_like",
        }
    }

    /// Multiplicative decrease applied on loss.
    pub fn beta(self) -> f64 {
        match self {
            TcpVariant::Reno => 0.5,
            TcpVariant::CubicLike => 0.7,
            TcpVariant::BicLike => 0.8,
        }
    }
}

impl std::str::FromStr for TcpVariant {
    type Err = EmuError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reno" => Ok(TcpVariant::Reno),
            "cubic_like" | "cubic" => Ok(TcpVariant::CubicLike),
            "bic_like" | "bic" => Ok(TcpVariant::BicLike),
            _ => Err(EmuError::ConfigInvalid(format!("unknown tcp variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Response size sent by the server.
    pub bytes_to_send: u64,
    /// Request size uploaded by the client before the response starts.
    pub request_bytes: u64,
    pub mss: u16,
    pub tcp_variant: TcpVariant,
    /// Initial congestion window, in segments.
    pub initial_cwnd: u32,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            bytes_to_send: 200_000,
            request_bytes: 100_000,
            mss: 1460,
            tcp_variant: TcpVariant::Reno,
            initial_cwnd: 10,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), EmuError> {
        if self.bytes_to_send == 0 || self.request_bytes == 0 {
            return Err(EmuError::ConfigInvalid("transfer sizes must be at least 1 byte".into()));
        }
        if self.mss < 64 {
            return Err(EmuError::ConfigInvalid("mss must be at least 64".into()));
        }
        if self.initial_cwnd == 0 {
            return Err(EmuError::ConfigInvalid("initial_cwnd must be positive".into()));
        }
        Ok(())
    }
}

/// Traces seen at the two capture points.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub client: Vec<PacketRecord>,
    pub server: Vec<PacketRecord>,
    /// The run hit the simulated-time cap before both sides closed.
    pub stalled: bool,
    pub sim_time_s: f64,
}
