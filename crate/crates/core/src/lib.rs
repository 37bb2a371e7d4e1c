//! Collective fault diagnosis for TCP transfers from passive packet traces.

pub mod emulator;
pub mod flow;
pub mod network;
pub mod pcap;
pub mod preprocess;
pub mod select;
pub mod sigdb;
pub mod svm;

pub use flow::{signature_from_traces, SignatureVector, TraceFeatureVector, Vantage};
pub use network::{diagnose, CfModel, DiagnosisReport, EvalReport, TrainConfig};
pub use pcap::{PacketRecord, Timestamp};
pub use sigdb::{ClassLabel, LabelSet, Signature, SignatureDb, SignatureMeta};
