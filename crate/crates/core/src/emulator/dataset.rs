//! Labelled dataset generation on top of the emulator.
//!
//! Seeds: sample `i` of every class shares `derive_seed(master, [i])` and the
//! link drawn from it, so classes differ only by the injected fault. A faulty
//! run that turns out byte-identical to the healthy run on the same link is
//! redrawn on a degraded link with seed `derive_seed(master, [i, class, k])`
//! for attempt `k = 1, 2, ...`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed::derive_seed;
use super::tcp::simulate_transfer;
use super::{EmuError, FaultConfig, LinkConfig, SimOutcome, TransferConfig};
use crate::flow::{signature_from_traces, FeatureError};
use crate::pcap::write_pcap;
use crate::sigdb::{ClassLabel, LabelSet, LinkMeta, Signature, SignatureMeta};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const REDRAW_LIMIT: u64 = 50;
const LINK_STREAM: u64 = 0x6c696e6b;

/// Socket-buffer cap levels, in multiples of a 1460-byte MSS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferLevel {
    Small,
    Medium,
    Large,
}

impl BufferLevel {
    pub const ALL: [BufferLevel; 3] = [BufferLevel::Small, BufferLevel::Medium, BufferLevel::Large];

    pub fn bytes(self) -> u32 {
        let segments = match self {
            BufferLevel::Small => 2,
            BufferLevel::Medium => 8,
            BufferLevel::Large => 32,
        };
        segments * 1460
    }

    /// Levels are cycled by sample index.
    pub fn for_index(i: usize) -> Self {
        Self::ALL[i % 3]
    }
}

/// Fault configuration realising a label set at a given buffer level.
pub fn fault_for(labels: &LabelSet, level: BufferLevel) -> FaultConfig {
    FaultConfig {
        sack_disabled: labels.contains(&ClassLabel::SACK_DISABLED),
        dsack_disabled: labels.contains(&ClassLabel::DSACK_DISABLED),
        read_buffer_bytes: labels.contains(&ClassLabel::READ_BUFFER_LIMITED).then(|| level.bytes()),
        write_buffer_bytes: labels
            .contains(&ClassLabel::WRITE_BUFFER_LIMITED)
            .then(|| level.bytes()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub labels: LabelSet,
    pub count: usize,
}

impl ClassPlan {
    pub fn new(labels: impl IntoIterator<Item = ClassLabel>, count: usize) -> Self {
        Self {
            labels: labels.into_iter().collect(),
            count,
        }
    }
}

/// Every `baseline_every`-th sample uses the clean link; the rest draw loss
/// and delay uniformly from the given ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPlan {
    pub rate_mbps: f64,
    pub baseline_delay_ms: f64,
    pub baseline_every: usize,
    pub loss_pct: (f64, f64),
    pub delay_ms: (f64, f64),
    pub queue_packets: usize,
}

impl Default for LinkPlan {
    fn default() -> Self {
        Self {
            rate_mbps: 80.0,
            baseline_delay_ms: 10.0,
            baseline_every: 4,
            loss_pct: (1.0, 10.0),
            delay_ms: (15.0, 100.0),
            queue_packets: 100,
        }
    }
}

impl LinkPlan {
    fn baseline(&self, seed: u64) -> LinkConfig {
        LinkConfig {
            rate_mbps: self.rate_mbps,
            one_way_delay_ms: self.baseline_delay_ms,
            loss_pct: 0.0,
            seed,
            queue_packets: self.queue_packets,
        }
    }

    fn degraded(&self, seed: u64) -> LinkConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[LINK_STREAM]));
        let loss = rng.random_range(self.loss_pct.0..=self.loss_pct.1);
        let delay = rng.random_range(self.delay_ms.0..=self.delay_ms.1);
        LinkConfig {
            rate_mbps: self.rate_mbps,
            one_way_delay_ms: (delay * 10.0).round() / 10.0,
            loss_pct: (loss * 100.0).round() / 100.0,
            seed,
            queue_packets: self.queue_packets,
        }
    }

    fn for_index(&self, i: usize, seed: u64) -> LinkConfig {
        if self.baseline_every > 0 && i % self.baseline_every == 0 {
            self.baseline(seed)
        } else {
            self.degraded(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Prefix for sample ids, e.g. `train`.
    pub name: String,
    pub classes: Vec<ClassPlan>,
    pub link: LinkPlan,
    pub transfer: TransferConfig,
    pub seed: u64,
}

impl DatasetSpec {
    /// `per_class` samples of the healthy class and each single fault.
    pub fn single_faults(name: &str, per_class: usize, transfer: TransferConfig, seed: u64) -> Self {
        let mut classes = vec![ClassPlan::new([ClassLabel::HEALTHY], per_class)];
        classes.extend(ClassLabel::FAULTS.iter().map(|&f| ClassPlan::new([f], per_class)));
        Self {
            name: name.into(),
            classes,
            link: LinkPlan::default(),
            transfer,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: LabelSet,
    pub meta: SignatureMeta,
    pub link: LinkConfig,
    pub fault: FaultConfig,
    pub buffer_level: Option<BufferLevel>,
    pub client_pcap: String,
    pub server_pcap: String,
    /// Counterfactual redraws needed before the fault left a trace.
    pub redraws: u64,
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub entry: ManifestEntry,
    pub outcome: SimOutcome,
}

impl GeneratedSample {
    pub fn signature(&self) -> Result<Signature, FeatureError> {
        let v = signature_from_traces(&self.outcome.client, &self.outcome.server)?;
        Ok(Signature::new(
            self.entry.id.clone(),
            self.entry.labels.clone(),
            self.entry.meta.clone(),
            v,
        ))
    }
}

fn class_tag(labels: &LabelSet) -> String {
    labels
        .iter()
        .map(|l| format!("cf{}", l.0))
        .collect::<Vec<_>>()
        .join("+")
}

fn generate_one(spec: &DatasetSpec, class: usize, i: usize) -> Result<GeneratedSample, EmuError> {
    let plan = &spec.classes[class];
    let caps = plan.labels.contains(&ClassLabel::READ_BUFFER_LIMITED)
        || plan.labels.contains(&ClassLabel::WRITE_BUFFER_LIMITED);
    let level = BufferLevel::for_index(i);
    let fault = fault_for(&plan.labels, level);

    let mut seed = derive_seed(spec.seed, &[i as u64]);
    let mut link = spec.link.for_index(i, seed);
    let mut outcome = simulate_transfer(&link, &fault, &spec.transfer)?;
    let mut redraws = 0;
    if !fault.is_healthy() {
        loop {
            let healthy = simulate_transfer(&link, &FaultConfig::default(), &spec.transfer)?;
            let same = healthy.client == outcome.client && healthy.server == outcome.server;
            if !same {
                break;
            }
            if redraws == REDRAW_LIMIT {
                log::warn!(
                    "{:?} sample {i}: fault left no trace after {redraws} redraws",
                    plan.labels
                );
                break;
            }
            redraws += 1;
            seed = derive_seed(spec.seed, &[i as u64, class as u64, redraws]);
            link = spec.link.degraded(seed);
            outcome = simulate_transfer(&link, &fault, &spec.transfer)?;
        }
    }

    let id = format!("{}_{}_{:03}", spec.name, class_tag(&plan.labels), i);
    let meta = SignatureMeta {
        tcp_variant: spec.transfer.tcp_variant.name().to_string(),
        link: LinkMeta {
            rate_Mbps: link.rate_mbps,
            delay_ms: link.one_way_delay_ms,
            loss_pct: link.loss_pct,
        },
        transfer_bytes: spec.transfer.bytes_to_send,
        seed,
    };
    let entry = ManifestEntry {
        client_pcap: format!("{id}_client.pcap"),
        server_pcap: format!("{id}_server.pcap"),
        id,
        labels: plan.labels.clone(),
        meta,
        link,
        fault,
        buffer_level: caps.then_some(level),
        redraws,
        stalled: outcome.stalled,
    };
    Ok(GeneratedSample { entry, outcome })
}

/// Runs every sample of the spec in memory, in class-then-index order.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<GeneratedSample>, EmuError> {
    spec.transfer.validate()?;
    let jobs: Vec<(usize, usize)> = spec
        .classes
        .iter()
        .enumerate()
        .flat_map(|(c, plan)| (0..plan.count).map(move |i| (c, i)))
        .collect();
    jobs.par_iter().map(|&(c, i)| generate_one(spec, c, i)).collect()
}

/// Generates the dataset and writes pcap pairs plus the manifest into `dir`.
pub fn gen_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>, EmuError> {
    fs::create_dir_all(dir)?;
    let samples = generate_samples(spec)?;
    let mut manifest = Vec::new();
    for s in &samples {
        fs::write(dir.join(&s.entry.client_pcap), write_pcap(&s.outcome.client)?)?;
        fs::write(dir.join(&s.entry.server_pcap), write_pcap(&s.outcome.server)?)?;
        serde_json::to_writer(&mut manifest, &s.entry).map_err(|e| EmuError::Manifest { line: 0, source: e })?;
        manifest.push(b'\n');
    }
    File::create(dir.join(MANIFEST_FILE))?.write_all(&manifest)?;
    Ok(samples.into_iter().map(|s| s.entry).collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, EmuError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| EmuError::Manifest { line: n + 1, source: e })?;
        out.push(entry);
    }
    Ok(out)
}
