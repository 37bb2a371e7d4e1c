//! JSON Lines signature database and per-fault training subsets.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::{signature_feature_names, SignatureVector, CATALOG_VERSION, SIGNATURE_DIM};

#[derive(Debug, Error)]
pub enum DbError {
    #[error("vector has {got} values, database expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate signature id {0:?}")]
    DuplicateId(String),
    #[error("catalog version {found} does not match database version {expected}")]
    CatalogMismatch { expected: u32, found: u32 },
    #[error("signature {0:?} has no labels or mixes cf_0 with faults")]
    InvalidLabels(String),
    #[error("signature {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error("insufficient samples for {fault}: {healthy} healthy and {faulty} faulty rows (need {needed} each)")]
    InsufficientSamples {
        fault: ClassLabel,
        healthy: usize,
        faulty: usize,
        needed: usize,
    },
    #[error("cf_0 is not a fault")]
    HealthyIsNotAFault,
    #[error("malformed database line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("database is empty (missing header)")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Class identifier `cf_j`; `cf_0` is the healthy class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLabel(pub u32);

impl ClassLabel {
    pub const HEALTHY: ClassLabel = ClassLabel(0);
    pub const SACK_DISABLED: ClassLabel = ClassLabel(1);
    pub const DSACK_DISABLED: ClassLabel = ClassLabel(2);
    pub const READ_BUFFER_LIMITED: ClassLabel = ClassLabel(3);
    pub const WRITE_BUFFER_LIMITED: ClassLabel = ClassLabel(4);

    pub const FAULTS: [ClassLabel; 4] = [
        Self::SACK_DISABLED,
        Self::DSACK_DISABLED,
        Self::READ_BUFFER_LIMITED,
        Self::WRITE_BUFFER_LIMITED,
    ];

    pub fn is_healthy(self) -> bool {
        self.0 == 0
    }

    pub fn description(self) -> &'static str {
        match self.0 {
            0 => "healthy",
            1 => "sack_disabled",
            2 => "dsack_disabled",
            3 => "read_buffer_limited",
            4 => "write_buffer_limited",
            _ => "registered fault",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cf_{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid class label {0:?}, expected cf_<n>")]
pub struct LabelParseError(pub String);

impl FromStr for ClassLabel {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("cf_")
            .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|n| n.parse().ok())
            .map(ClassLabel)
            .ok_or_else(|| LabelParseError(s.to_string()))
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type LabelSet = BTreeSet<ClassLabel>;

/// Parses `cf_3,cf_4` style label lists.
pub fn parse_labels(s: &str) -> Result<LabelSet, LabelParseError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

pub fn format_labels(labels: &LabelSet) -> String {
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct LinkMeta {
    pub rate_Mbps: f64,
    pub delay_ms: f64,
    pub loss_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureMeta {
    pub tcp_variant: String,
    pub link: LinkMeta,
    pub transfer_bytes: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub id: String,
    pub labels: LabelSet,
    pub meta: SignatureMeta,
    pub x: Vec<f64>,
    /// Carried by the database header rather than each line.
    #[serde(skip, default = "current_catalog")]
    pub catalog_version: u32,
}

fn current_catalog() -> u32 {
    CATALOG_VERSION
}

impl Signature {
    pub fn new(id: impl Into<String>, labels: LabelSet, meta: SignatureMeta, v: SignatureVector) -> Self {
        Self {
            id: id.into(),
            labels,
            meta,
            x: v.x,
            catalog_version: v.catalog_version,
        }
    }

    fn validate(&self) -> Result<(), DbError> {
        let bad_labels =
            self.labels.is_empty() || (self.labels.contains(&ClassLabel::HEALTHY) && self.labels.len() > 1);
        if bad_labels {
            return Err(DbError::InvalidLabels(self.id.clone()));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(DbError::NonFinite(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbHeader {
    pub catalog_version: u32,
    pub m: usize,
    pub features: Vec<String>,
}

impl Default for DbHeader {
    fn default() -> Self {
        Self {
            catalog_version: CATALOG_VERSION,
            m: SIGNATURE_DIM,
            features: signature_feature_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignatureDb {
    pub header: DbHeader,
    pub rows: Vec<Signature>,
}

impl SignatureDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_header(header: DbHeader) -> Self {
        Self { header, rows: vec![] }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn check(&self, sig: &Signature) -> Result<(), DbError> {
        if sig.catalog_version != self.header.catalog_version {
            return Err(DbError::CatalogMismatch {
                expected: self.header.catalog_version,
                found: sig.catalog_version,
            });
        }
        if sig.x.len() != self.header.m {
            return Err(DbError::DimensionMismatch {
                expected: self.header.m,
                got: sig.x.len(),
            });
        }
        sig.validate()
    }

    pub fn append(&mut self, sig: Signature) -> Result<(), DbError> {
        self.check(&sig)?;
        if self.rows.iter().any(|r| r.id == sig.id) {
            return Err(DbError::DuplicateId(sig.id));
        }
        self.rows.push(sig);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), DbError> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &self.header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for row in &self.rows {
            serde_json::to_writer(&mut w, row).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, DbError> {
        let mut lines = BufReader::new(r).lines();
        let header_line = lines.next().ok_or(DbError::MissingHeader)??;
        let header: DbHeader =
            serde_json::from_str(&header_line).map_err(|source| DbError::Parse { line: 1, source })?;
        let mut db = Self::with_header(header);
        let mut ids = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut sig: Signature =
                serde_json::from_str(&line).map_err(|source| DbError::Parse { line: i + 2, source })?;
            sig.catalog_version = db.header.catalog_version;
            db.check(&sig)?;
            if !ids.insert(sig.id.clone()) {
                return Err(DbError::DuplicateId(sig.id));
            }
            db.rows.push(sig);
        }
        Ok(db)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DbError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DbError> {
        self.write_to(std::fs::File::create(path)?)
    }

    /// Appends one line to a database file, creating it with a header when absent.
    pub fn append_to_file(path: impl AsRef<Path>, sig: Signature) -> Result<(), DbError> {
        let path = path.as_ref();
        if !path.exists() {
            let mut db = Self::new();
            db.append(sig)?;
            return db.save(path);
        }
        let db = Self::load(path)?;
        db.check(&sig)?;
        if db.rows.iter().any(|r| r.id == sig.id) {
            return Err(DbError::DuplicateId(sig.id));
        }
        let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
        let mut line = serde_json::to_vec(&sig).map_err(std::io::Error::from)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    /// Content hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Faults that appear as a single-label class in the database.
    pub fn single_faults(&self) -> Vec<ClassLabel> {
        let set: BTreeSet<ClassLabel> = self
            .rows
            .iter()
            .filter(|r| r.labels.len() == 1)
            .flat_map(|r| r.labels.iter().copied())
            .filter(|l| !l.is_healthy())
            .collect();
        set.into_iter().collect()
    }
}

/// Rows labelled exactly `{cf_0}` or exactly `{fault}`, in database order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSubset {
    pub fault: ClassLabel,
    pub ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<LabelSet>,
}

impl TrainingSubset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.labels
            .iter()
            .filter(|l| l.len() == 1 && l.contains(&label))
            .count()
    }
}

pub const MIN_CLASS_SAMPLES: usize = 2;

pub fn select_training_subset(db: &SignatureDb, fault: ClassLabel) -> Result<TrainingSubset, DbError> {
    if fault.is_healthy() {
        return Err(DbError::HealthyIsNotAFault);
    }
    let healthy = LabelSet::from([ClassLabel::HEALTHY]);
    let faulty = LabelSet::from([fault]);
    let mut subset = TrainingSubset {
        fault,
        ids: vec![],
        x: vec![],
        labels: vec![],
    };
    for row in &db.rows {
        if row.labels == healthy || row.labels == faulty {
            subset.ids.push(row.id.clone());
            subset.x.push(row.x.clone());
            subset.labels.push(row.labels.clone());
        }
    }
    let (h, f) = (subset.count(ClassLabel::HEALTHY), subset.count(fault));
    if h < MIN_CLASS_SAMPLES || f < MIN_CLASS_SAMPLES {
        return Err(DbError::InsufficientSamples {
            fault,
            healthy: h,
            faulty: f,
            needed: MIN_CLASS_SAMPLES,
        });
    }
    Ok(subset)
}
