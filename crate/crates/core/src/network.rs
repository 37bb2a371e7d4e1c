//! The parallel network of per-fault classifiers: training, collective
//! diagnosis and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{signature_feature_names, signature_from_traces, FeatureError, SignatureVector};
use crate::pcap::PacketRecord;
use crate::preprocess::{apply_scaler, apply_scaler_rows, encode_label, fit_scaler, PreprocessError, ScaleParams};
use crate::select::{rank_features, select_q, CvRow, SelectConfig, SelectError};
use crate::sigdb::{format_labels, select_training_subset, ClassLabel, DbError, LabelSet, Signature, SignatureDb};
use crate::svm::{train_l2_svm, KernelSpec, SvmError, SvmModel};

pub const UNKNOWN_FAULT_CAVEAT: &str =
    "only faults with a trained classifier can be reported; an unknown fault may appear healthy or be misattributed";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("catalog mismatch: model {fault} uses version {model}, input uses {input}")]
    CatalogMismatch { fault: ClassLabel, model: u32, input: u32 },
    #[error("no classifier models given")]
    NoModels,
    #[error("model file {path}: {reason}")]
    BadModel { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(rename = "C")]
    pub c: f64,
    /// `None` selects RBF with gamma = 1/q.
    pub kernel: Option<KernelSpec>,
    pub q_max: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = SelectConfig::default();
        Self {
            c: s.c,
            kernel: s.kernel,
            q_max: s.q_max,
            folds: s.folds,
            seed: s.seed,
        }
    }
}

impl TrainConfig {
    fn select_config(&self) -> SelectConfig {
        SelectConfig {
            q_max: self.q_max,
            folds: self.folds,
            seed: self.seed,
            c: self.c,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub db_hash: String,
    pub healthy_samples: usize,
    pub fault_samples: usize,
    pub cv_table: Vec<CvRow>,
    /// Left empty by default so retraining gives byte-identical files.
    pub timestamp: Option<String>,
    pub catalog_version: u32,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfModel {
    pub fault: ClassLabel,
    pub scale: ScaleParams,
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub svm: SvmModel,
    pub training_meta: TrainingMeta,
}

impl CfModel {
    pub fn file_name(fault: ClassLabel) -> String {
        format!("model_cf{}.json", fault.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Writes `model_cf<j>.json` into `dir` and returns its path.
    pub fn save_in(&self, dir: impl AsRef<Path>) -> Result<PathBuf, NetworkError> {
        let path = dir.as_ref().join(Self::file_name(self.fault));
        self.save(&path)?;
        Ok(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let model = Self::from_json(&text).map_err(|e| NetworkError::BadModel {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        model.check().map_err(|reason| NetworkError::BadModel {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(model)
    }

    fn check(&self) -> Result<(), String> {
        if self.fault.is_healthy() {
            return Err("cf_0 cannot have a classifier".into());
        }
        let m = self.scale.dim();
        if self.features.iter().any(|&k| k >= m) {
            return Err("feature index outside the scaler".into());
        }
        if self.features.len() != self.feature_names.len() {
            return Err("feature list and names differ in length".into());
        }
        if self.svm.dim() != self.features.len() {
            return Err("svm dimension differs from the feature list".into());
        }
        Ok(())
    }

    /// Scales, projects and scores one raw signature vector.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64, NetworkError> {
        let scaled = apply_scaler(&self.scale, x)?;
        let projected: Vec<f64> = self.features.iter().map(|&k| scaled[k]).collect();
        Ok(self.svm.decision_value(&projected)?)
    }
}

/// Every `model_cf*.json` in a directory, ordered by fault.
pub fn load_models(dir: impl AsRef<Path>) -> Result<Vec<CfModel>, NetworkError> {
    let mut models = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("model_cf") && name.ends_with(".json") {
            models.push(CfModel::load(&path)?);
        }
    }
    models.sort_by_key(|m| m.fault);
    Ok(models)
}

pub fn train_cf_classifier(db: &SignatureDb, fault: ClassLabel, config: &TrainConfig) -> Result<CfModel, NetworkError> {
    let subset = select_training_subset(db, fault)?;
    let y = subset
        .labels
        .iter()
        .map(|l| encode_label(l, fault))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = fit_scaler(&subset.x)?;
    let scaled = apply_scaler_rows(&scale, &subset.x)?;
    let ranking = rank_features(&scaled, &y)?;
    let select_cfg = config.select_config();
    let selection = select_q(&scaled, &y, &ranking, &select_cfg)?;

    let projected: Vec<Vec<f64>> = scaled
        .iter()
        .map(|r| selection.features.iter().map(|&k| r[k]).collect())
        .collect();
    let svm = train_l2_svm(&projected, &y, config.c, select_cfg.kernel_for(selection.q))?;
    if !svm.converged {
        log::warn!("{fault}: solver hit its iteration cap; model is flagged as not converged");
    }
    let names = if db.header.features.len() == scale.dim() {
        db.header.features.clone()
    } else {
        signature_feature_names()
    };
    log::info!(
        "{fault}: q={} features={:?}",
        selection.q,
        selection
            .features
            .iter()
            .map(|&k| names.get(k).cloned().unwrap_or_default())
            .collect::<Vec<_>>()
    );
    Ok(CfModel {
        fault,
        feature_names: selection
            .features
            .iter()
            .map(|&k| names.get(k).cloned().unwrap_or_default())
            .collect(),
        features: selection.features,
        scale,
        svm,
        training_meta: TrainingMeta {
            db_hash: db.content_hash(),
            healthy_samples: subset.count(ClassLabel::HEALTHY),
            fault_samples: subset.count(fault),
            cv_table: selection.cv_table,
            timestamp: None,
            catalog_version: db.header.catalog_version,
            config: *config,
        },
    })
}

/// Trains every listed fault independently.
pub fn train_network(
    db: &SignatureDb,
    faults: &[ClassLabel],
    config: &TrainConfig,
) -> Result<Vec<CfModel>, NetworkError> {
    faults.par_iter().map(|&f| train_cf_classifier(db, f, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub fault: ClassLabel,
    pub decision_value: f64,
    pub verdict: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub entries: Vec<ClassifierVerdict>,
    pub collective: LabelSet,
    pub healthy: bool,
    pub input: BTreeMap<String, String>,
    pub caveat: String,
}

/// Runs every model on one signature; the collective finding is the union of positives.
pub fn diagnose_signature(models: &[CfModel], sig: &SignatureVector) -> Result<DiagnosisReport, NetworkError> {
    if models.is_empty() {
        return Err(NetworkError::NoModels);
    }
    for m in models {
        if m.training_meta.catalog_version != sig.catalog_version {
            return Err(NetworkError::CatalogMismatch {
                fault: m.fault,
                model: m.training_meta.catalog_version,
                input: sig.catalog_version,
            });
        }
    }
    let mut entries = models
        .par_iter()
        .map(|m| {
            let v = m.decision_value(&sig.x)?;
            Ok(ClassifierVerdict {
                fault: m.fault,
                decision_value: v,
                verdict: if v > 0.0 { 1 } else { -1 },
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    entries.sort_by(|a, b| {
        a.fault
            .cmp(&b.fault)
            .then(a.decision_value.total_cmp(&b.decision_value))
    });
    let collective: LabelSet = entries.iter().filter(|e| e.verdict > 0).map(|e| e.fault).collect();
    Ok(DiagnosisReport {
        healthy: collective.is_empty(),
        collective,
        entries,
        input: BTreeMap::new(),
        caveat: UNKNOWN_FAULT_CAVEAT.to_string(),
    })
}

pub fn diagnose(
    models: &[CfModel],
    client: &[PacketRecord],
    server: &[PacketRecord],
) -> Result<DiagnosisReport, NetworkError> {
    if models.is_empty() {
        return Err(NetworkError::NoModels);
    }
    let sig = signature_from_traces(client, server)?;
    let mut report = diagnose_signature(models, &sig)?;
    report
        .input
        .insert("catalog_version".into(), sig.catalog_version.to_string());
    report.input.insert("client_packets".into(), client.len().to_string());
    report.input.insert("server_packets".into(), server.len().to_string());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Ground-truth label set, e.g. `cf_0` or `cf_3,cf_4`.
    pub class: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub fault: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAccuracy>,
    pub per_classifier: Vec<Confusion>,
    /// Exact-match accuracy over every sample carrying at least one fault.
    pub fault_accuracy: Option<f64>,
    pub healthy_accuracy: Option<f64>,
    pub overall_accuracy: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn class(&self, labels: &LabelSet) -> Option<&ClassAccuracy> {
        let key = format_labels(labels);
        self.per_class.iter().find(|c| c.class == key)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("class          samples  correct  accuracy\n");
        for c in &self.per_class {
            out += &format!(
                "{:<14} {:>7}  {:>7}  {:>7.2}%\n",
                c.class,
                c.total,
                c.correct,
                100.0 * c.accuracy
            );
        }
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
        out += &format!(
            "faults: {}  healthy: {}  overall: {:.2}%\n\nclassifier  tp  fp  tn  fn\n",
            pct(self.fault_accuracy),
            pct(self.healthy_accuracy),
            100.0 * self.overall_accuracy
        );
        for c in &self.per_classifier {
            out += &format!("{:<10} {:>3} {:>3} {:>3} {:>3}\n", c.fault, c.tp, c.fp, c.tn, c.fn_);
        }
        out
    }
}

/// A sample is correct when the collective set equals its true fault set.
pub fn evaluate(models: &[CfModel], samples: &[Signature]) -> Result<EvalReport, NetworkError> {
    let reports = samples
        .par_iter()
        .map(|s| {
            let sig = SignatureVector {
                catalog_version: s.catalog_version,
                x: s.x.clone(),
            };
            diagnose_signature(models, &sig)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut classes: BTreeMap<LabelSet, (usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<ClassLabel, Confusion> = models
        .iter()
        .map(|m| {
            (
                m.fault,
                Confusion {
                    fault: m.fault.to_string(),
                    ..Default::default()
                },
            )
        })
        .collect();
    let (mut fault_n, mut fault_ok, mut healthy_n, mut healthy_ok) = (0, 0, 0, 0);

    for (s, r) in samples.iter().zip(&reports) {
        let truth: LabelSet = s.labels.iter().copied().filter(|l| !l.is_healthy()).collect();
        let ok = r.collective == truth;
        let e = classes.entry(s.labels.clone()).or_default();
        e.0 += 1;
        e.1 += ok as usize;
        if truth.is_empty() {
            healthy_n += 1;
            healthy_ok += ok as usize;
        } else {
            fault_n += 1;
            fault_ok += ok as usize;
        }
        for v in &r.entries {
            let c = confusion.get_mut(&v.fault).expect("model registered");
            match (truth.contains(&v.fault), v.verdict > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
    }

    let ratio = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    Ok(EvalReport {
        per_class: classes
            .into_iter()
            .map(|(labels, (total, correct))| ClassAccuracy {
                class: format_labels(&labels),
                total,
                correct,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
        per_classifier: confusion.into_values().collect(),
        fault_accuracy: ratio(fault_ok, fault_n),
        healthy_accuracy: ratio(healthy_ok, healthy_n),
        overall_accuracy: ratio(fault_ok + healthy_ok, samples.len()).unwrap_or(0.0),
        samples: samples.len(),
    })
}
