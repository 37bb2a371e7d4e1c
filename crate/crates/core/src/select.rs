//! Filter/wrapper feature selection: rank by Welch t, then sweep the subset
//! size under stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::svm::{train_l2_svm, KernelSpec, SvmError};

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("invalid selection parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Svm(#[from] SvmError),
}

/// Stand-in for an infinite statistic when both samples are constant and differ.
pub const T_SENTINEL: f64 = f64::MAX;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch two-sample statistic of `a` against `b`.
pub fn t_statistic(a: &[f64], b: &[f64]) -> Result<f64, SelectError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(SelectError::TooFewSamples(format!(
            "t-test needs two samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va / a.len() as f64 + vb / b.len() as f64;
    let diff = ma - mb;
    if se2 > 0.0 {
        Ok(diff / se2.sqrt())
    } else if diff == 0.0 {
        Ok(0.0)
    } else {
        Ok(T_SENTINEL.copysign(diff))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub entries: Vec<RankedFeature>,
}

impl FeatureRanking {
    pub fn top(&self, q: usize) -> Vec<usize> {
        self.entries.iter().take(q).map(|e| e.index).collect()
    }
}

fn split_classes(y: &[f64]) -> (Vec<usize>, Vec<usize>) {
    (0..y.len()).partition(|&i| y[i] > 0.0)
}

/// Orders features by |t| between the +1 and −1 rows, descending; ties keep index order.
pub fn rank_features(x: &[Vec<f64>], y: &[f64]) -> Result<FeatureRanking, SelectError> {
    let (pos, neg) = split_classes(y);
    let m = x.first().map_or(0, Vec::len);
    let mut entries = (0..m)
        .map(|k| {
            let a: Vec<f64> = pos.iter().map(|&i| x[i][k]).collect();
            let b: Vec<f64> = neg.iter().map(|&i| x[i][k]).collect();
            t_statistic(&a, &b).map(|t| RankedFeature {
                index: k,
                score: t.abs(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if m == 0 {
        // still validate class sizes for an empty feature set
        t_statistic(&vec![0.0; pos.len()], &vec![0.0; neg.len()])?;
    }
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(FeatureRanking { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub q_max: usize,
    pub folds: usize,
    pub seed: u64,
    #[serde(rename = "C")]
    pub c: f64,
    /// `None` means RBF with gamma = 1/q for each candidate q.
    pub kernel: Option<KernelSpec>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            q_max: 30,
            folds: 5,
            seed: 0,
            c: 10.0,
            kernel: None,
        }
    }
}

impl SelectConfig {
    pub fn kernel_for(&self, q: usize) -> KernelSpec {
        self.kernel.unwrap_or_else(|| KernelSpec::default_rbf(q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub q: usize,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub q: usize,
    pub features: Vec<usize>,
    pub cv_table: Vec<CvRow>,
}

/// Fold id per row: each class is shuffled and dealt round-robin.
pub fn stratified_folds(y: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; y.len()];
    let (mut pos, mut neg) = split_classes(y);
    for class in [&mut pos, &mut neg] {
        class.shuffle(&mut rng);
        for (k, &i) in class.iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

fn project(row: &[f64], features: &[usize]) -> Vec<f64> {
    features.iter().map(|&k| row[k]).collect()
}

fn fold_accuracy(
    x: &[Vec<f64>],
    y: &[f64],
    assign: &[usize],
    fold: usize,
    features: &[usize],
    c: f64,
    kernel: KernelSpec,
) -> Result<f64, SvmError> {
    let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
    for i in 0..x.len() {
        let p = project(&x[i], features);
        if assign[i] == fold {
            vx.push(p);
            vy.push(y[i]);
        } else {
            tx.push(p);
            ty.push(y[i]);
        }
    }
    let model = train_l2_svm(&tx, &ty, c, kernel)?;
    let mut correct = 0;
    for (p, &label) in vx.iter().zip(&vy) {
        if model.classify(p)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / vx.len() as f64)
}

/// Sweeps q = 1..=q_max over the ranking; best mean accuracy wins, smallest q on ties.
pub fn select_q(
    x: &[Vec<f64>],
    y: &[f64],
    ranking: &FeatureRanking,
    config: &SelectConfig,
) -> Result<SelectionResult, SelectError> {
    if config.folds < 2 {
        return Err(SelectError::InvalidParameter("folds must be at least 2"));
    }
    if config.q_max == 0 {
        return Err(SelectError::InvalidParameter("q_max must be at least 1"));
    }
    let (pos, neg) = split_classes(y);
    if pos.len() < config.folds || neg.len() < config.folds {
        return Err(SelectError::TooFewSamples(format!(
            "{}-fold cross-validation needs that many rows per class, got {} and {}",
            config.folds,
            pos.len(),
            neg.len()
        )));
    }
    let q_max = config.q_max.min(ranking.entries.len());
    if q_max == 0 {
        return Err(SelectError::InvalidParameter("ranking is empty"));
    }
    let assign = stratified_folds(y, config.folds, config.seed);

    let cv_table = (1..=q_max)
        .into_par_iter()
        .map(|q| {
            let features = ranking.top(q);
            let kernel = config.kernel_for(q);
            let fold_accuracies = (0..config.folds)
                .map(|f| fold_accuracy(x, y, &assign, f, &features, config.c, kernel))
                .collect::<Result<Vec<_>, _>>()?;
            let mean_accuracy = fold_accuracies.iter().sum::<f64>() / config.folds as f64;
            Ok(CvRow {
                q,
                mean_accuracy,
                fold_accuracies,
            })
        })
        .collect::<Result<Vec<_>, SvmError>>()?;

    let best = cv_table.iter().fold(&cv_table[0], |best, row| {
        if row.mean_accuracy > best.mean_accuracy {
            row
        } else {
            best
        }
    });
    Ok(SelectionResult {
        q: best.q,
        features: ranking.top(best.q),
        cv_table,
    })
}
