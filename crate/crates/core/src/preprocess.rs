//! Label encoding and per-feature min-max scaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigdb::{ClassLabel, LabelSet};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("label set {0} is neither healthy-only nor {1}-only")]
    NotInSubset(String, ClassLabel),
    #[error("cannot fit a scaler on an empty dataset")]
    EmptyDataset,
    #[error("vector has {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `{cf_0}` → −1, `{fault}` → +1.
pub fn encode_label(labels: &LabelSet, fault: ClassLabel) -> Result<f64, PreprocessError> {
    let only = |l: ClassLabel| labels.len() == 1 && labels.contains(&l);
    if !fault.is_healthy() && only(fault) {
        Ok(1.0)
    } else if only(ClassLabel::HEALTHY) {
        Ok(-1.0)
    } else {
        Err(PreprocessError::NotInSubset(crate::sigdb::format_labels(labels), fault))
    }
}

/// Column extrema of the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScaleParams {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Keeps only the listed columns, in the given order.
    pub fn project(&self, features: &[usize]) -> ScaleParams {
        ScaleParams {
            min: features.iter().map(|&k| self.min[k]).collect(),
            max: features.iter().map(|&k| self.max[k]).collect(),
        }
    }
}

pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<ScaleParams, PreprocessError> {
    let first = rows.first().ok_or(PreprocessError::EmptyDataset)?;
    let mut sp = ScaleParams {
        min: first.clone(),
        max: first.clone(),
    };
    for row in &rows[1..] {
        if row.len() != sp.dim() {
            return Err(PreprocessError::DimensionMismatch {
                expected: sp.dim(),
                got: row.len(),
            });
        }
        for (k, &v) in row.iter().enumerate() {
            sp.min[k] = sp.min[k].min(v);
            sp.max[k] = sp.max[k].max(v);
        }
    }
    Ok(sp)
}

/// Maps into [0,1]; zero-range columns become 0 and out-of-range values clamp.
pub fn apply_scaler(sp: &ScaleParams, x: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    if x.len() != sp.dim() {
        return Err(PreprocessError::DimensionMismatch {
            expected: sp.dim(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(sp.min.iter().zip(&sp.max))
        .map(|(&v, (&lo, &hi))| {
            let range = hi - lo;
            if range > 0.0 {
                ((v - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

pub fn apply_scaler_rows(sp: &ScaleParams, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PreprocessError> {
    rows.iter().map(|r| apply_scaler(sp, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(js: &[u32]) -> LabelSet {
        js.iter().map(|&j| ClassLabel(j)).collect()
    }

    #[test]
    fn label_encoding() {
        let f = ClassLabel(1);
        assert_eq!(encode_label(&labels(&[0]), f), Ok(-1.0));
        assert_eq!(encode_label(&labels(&[1]), f), Ok(1.0));
        assert!(matches!(
            encode_label(&labels(&[3]), f),
            Err(PreprocessError::NotInSubset(..))
        ));
        assert!(encode_label(&labels(&[1, 3]), f).is_err());
    }

    #[test]
    fn fit_and_apply() {
        let rows = vec![vec![2.0, 5.0], vec![4.0, 5.0], vec![10.0, 5.0]];
        let sp = fit_scaler(&rows).unwrap();
        assert_eq!(sp.min, vec![2.0, 5.0]);
        assert_eq!(sp.max, vec![10.0, 5.0]);
        assert_eq!(apply_scaler(&sp, &[4.0, 5.0]).unwrap(), vec![0.25, 0.0]);
        assert_eq!(apply_scaler(&sp, &[12.0, 99.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(apply_scaler(&sp, &[-3.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(fit_scaler(&[]), Err(PreprocessError::EmptyDataset));
        assert!(matches!(
            apply_scaler(&sp, &[1.0]),
            Err(PreprocessError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn projection_keeps_order() {
        let sp = ScaleParams {
            min: vec![0.0, 1.0, 2.0],
            max: vec![10.0, 11.0, 12.0],
        };
        let p = sp.project(&[2, 0]);
        assert_eq!(p.min, vec![2.0, 0.0]);
        assert_eq!(p.max, vec![12.0, 10.0]);
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..12).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(-1e6f64..1e6, m), n))
    }

    proptest! {
        #[test]
        fn scaled_training_rows_in_unit_box(rows in matrix()) {
            let sp = fit_scaler(&rows).unwrap();
            for r in apply_scaler_rows(&sp, &rows).unwrap() {
                prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn refit_on_scaled_output_is_stable(rows in matrix()) {
            let sp = fit_scaler(&rows).unwrap();
            let once = apply_scaler_rows(&sp, &rows).unwrap();
            let sp2 = fit_scaler(&once).unwrap();
            let twice = apply_scaler_rows(&sp2, &once).unwrap();
            for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
