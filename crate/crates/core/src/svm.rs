//! L2 soft-margin SVM trained in the dual with a two-variable working set.
//!
//! Squared slack turns the soft-margin problem into a hard-margin one on the
//! shifted kernel `K + I/(2C)`, so α has no upper bound. The shift only exists
//! during training; inference uses the plain kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("vectors have dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training data needs both +1 and -1 labels")]
    DegenerateLabels,
    #[error("labels must be +1 or -1, got {0}")]
    InvalidLabel(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    /// RBF with gamma = 1/q.
    pub fn default_rbf(q: usize) -> Self {
        KernelSpec::Rbf {
            gamma: 1.0 / q.max(1) as f64,
        }
    }

    fn validate(&self) -> Result<(), SvmError> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(SvmError::InvalidParameter("rbf gamma must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn eval_unchecked(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => x.iter().zip(z).map(|(a, b)| a * b).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

pub fn kernel_eval(k: &KernelSpec, x: &[f64], z: &[f64]) -> Result<f64, SvmError> {
    if x.len() != z.len() {
        return Err(SvmError::DimensionMismatch {
            expected: x.len(),
            got: z.len(),
        });
    }
    Ok(k.eval_unchecked(x, z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// Stop once the maximal KKT violation falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    #[serde(rename = "C")]
    pub c: f64,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub sv_labels: Vec<f64>,
    pub bias: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the tolerance was met.
    pub converged: bool,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if !self.support_vectors.is_empty() && x.len() != self.dim() {
            return Err(SvmError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.sv_labels))
            .map(|(sv, (a, y))| a * y * self.kernel.eval_unchecked(sv, x))
            .sum();
        Ok(s + self.bias)
    }

    /// +1 for a positive decision value; zero counts as −1.
    pub fn classify(&self, x: &[f64]) -> Result<f64, SvmError> {
        Ok(if self.decision_value(x)? > 0.0 { 1.0 } else { -1.0 })
    }

    /// Largest |y_i f(x_i) − (1 − α_i/(2C))| over the support vectors.
    pub fn kkt_residual(&self) -> f64 {
        self.support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.sv_labels))
            .map(|(sv, (a, y))| {
                let f = self.decision_value(sv).unwrap_or(f64::NAN);
                (y * f - (1.0 - a / (2.0 * self.c))).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn train_l2_svm(x: &[Vec<f64>], y: &[f64], c: f64, kernel: KernelSpec) -> Result<SvmModel, SvmError> {
    train_l2_svm_with(x, y, c, kernel, SolverParams::default())
}

pub fn train_l2_svm_with(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    kernel: KernelSpec,
    params: SolverParams,
) -> Result<SvmModel, SvmError> {
    solve(x, y, c, kernel, params, false).map(|(m, _)| m)
}

fn validate(x: &[Vec<f64>], y: &[f64], c: f64, kernel: &KernelSpec) -> Result<(), SvmError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(SvmError::InvalidParameter("C must be positive"));
    }
    kernel.validate()?;
    if x.len() != y.len() {
        return Err(SvmError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::InvalidLabel(*bad));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(SvmError::DegenerateLabels);
    }
    let d = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(SvmError::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    Ok(())
}

/// Minimises ½αᵀQα − eᵀα with Q_ij = y_i y_j K̃_ij, yᵀα = 0, α ≥ 0.
/// Optionally records the dual objective after every step.
fn solve(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    kernel: KernelSpec,
    params: SolverParams,
    trace: bool,
) -> Result<(SvmModel, Vec<f64>), SvmError> {
    validate(x, y, c, &kernel)?;
    let n = x.len();
    let shift = 1.0 / (2.0 * c);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval_unchecked(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let kt = |i: usize, j: usize| k[i * n + j] + if i == j { shift } else { 0.0 };

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut history = Vec::new();
    let objective = |alpha: &[f64], grad: &[f64]| {
        // D(α) = Σα − ½αᵀQα and Qα = G + e
        let sa: f64 = alpha.iter().sum();
        let ag: f64 = alpha.iter().zip(grad).map(|(a, g)| a * g).sum();
        0.5 * (sa - ag)
    };

    let mut iterations = 0;
    let mut converged = false;
    loop {
        // maximal violating pair
        let mut up = (f64::NEG_INFINITY, usize::MAX);
        let mut low = (f64::INFINITY, usize::MAX);
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = y[t] > 0.0 || alpha[t] > 0.0;
            let in_low = y[t] < 0.0 || alpha[t] > 0.0;
            if in_up && v > up.0 {
                up = (v, t);
            }
            if in_low && v < low.0 {
                low = (v, t);
            }
        }
        if up.0 - low.0 < params.tolerance {
            converged = true;
            break;
        }
        if iterations >= params.max_iterations {
            break;
        }
        iterations += 1;

        let (i, j) = (up.1, low.1);
        // move α_i += y_i t, α_j −= y_j t along the feasible line
        let eta = (kt(i, i) + kt(j, j) - 2.0 * kt(i, j)).max(1e-12);
        let mut step = (up.0 - low.0) / eta;
        if y[i] < 0.0 {
            step = step.min(alpha[i]);
        }
        if y[j] > 0.0 {
            step = step.min(alpha[j]);
        }
        let (old_i, old_j) = (alpha[i], alpha[j]);
        alpha[i] = (old_i + y[i] * step).max(0.0);
        alpha[j] = (old_j - y[j] * step).max(0.0);
        let di = (alpha[i] - old_i) * y[i];
        let dj = (alpha[j] - old_j) * y[j];
        for t in 0..n {
            grad[t] += y[t] * (kt(t, i) * di + kt(t, j) * dj);
        }
        if trace {
            history.push(objective(&alpha, &grad));
        }
    }
    if converged {
        polish(&mut alpha, &mut grad, y, &kt, params.tolerance);
    } else {
        log::warn!("svm solver stopped after {iterations} iterations without meeting tolerance");
    }

    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    let bias = if sv.is_empty() {
        0.0
    } else {
        sv.iter()
            .map(|&i| {
                let s: f64 = sv.iter().map(|&j| alpha[j] * y[j] * k[i * n + j]).sum();
                y[i] * (1.0 - alpha[i] / (2.0 * c)) - s
            })
            .sum::<f64>()
            / sv.len() as f64
    };

    let model = SvmModel {
        kernel,
        c,
        support_vectors: sv.iter().map(|&t| x[t].clone()).collect(),
        alphas: sv.iter().map(|&t| alpha[t]).collect(),
        sv_labels: sv.iter().map(|&t| y[t]).collect(),
        bias,
        dual_objective: objective(&alpha, &grad),
        iterations,
        converged,
    };
    Ok((model, history))
}

fn max_violation(alpha: &[f64], grad: &[f64], y: &[f64]) -> f64 {
    let (mut up, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        if y[t] > 0.0 || alpha[t] > 0.0 {
            up = up.max(v);
        }
        if y[t] < 0.0 || alpha[t] > 0.0 {
            low = low.min(v);
        }
    }
    up - low
}

/// Replaces the approximate α with the exact stationary point of its support
/// face when that point is feasible and at least as good. Ascent stopped at
/// tolerance τ is only O(τ) accurate in α; this removes the residual error.
fn polish(alpha: &mut [f64], grad: &mut [f64], y: &[f64], kt: &impl Fn(usize, usize) -> f64, tolerance: f64) {
    let support: Vec<usize> = (0..alpha.len()).filter(|&t| alpha[t] > 0.0).collect();
    let m = support.len();
    if m == 0 {
        return;
    }
    // [Q_SS y_S; y_Sᵀ 0] [α_S; ν] = [1; 0]
    let a = DMatrix::from_fn(m + 1, m + 1, |r, c| match (r < m, c < m) {
        (true, true) => y[support[r]] * y[support[c]] * kt(support[r], support[c]),
        (true, false) => y[support[r]],
        (false, true) => y[support[c]],
        (false, false) => 0.0,
    });
    let rhs = DVector::from_fn(m + 1, |r, _| if r < m { 1.0 } else { 0.0 });
    let Some(sol) = a.lu().solve(&rhs) else { return };
    if sol.iter().take(m).any(|&v| !(v > 0.0 && v.is_finite())) {
        return;
    }
    let mut cand = vec![0.0; alpha.len()];
    for (r, &i) in support.iter().enumerate() {
        cand[i] = sol[r];
    }
    let cand_grad: Vec<f64> = (0..alpha.len())
        .map(|t| support.iter().map(|&j| y[t] * y[j] * kt(t, j) * cand[j]).sum::<f64>() - 1.0)
        .collect();
    let value = |a: &[f64], g: &[f64]| 0.5 * a.iter().zip(g).map(|(a, g)| a - a * g).sum::<f64>();
    if max_violation(&cand, &cand_grad, y) <= tolerance && value(&cand, &cand_grad) >= value(alpha, grad) {
        alpha.copy_from_slice(&cand);
        grad.copy_from_slice(&cand_grad);
    }
}
