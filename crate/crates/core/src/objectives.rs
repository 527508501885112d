//! Objective evaluators for a subset `C` of token rows.
//!
//! With `S = V^T V / m` (full set) and `S_C = V_C^T V_C / |C|` (subset), the
//! zero-mean Gaussian surrogates give
//!
//! * `W2^2 = tr(S) + tr(S_C) - 2 tr((S^1/2 S_C S^1/2)^1/2)`
//! * `f(C) = tr((S^1/2 S_C S^1/2)^1/2)`, the alignment term
//! * `psi(X) = log det(I + gamma X)`, a lower bound of `gamma tr(X)`
//! * `f~(C) = psi(S^1/2 S_C S^1/2)`, the log-det surrogate
//! * `log det(I + gamma~ W_C W_C^T)` with `W = V V^T` and
//!   `gamma~ = gamma / (m |C|)`, the same surrogate in kernel form.
//!
//! Every subset objective maps the empty set to 0.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, covariance, logdet_spd, psd_eigenvalues, sqrt_eigen_sum, sqrt_psd, CovarianceMatrix};
use crate::tokenio::TokenMatrix;

/// Default log-det scale.
pub const DEFAULT_GAMMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Wasserstein2Sq,
    TraceF,
    LogdetSurrogate,
    KernelLogdet,
    Psi,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Wasserstein2Sq => "wasserstein2_sq",
            ObjectiveKind::TraceF => "trace_f",
            ObjectiveKind::LogdetSurrogate => "logdet_surrogate",
            ObjectiveKind::KernelLogdet => "kernel_logdet",
            ObjectiveKind::Psi => "psi",
        }
    }
}

/// An evaluated objective together with the scale parameters it used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub kind: ObjectiveKind,
    pub value: f64,
    pub gamma: Option<f64>,
    pub gamma_tilde: Option<f64>,
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// Checks that `subset` holds distinct indices below `m`.
pub fn validate_subset(m: usize, subset: &[usize]) -> Result<()> {
    let mut seen = vec![false; m];
    for &i in subset {
        if i >= m {
            return Err(Error::InvalidSubset(format!("index {i} is out of range 0..{m}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidSubset(format!("index {i} appears more than once")));
        }
    }
    Ok(())
}

/// Kernel-form scale `gamma / (m k)`.
pub fn gamma_tilde(gamma: f64, m: usize, k: usize) -> f64 {
    gamma / (m as f64 * k as f64)
}

/// Closed-form squared 2-Wasserstein distance between `N(0, sigma)` and
/// `N(0, sigma_c)`. Clamped below at zero.
pub fn wasserstein2_gaussian(sigma: &CovarianceMatrix, sigma_c: &CovarianceMatrix) -> Result<f64> {
    if sigma.dim() != sigma_c.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            sigma.dim(),
            sigma.dim(),
            sigma_c.dim(),
            sigma_c.dim()
        )));
    }
    psd_eigenvalues(sigma_c.matrix())?;
    let cross = cross_trace(&sqrt_psd(sigma)?, sigma_c)?;
    Ok((sigma.trace() + sigma_c.trace() - 2.0 * cross).max(0.0))
}

/// `tr((R S_C R)^1/2)` for a precomputed root `R = S^1/2`.
fn cross_trace(root: &CovarianceMatrix, sigma_c: &CovarianceMatrix) -> Result<f64> {
    let x = kernel::symmetrize(root.matrix() * sigma_c.matrix() * root.matrix());
    Ok(sqrt_eigen_sum(&psd_eigenvalues(&x)?))
}

fn subset_covariance(v: &TokenMatrix, subset: &[usize]) -> CovarianceMatrix {
    covariance(&v.select_rows(subset))
}

/// `f(C) = tr((S^1/2 S_C S^1/2)^1/2)`, formed explicitly in feature space.
pub fn trace_objective(v: &TokenMatrix, subset: &[usize]) -> Result<f64> {
    validate_subset(v.rows(), subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    let root = sqrt_psd(&covariance(v))?;
    cross_trace(&root, &subset_covariance(v, subset))
}

/// `psi(X) = log det(I + gamma X) = sum_i log(1 + gamma lambda_i)`, evaluated
/// from the eigenvalues of `X`.
pub fn psi(x: &CovarianceMatrix, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(psd_eigenvalues(x.matrix())?.iter().map(|l| (gamma * l).ln_1p()).sum())
}

/// `psi` through a Cholesky factorization of `I + gamma X`.
pub fn psi_det(x: &CovarianceMatrix, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    psd_eigenvalues(x.matrix())?;
    let d = x.dim();
    logdet_spd(&(DMatrix::identity(d, d) + x.matrix() * gamma))
}

/// `f~(C) = log det(I + gamma S^1/2 S_C S^1/2)` in covariance form.
pub fn logdet_surrogate(v: &TokenMatrix, subset: &[usize], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    validate_subset(v.rows(), subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    let root = sqrt_psd(&covariance(v))?;
    let x = kernel::symmetrize(root.matrix() * subset_covariance(v, subset).matrix() * root.matrix());
    psi(&CovarianceMatrix::new(x)?, gamma)
}

/// `log det(I + gamma~ W_C W_C^T)` where `W_C = V_C V^T` is `|C| x m`.
pub fn kernel_logdet(v: &TokenMatrix, subset: &[usize], gamma_tilde: f64) -> Result<f64> {
    check_gamma(gamma_tilde)?;
    validate_subset(v.rows(), subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    let full = v.to_dmatrix();
    let wc = v.select_rows(subset).to_dmatrix() * full.transpose();
    let k = subset.len();
    let a = DMatrix::identity(k, k) + (&wc * wc.transpose()) * gamma_tilde;
    logdet_spd(&kernel::symmetrize(a))
}

/// Which subset objective to rank by, with its scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Log-det scale; the kernel form derives `gamma~ = gamma / (m k)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ObjectiveSpec {
    pub fn trace_f() -> Self {
        Self {
            kind: ObjectiveKind::TraceF,
            gamma: None,
        }
    }

    pub fn kernel_logdet(gamma: f64) -> Self {
        Self {
            kind: ObjectiveKind::KernelLogdet,
            gamma: Some(gamma),
        }
    }

    pub fn gamma_or_default(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }
}

/// Repeated evaluation of a subset objective over one matrix.
///
/// All maximized objectives reduce to the `|C| x |C|` principal submatrix of
/// `G = V S V^T`: the nonzero spectrum of `S^1/2 S_C S^1/2` equals that of
/// `G_C / |C|`, and `gamma~ (V V^T V V^T)_C = (gamma / |C|) G_C`. Each
/// evaluation therefore costs one small dense factorization.
#[derive(Debug, Clone)]
pub struct SubsetEvaluator {
    kind: ObjectiveKind,
    gamma: f64,
    m: usize,
    g: DMatrix<f64>,
    row_sq: Vec<f64>,
    full_trace: f64,
}

impl SubsetEvaluator {
    pub fn new(v: &TokenMatrix, spec: ObjectiveSpec) -> Result<Self> {
        match spec.kind {
            ObjectiveKind::TraceF | ObjectiveKind::LogdetSurrogate | ObjectiveKind::KernelLogdet => {}
            other => return Err(Error::UnsupportedObjective(other.as_str())),
        }
        let gamma = spec.gamma_or_default();
        check_gamma(gamma)?;
        let x = v.to_dmatrix();
        let sigma = covariance(v);
        let g = kernel::symmetrize(&x * sigma.matrix() * x.transpose());
        let row_sq: Vec<f64> = v.iter_rows().map(|r| kernel::dot(r, r)).collect();
        Ok(Self {
            kind: spec.kind,
            gamma,
            m: v.rows(),
            g,
            row_sq,
            full_trace: sigma.trace(),
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn block(&self, subset: &[usize]) -> DMatrix<f64> {
        let k = subset.len();
        DMatrix::from_fn(k, k, |a, b| self.g[(subset[a], subset[b])] / k as f64)
    }

    /// Objective value of a valid subset. Higher is better.
    pub fn eval(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let block = self.block(subset);
        match self.kind {
            ObjectiveKind::TraceF => sqrt_eigen_sum(block.symmetric_eigenvalues().as_slice()),
            _ => {
                let k = subset.len();
                let a = DMatrix::identity(k, k) + block * self.gamma;
                logdet_spd(&a).unwrap_or(f64::NAN)
            }
        }
    }

    /// Squared Gaussian 2-Wasserstein distance between the full set and the
    /// subset.
    pub fn wasserstein2(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return self.full_trace;
        }
        let block = self.block(subset);
        let cross = sqrt_eigen_sum(block.symmetric_eigenvalues().as_slice());
        let sub_trace = subset.iter().map(|&i| self.row_sq[i]).sum::<f64>() / subset.len() as f64;
        (self.full_trace + sub_trace - 2.0 * cross).max(0.0)
    }
}
