//! Greedy log-determinant selection with an incrementally grown Cholesky
//! factor.
//!
//! For a PSD kernel `K`, the gain of adding item `j` to `C` is
//! `log d_j^2` with `d_j^2 = K_jj - K_Cj^T K_C^-1 K_Cj`. Keeping, for every
//! candidate `i`, the coordinates `c_i = L^-1 K_Ci` against the current
//! Cholesky factor `K_C = L L^T` gives `d_i^2 = K_ii - ||c_i||^2`, and
//! selecting `j` extends each `c_i` by one entry
//!
//! ```text
//! e_i = (K_ji - <c_j, c_i>) / d_j,    d_i^2 <- d_i^2 - e_i^2.
//! ```
//!
//! Step `t` costs `O((m - t) t)` plus the kernel entries, so `k` steps cost
//! `O(m k^2)`.
//!
//! The OTPrune kernel is `K = I + gamma~ W W^T` with `W = V V^T`, whose rows
//! `w_i` are the token interaction vectors and `gamma~ = gamma / (m k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{dot, gram, GramRows};
use crate::objectives::{check_gamma, gamma_tilde};
use crate::tokenio::TokenMatrix;

/// Lower clamp on `d^2` before taking its root.
pub const D_SQ_FLOOR: f64 = 1e-12;

/// Candidate updates run in parallel from this many rows on.
const PAR_MIN_ROWS: usize = 4096;

/// Entries of a symmetric PSD kernel over `m` items.
#[allow(clippy::len_without_is_empty)]
pub trait GreedyKernel: Sync {
    fn len(&self) -> usize;
    fn diag(&self, i: usize) -> f64;
    /// `K_ji` for `j != i`.
    fn off_diag(&self, j: usize, i: usize) -> f64;
}

/// `K = I + gamma~ W W^T`, `W = V V^T`.
#[derive(Debug, Clone)]
pub enum OtKernel {
    /// Inner products `<w_j, w_i>` taken directly over the stored rows of `W`.
    Dense {
        gram: GramRows,
        gamma_tilde: f64,
        diag: Vec<f64>,
    },
    /// Inner products through `<w_j, w_i> = v_j^T (V^T V) v_i`, with
    /// `z_i = (V^T V) v_i` precomputed. Costs `O(d)` per entry instead of
    /// `O(m)`.
    Factored {
        v: TokenMatrix,
        z: Vec<f64>,
        gamma_tilde: f64,
        diag: Vec<f64>,
    },
}

impl OtKernel {
    /// Picks the factored form when `d < m`, the dense form otherwise.
    pub fn new(v: &TokenMatrix, gamma_tilde: f64) -> Self {
        if v.cols() < v.rows() {
            Self::factored(v, gamma_tilde)
        } else {
            Self::dense(gram(v), gamma_tilde)
        }
    }

    pub fn dense(gram: GramRows, gamma_tilde: f64) -> Self {
        let diag = (0..gram.len())
            .map(|i| {
                let w = gram.row(i);
                1.0 + gamma_tilde * dot(w, w)
            })
            .collect();
        OtKernel::Dense {
            gram,
            gamma_tilde,
            diag,
        }
    }

    pub fn factored(v: &TokenMatrix, gamma_tilde: f64) -> Self {
        let (m, d) = (v.rows(), v.cols());
        let mut moment = vec![0.0; d * d];
        for row in v.iter_rows() {
            for a in 0..d {
                let ra = row[a];
                for b in a..d {
                    moment[a * d + b] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                moment[a * d + b] = moment[b * d + a];
            }
        }
        let mut z = vec![0.0; m * d];
        for (i, row) in v.iter_rows().enumerate() {
            for a in 0..d {
                z[i * d + a] = dot(&moment[a * d..(a + 1) * d], row);
            }
        }
        let diag = (0..m)
            .map(|i| 1.0 + gamma_tilde * dot(v.row(i), &z[i * d..(i + 1) * d]))
            .collect();
        OtKernel::Factored {
            v: v.clone(),
            z,
            gamma_tilde,
            diag,
        }
    }

    pub fn gamma_tilde(&self) -> f64 {
        match self {
            OtKernel::Dense { gamma_tilde, .. } | OtKernel::Factored { gamma_tilde, .. } => *gamma_tilde,
        }
    }
}

impl GreedyKernel for OtKernel {
    fn len(&self) -> usize {
        match self {
            OtKernel::Dense { diag, .. } | OtKernel::Factored { diag, .. } => diag.len(),
        }
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        match self {
            OtKernel::Dense { diag, .. } | OtKernel::Factored { diag, .. } => diag[i],
        }
    }

    #[inline]
    fn off_diag(&self, j: usize, i: usize) -> f64 {
        match self {
            OtKernel::Dense {
                gram, gamma_tilde, ..
            } => gamma_tilde * dot(gram.row(j), gram.row(i)),
            OtKernel::Factored {
                v, z, gamma_tilde, ..
            } => {
                let d = v.cols();
                gamma_tilde * dot(v.row(j), &z[i * d..(i + 1) * d])
            }
        }
    }
}

/// Mutable state of one greedy run.
#[derive(Debug, Clone)]
pub struct GreedyState {
    selected: Vec<usize>,
    d_sq: Vec<f64>,
    /// Row `i` holds `c_i`; only the first `selected.len()` entries are live.
    coeffs: Vec<f64>,
    capacity: usize,
    active: Vec<bool>,
    gains: Vec<f64>,
}

impl GreedyState {
    /// Fresh state for selecting up to `capacity` items.
    pub fn new<K: GreedyKernel>(kernel: &K, capacity: usize) -> Self {
        let m = kernel.len();
        Self {
            selected: Vec::with_capacity(capacity),
            d_sq: (0..m).map(|i| kernel.diag(i)).collect(),
            coeffs: vec![0.0; m * capacity],
            capacity,
            active: vec![true; m],
            gains: Vec::with_capacity(capacity),
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn d_sq(&self) -> &[f64] {
        &self.d_sq
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    /// The Cholesky coordinates `c_i` (length = number selected so far).
    pub fn coeffs(&self, i: usize) -> &[f64] {
        let start = i * self.capacity;
        &self.coeffs[start..start + self.selected.len()]
    }

    /// Highest remaining score, lowest index on ties.
    fn argmax(&self, step: usize) -> Result<usize> {
        let mut best: Option<usize> = None;
        for (i, &score) in self.d_sq.iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            if !score.is_finite() {
                return Err(Error::NonFiniteIntermediate { step });
            }
            if best.is_none_or(|b| score > self.d_sq[b]) {
                best = Some(i);
            }
        }
        best.ok_or(Error::KOutOfRange {
            k: step + 1,
            m: self.d_sq.len(),
        })
    }

    /// Selects the next item and updates every remaining candidate. Returns
    /// the chosen index.
    pub fn step<K: GreedyKernel>(&mut self, kernel: &K) -> Result<usize> {
        let t = self.selected.len();
        if t == self.capacity {
            return Err(Error::KOutOfRange {
                k: t + 1,
                m: self.capacity,
            });
        }
        let j = self.argmax(t)?;
        let dj_sq = self.d_sq[j].max(D_SQ_FLOOR);
        let dj = dj_sq.sqrt();
        let cap = self.capacity;
        let cj: Vec<f64> = self.coeffs[j * cap..j * cap + t].to_vec();
        self.active[j] = false;

        let active = &self.active;
        let update = |(i, (ci, di)): (usize, (&mut [f64], &mut f64))| {
            if !active[i] {
                return;
            }
            let e = (kernel.off_diag(j, i) - dot(&cj, &ci[..t])) / dj;
            ci[t] = e;
            *di -= e * e;
        };
        if self.d_sq.len() >= PAR_MIN_ROWS {
            self.coeffs
                .par_chunks_mut(cap)
                .zip(self.d_sq.par_iter_mut())
                .enumerate()
                .for_each(update);
        } else {
            self.coeffs
                .chunks_mut(cap)
                .zip(self.d_sq.iter_mut())
                .enumerate()
                .for_each(update);
        }

        let gain = dj_sq.ln();
        if !gain.is_finite() {
            return Err(Error::NonFiniteIntermediate { step: t });
        }
        self.selected.push(j);
        self.gains.push(gain);
        Ok(j)
    }
}

/// Output of a selection strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected indices in selection order.
    pub indices: Vec<usize>,
    /// Per-step marginal gain.
    pub gains: Vec<f64>,
    /// Strategy objective of the final set.
    pub objective: f64,
    pub gamma_tilde: Option<f64>,
}

impl SelectionResult {
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut s = self.indices.clone();
        s.sort_unstable();
        s
    }
}

/// Scores seen at one greedy step, before the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub chosen: usize,
    pub d_sq: Vec<f64>,
}

pub fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        Err(Error::KOutOfRange { k, m })
    } else {
        Ok(())
    }
}

/// Runs `k` greedy steps over any PSD kernel. The objective is
/// `log det(K_C)`.
pub fn greedy_logdet<K: GreedyKernel>(
    kernel: &K,
    k: usize,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<GreedyState> {
    check_k(k, kernel.len())?;
    let mut state = GreedyState::new(kernel, k);
    for _ in 0..k {
        let snapshot = trace.as_ref().map(|_| state.d_sq.clone());
        let chosen = state.step(kernel)?;
        if let (Some(tr), Some(d_sq)) = (trace.as_deref_mut(), snapshot) {
            tr.push(StepTrace { chosen, d_sq });
        }
    }
    Ok(state)
}

fn into_result(state: GreedyState, gamma_tilde: Option<f64>) -> SelectionResult {
    let objective = state.gains.iter().sum();
    SelectionResult {
        indices: state.selected,
        gains: state.gains,
        objective,
        gamma_tilde,
    }
}

/// Selects `k` of the `m` rows of `v` maximizing the log-det surrogate with
/// scale `gamma` (the kernel scale is `gamma / (m k)`).
pub fn otprune_select(v: &TokenMatrix, k: usize, gamma: f64) -> Result<SelectionResult> {
    check_gamma(gamma)?;
    check_k(k, v.rows())?;
    otprune_select_gamma_tilde(v, k, gamma_tilde(gamma, v.rows(), k))
}

/// [`otprune_select`] with the kernel scale `gamma~` given directly.
pub fn otprune_select_gamma_tilde(v: &TokenMatrix, k: usize, gamma_tilde: f64) -> Result<SelectionResult> {
    check_gamma(gamma_tilde)?;
    check_k(k, v.rows())?;
    let kernel = OtKernel::new(v, gamma_tilde);
    Ok(into_result(greedy_logdet(&kernel, k, None)?, Some(gamma_tilde)))
}

/// Greedy selection over precomputed interaction rows `w_i`.
pub fn otprune_select_dense(gram: GramRows, k: usize, gamma_tilde: f64) -> Result<SelectionResult> {
    check_gamma(gamma_tilde)?;
    check_k(k, gram.len())?;
    let kernel = OtKernel::dense(gram, gamma_tilde);
    Ok(into_result(greedy_logdet(&kernel, k, None)?, Some(gamma_tilde)))
}

/// [`otprune_select`] that also returns the score vector seen at every step.
pub fn select_with_trace(v: &TokenMatrix, k: usize, gamma: f64) -> Result<(SelectionResult, Vec<StepTrace>)> {
    check_gamma(gamma)?;
    check_k(k, v.rows())?;
    let gt = gamma_tilde(gamma, v.rows(), k);
    let kernel = OtKernel::new(v, gt);
    let mut trace = Vec::with_capacity(k);
    let state = greedy_logdet(&kernel, k, Some(&mut trace))?;
    Ok((into_result(state, Some(gt)), trace))
}
