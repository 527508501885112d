//! Competing selection strategies: greedy max-min diversity (DivPrune style),
//! greedy DPP MAP, and index-based sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::dot;
use crate::objectives::DEFAULT_GAMMA;
use crate::selector::{check_k, greedy_logdet, otprune_select, GreedyKernel, SelectionResult};
use crate::tokenio::TokenMatrix;

/// Ridge added to the DPP similarity kernel so that it is strictly PD.
pub const DPP_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot(a, b) / (na * nb)
                }
            }
        }
    }
}

/// A selection strategy with its parameters.
///
/// Serialized as `{"kind": "<name>", ...params}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Otprune {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    Divprune {
        #[serde(default)]
        metric: Metric,
    },
    Dpp,
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    FirstK,
    LastK,
    UniformIndex,
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Otprune { .. } => "otprune",
            StrategySpec::Divprune { .. } => "divprune",
            StrategySpec::Dpp => "dpp",
            StrategySpec::Random { .. } => "random",
            StrategySpec::FirstK => "first_k",
            StrategySpec::LastK => "last_k",
            StrategySpec::UniformIndex => "uniform_index",
        }
    }

    /// Runs the strategy. `gamma` and `seed` fill in parameters left unset
    /// here.
    pub fn select(&self, v: &TokenMatrix, k: usize, gamma: Option<f64>, seed: Option<u64>) -> Result<SelectionResult> {
        match self {
            StrategySpec::Otprune { gamma: g } => {
                otprune_select(v, k, g.or(gamma).unwrap_or(DEFAULT_GAMMA))
            }
            StrategySpec::Divprune { metric } => divprune_select(v, k, *metric),
            StrategySpec::Dpp => dpp_select(v, k),
            StrategySpec::Random { seed: s } => index_select(IndexKind::Random, v.rows(), k, s.or(seed)),
            StrategySpec::FirstK => index_select(IndexKind::FirstK, v.rows(), k, None),
            StrategySpec::LastK => index_select(IndexKind::LastK, v.rows(), k, None),
            StrategySpec::UniformIndex => index_select(IndexKind::UniformIndex, v.rows(), k, None),
        }
    }
}

fn argmax_lowest(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in values {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy max-min diversity: start at the largest-norm row, then repeatedly
/// add the row farthest from the selected set. The objective is the smallest
/// pairwise distance in the result (0 for a single row); `gains[t]` is the
/// distance of the `t`-th pick to the earlier picks.
pub fn divprune_select(v: &TokenMatrix, k: usize, metric: Metric) -> Result<SelectionResult> {
    let m = v.rows();
    check_k(k, m)?;
    let start = argmax_lowest(v.iter_rows().map(|r| dot(r, r)).enumerate()).expect("m >= 1");
    let mut selected = vec![false; m];
    let mut nearest: Vec<f64> = (0..m).map(|i| metric.distance(v.row(i), v.row(start))).collect();
    selected[start] = true;
    let mut indices = vec![start];
    let mut gains = vec![0.0];
    while indices.len() < k {
        let j = argmax_lowest((0..m).filter(|&i| !selected[i]).map(|i| (i, nearest[i]))).expect("k <= m");
        gains.push(nearest[j]);
        selected[j] = true;
        indices.push(j);
        for i in 0..m {
            if !selected[i] {
                nearest[i] = nearest[i].min(metric.distance(v.row(i), v.row(j)));
            }
        }
    }
    let objective = gains[1..].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SelectionResult {
        indices,
        gains,
        objective: if k == 1 { 0.0 } else { objective },
        gamma_tilde: None,
    })
}

/// Similarity kernel `L = V V^T + ridge I`.
pub struct DppKernel<'a> {
    v: &'a TokenMatrix,
    ridge: f64,
}

impl<'a> DppKernel<'a> {
    pub fn new(v: &'a TokenMatrix, ridge: f64) -> Self {
        Self { v, ridge }
    }
}

impl GreedyKernel for DppKernel<'_> {
    fn len(&self) -> usize {
        self.v.rows()
    }

    fn diag(&self, i: usize) -> f64 {
        let r = self.v.row(i);
        dot(r, r) + self.ridge
    }

    fn off_diag(&self, j: usize, i: usize) -> f64 {
        dot(self.v.row(j), self.v.row(i))
    }
}

/// Greedy MAP for the DPP with kernel `V V^T + 1e-9 I`. The objective is
/// `log det(L_C)`.
pub fn dpp_select(v: &TokenMatrix, k: usize) -> Result<SelectionResult> {
    let state = greedy_logdet(&DppKernel::new(v, DPP_RIDGE), k, None)?;
    let gains = state.gains().to_vec();
    Ok(SelectionResult {
        indices: state.selected().to_vec(),
        objective: gains.iter().sum(),
        gains,
        gamma_tilde: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    FirstK,
    LastK,
    UniformIndex,
    Random,
}

/// Index-only strategies. `uniform_index` takes `floor(i m / k)`; `random`
/// draws `k` distinct indices from ChaCha8 seeded with `seed` and returns them
/// ascending. Gains and objective are zero.
pub fn index_select(kind: IndexKind, m: usize, k: usize, seed: Option<u64>) -> Result<SelectionResult> {
    check_k(k, m)?;
    let indices: Vec<usize> = match kind {
        IndexKind::FirstK => (0..k).collect(),
        IndexKind::LastK => (m - k..m).collect(),
        IndexKind::UniformIndex => (0..k).map(|i| i * m / k).collect(),
        IndexKind::Random => {
            let seed = seed.ok_or(Error::MissingSeed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, m, k).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    Ok(SelectionResult {
        gains: vec![0.0; indices.len()],
        indices,
        objective: 0.0,
        gamma_tilde: None,
    })
}
