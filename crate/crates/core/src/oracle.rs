//! Ground truth over the space of `k`-subsets: exhaustive enumeration and
//! Monte Carlo sampling, reported as win rate and optimality ratio.
//!
//! The win rate of a method subset `C~` is the fraction of subsets `C` in the
//! population with `f(C~) > f(C)` (ties count as losses). The optimality ratio
//! is `f(C~) / max_C f(C)`.
//!
//! Both modes split their work into fixed-size blocks that are evaluated in
//! parallel and reduced in block order, so reports are bit-identical for any
//! worker count. Monte Carlo block `b` draws from ChaCha8 seeded with
//! `seed_from_u64(seed)` on stream `b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{validate_subset, ObjectiveKind, ObjectiveSpec, SubsetEvaluator};
use crate::selector::check_k;
use crate::tokenio::TokenMatrix;

pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 100_000_000;

const ENUM_BLOCK: u64 = 4096;
const MC_BLOCK: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Exhaustive,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub objective_kind: ObjectiveKind,
    pub mode: OracleMode,
    pub n_evaluated: u64,
    pub best_value: f64,
    pub best_subset: Vec<usize>,
    pub mean_value: f64,
    pub method_value: f64,
    pub win_rate: f64,
    pub optimality_ratio: f64,
    pub seed: Option<u64>,
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(x) => x / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// The `rank`-th `k`-subset of `0..m` in lexicographic order.
pub fn unrank_combination(m: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        let remaining = k - slot - 1;
        loop {
            let with_next = binomial(m - next - 1, remaining);
            if rank < with_next {
                break;
            }
            rank -= with_next;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    out
}

/// Advances to the lexicographic successor; returns false after the last one.
pub fn next_combination(c: &mut [usize], m: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < m - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Order-dependent partial reduction of one block.
#[derive(Debug, Clone)]
struct Tally {
    n: u64,
    beaten: u64,
    sum: f64,
    best: f64,
    best_subset: Vec<usize>,
}

impl Tally {
    fn empty() -> Self {
        Self {
            n: 0,
            beaten: 0,
            sum: 0.0,
            best: f64::NEG_INFINITY,
            best_subset: Vec::new(),
        }
    }

    fn push(&mut self, subset: &[usize], value: f64, method_value: f64) {
        self.n += 1;
        self.sum += value;
        if method_value > value {
            self.beaten += 1;
        }
        if value > self.best {
            self.best = value;
            self.best_subset.clear();
            self.best_subset.extend_from_slice(subset);
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.n += other.n;
        self.beaten += other.beaten;
        self.sum += other.sum;
        if other.best > self.best {
            self.best = other.best;
            self.best_subset = other.best_subset;
        }
        self
    }

    fn into_report(self, kind: ObjectiveKind, mode: OracleMode, method_value: f64, seed: Option<u64>) -> OracleReport {
        let optimality_ratio = if self.best > 0.0 {
            method_value / self.best
        } else {
            f64::NAN
        };
        OracleReport {
            objective_kind: kind,
            mode,
            n_evaluated: self.n,
            best_value: self.best,
            best_subset: self.best_subset,
            mean_value: self.sum / self.n as f64,
            method_value,
            win_rate: self.beaten as f64 / self.n as f64,
            optimality_ratio,
            seed,
        }
    }
}

fn check_method_subset(m: usize, k: usize, subset: &[usize]) -> Result<()> {
    validate_subset(m, subset)?;
    if subset.len() != k {
        return Err(Error::InvalidSubset(format!(
            "method subset has {} indices, expected k = {k}",
            subset.len()
        )));
    }
    Ok(())
}

fn check_cap(m: usize, k: usize, cap: u64) -> Result<u64> {
    let count = binomial(m, k);
    if count > cap as u128 {
        return Err(Error::CapExceeded { count, cap });
    }
    Ok(count as u64)
}

/// Visits every subset in `[start, end)` of the lexicographic order.
fn for_each_in_range(m: usize, k: usize, start: u64, end: u64, mut f: impl FnMut(&[usize])) {
    let mut c = unrank_combination(m, k, start as u128);
    for rank in start..end {
        f(&c);
        if rank + 1 < end {
            next_combination(&mut c, m);
        }
    }
}

fn block_ranges(total: u64, block: u64) -> Vec<(u64, u64)> {
    (0..total.div_ceil(block))
        .map(|b| (b * block, ((b + 1) * block).min(total)))
        .collect()
}

/// Exhaustive evaluation of an arbitrary subset objective.
pub fn exhaustive_with<F>(
    m: usize,
    k: usize,
    method_subset: &[usize],
    cap: u64,
    kind: ObjectiveKind,
    objective: F,
) -> Result<OracleReport>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    check_k(k, m)?;
    check_method_subset(m, k, method_subset)?;
    let total = check_cap(m, k, cap)?;
    let method_value = objective(&sorted(method_subset));
    let tally = block_ranges(total, ENUM_BLOCK)
        .into_par_iter()
        .map(|(start, end)| {
            let mut t = Tally::empty();
            for_each_in_range(m, k, start, end, |c| t.push(c, objective(c), method_value));
            t
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Tally::empty(), Tally::merge);
    Ok(tally.into_report(kind, OracleMode::Exhaustive, method_value, None))
}

/// Every subset value, in lexicographic order.
pub fn exhaustive_population<F>(m: usize, k: usize, cap: u64, objective: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    check_k(k, m)?;
    let total = check_cap(m, k, cap)?;
    Ok(block_ranges(total, ENUM_BLOCK)
        .into_par_iter()
        .flat_map_iter(|(start, end)| {
            let mut vals = Vec::with_capacity((end - start) as usize);
            for_each_in_range(m, k, start, end, |c| vals.push(objective(c)));
            vals
        })
        .collect())
}

fn mc_block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

fn for_each_sample(m: usize, k: usize, seed: u64, start: u64, end: u64, mut f: impl FnMut(&[usize])) {
    let mut rng = mc_block_rng(seed, start / MC_BLOCK);
    for _ in start..end {
        let mut c = rand::seq::index::sample(&mut rng, m, k).into_vec();
        c.sort_unstable();
        f(&c);
    }
}

/// Monte Carlo evaluation of an arbitrary subset objective against
/// `n_samples` uniform `k`-subsets drawn independently.
pub fn monte_carlo_with<F>(
    m: usize,
    k: usize,
    method_subset: &[usize],
    n_samples: u64,
    seed: u64,
    kind: ObjectiveKind,
    objective: F,
) -> Result<OracleReport>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    check_k(k, m)?;
    check_method_subset(m, k, method_subset)?;
    if n_samples == 0 {
        return Err(Error::InvalidSubset("n_samples must be at least 1".into()));
    }
    let method_value = objective(&sorted(method_subset));
    let tally = block_ranges(n_samples, MC_BLOCK)
        .into_par_iter()
        .map(|(start, end)| {
            let mut t = Tally::empty();
            for_each_sample(m, k, seed, start, end, |c| t.push(c, objective(c), method_value));
            t
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Tally::empty(), Tally::merge);
    Ok(tally.into_report(kind, OracleMode::MonteCarlo, method_value, Some(seed)))
}

/// The sampled values behind a [`monte_carlo_with`] report, in draw order.
pub fn monte_carlo_population<F>(m: usize, k: usize, n_samples: u64, seed: u64, objective: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    block_ranges(n_samples, MC_BLOCK)
        .into_par_iter()
        .flat_map_iter(|(start, end)| {
            let mut vals = Vec::with_capacity((end - start) as usize);
            for_each_sample(m, k, seed, start, end, |c| vals.push(objective(c)));
            vals
        })
        .collect()
}

fn sorted(s: &[usize]) -> Vec<usize> {
    let mut s = s.to_vec();
    s.sort_unstable();
    s
}

pub fn exhaustive_eval(
    v: &TokenMatrix,
    k: usize,
    objective: ObjectiveSpec,
    method_subset: &[usize],
    cap: u64,
) -> Result<OracleReport> {
    check_k(k, v.rows())?;
    check_cap(v.rows(), k, cap)?;
    let eval = SubsetEvaluator::new(v, objective)?;
    exhaustive_with(v.rows(), k, method_subset, cap, objective.kind, |c| eval.eval(c))
}

pub fn monte_carlo_eval(
    v: &TokenMatrix,
    k: usize,
    objective: ObjectiveSpec,
    method_subset: &[usize],
    n_samples: u64,
    seed: u64,
) -> Result<OracleReport> {
    let eval = SubsetEvaluator::new(v, objective)?;
    monte_carlo_with(v.rows(), k, method_subset, n_samples, seed, objective.kind, |c| eval.eval(c))
}

/// Empirical `Pr[f(method) > f(C)]` over the given population, computed as a
/// mean of indicators. Matches `report.win_rate` exactly when `population`
/// is the one the report was built from.
pub fn win_rate_interpretation_check(report: &OracleReport, population: &[f64]) -> f64 {
    let wins: f64 = population
        .iter()
        .map(|&x| if report.method_value > x { 1.0 } else { 0.0 })
        .sum();
    wins / population.len() as f64
}
