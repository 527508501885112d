//! Synthetic experiment harness: generate Gaussian matrices, run strategies,
//! score their subsets through the oracle and aggregate over trials.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::StrategySpec;
use crate::error::{Error, Result};
use crate::objectives::{check_gamma, ObjectiveKind, ObjectiveSpec, SubsetEvaluator, DEFAULT_GAMMA};
use crate::oracle::{binomial, exhaustive_with, monte_carlo_with, OracleReport, DEFAULT_EXHAUSTIVE_CAP};
use crate::tokenio::{normalize_unit_variance, synth_gaussian, TokenMatrix, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleModeConfig {
    Exhaustive,
    MonteCarlo { n_samples: u64 },
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_true() -> bool {
    true
}

fn default_cap() -> u64 {
    DEFAULT_EXHAUSTIVE_CAP
}

fn default_objective() -> ObjectiveSpec {
    ObjectiveSpec::trace_f()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub strategies: Vec<StrategySpec>,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveSpec,
    pub oracle_mode: OracleModeConfig,
    pub n_trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Scale for strategies and objectives that do not set their own.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// When present, the run is a sweep over these values of `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_cap")]
    pub exhaustive_cap: u64,
    /// Record wall-clock times. Reports are bit-reproducible only without.
    #[serde(default = "default_true")]
    pub timings: bool,
}

fn config_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| {
            config_err(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(config_err("m", "must be at least 1"));
        }
        if self.d == 0 {
            return Err(config_err("d", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.m {
            return Err(config_err("k", format!("must satisfy 1 <= k <= m = {}", self.m)));
        }
        if self.n_trials == 0 {
            return Err(config_err("n_trials", "must be at least 1"));
        }
        if self.strategies.is_empty() {
            return Err(config_err("strategies", "must list at least one strategy"));
        }
        if check_gamma(self.gamma).is_err() {
            return Err(config_err("gamma", "must be positive"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if let StrategySpec::Otprune { gamma: Some(g) } = s {
                if check_gamma(*g).is_err() {
                    return Err(config_err(format!("strategies[{i}].gamma"), "must be positive"));
                }
            }
        }
        match self.objective.kind {
            ObjectiveKind::TraceF | ObjectiveKind::LogdetSurrogate | ObjectiveKind::KernelLogdet => {}
            other => {
                return Err(config_err(
                    "objective.kind",
                    format!("`{}` cannot rank subsets", other.as_str()),
                ))
            }
        }
        if let Some(g) = self.objective.gamma {
            if check_gamma(g).is_err() {
                return Err(config_err("objective.gamma", "must be positive"));
            }
        }
        if let OracleModeConfig::MonteCarlo { n_samples: 0 } = self.oracle_mode {
            return Err(config_err("oracle_mode.monte_carlo.n_samples", "must be at least 1"));
        }
        if let Some(gammas) = &self.gammas {
            if gammas.is_empty() {
                return Err(config_err("gammas", "must not be empty"));
            }
            for (i, g) in gammas.iter().enumerate() {
                if check_gamma(*g).is_err() {
                    return Err(config_err(format!("gammas[{i}]"), "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Trial `t` uses seed `base_seed + t`.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }

    pub fn trial_matrix(&self, trial: usize) -> TokenMatrix {
        let v = synth_gaussian(self.m, self.d, self.trial_seed(trial));
        if self.normalize {
            normalize_unit_variance(&v, DEFAULT_EPSILON).0
        } else {
            v
        }
    }

    fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            kind: self.objective.kind,
            gamma: Some(self.objective.gamma.unwrap_or(self.gamma)),
        }
    }
}

/// One strategy's outcome on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrial {
    pub strategy: String,
    /// Selection order.
    pub indices: Vec<usize>,
    pub report: OracleReport,
    /// Kernel-form log-det surrogate of the subset at the run's `gamma`.
    pub surrogate: f64,
    pub wasserstein2: f64,
    pub coverage: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    pub results: Vec<StrategyTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub mean_win_rate: f64,
    pub std_win_rate: f64,
    pub mean_opt_ratio: f64,
    pub std_opt_ratio: f64,
    pub mean_wall_ms: f64,
    pub mean_wasserstein2: f64,
    pub mean_coverage: f64,
    /// Mean over trials of `surrogate / surrogate(otprune)`.
    pub relative_surrogate: Option<f64>,
    /// Mean over trials of `W2^2 / W2^2(otprune)`.
    pub relative_wasserstein2: Option<f64>,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: ExperimentConfig,
    pub gamma: f64,
    pub summaries: Vec<StrategySummary>,
    /// Spearman correlation between strategy ranks by mean `W2^2` and by mean
    /// coverage proxy. A diagnostic, not a gate.
    pub w2_coverage_spearman: Option<f64>,
    pub trials: Vec<TrialReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub strategy: String,
    pub mean_win_rate: f64,
    pub mean_opt_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub gammas: Vec<f64>,
    pub table: Vec<SweepRow>,
    pub reports: Vec<BenchReport>,
}

impl SweepReport {
    /// `max - min` of a strategy's mean optimality ratio across the sweep.
    pub fn opt_ratio_spread(&self, strategy: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .table
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.mean_opt_ratio)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialReport> {
    let seed = config.trial_seed(trial);
    let (m, k) = (config.m, config.k);
    if config.oracle_mode == OracleModeConfig::Exhaustive {
        let count = binomial(m, k);
        if count > config.exhaustive_cap as u128 {
            return Ok(TrialReport {
                trial,
                seed,
                skipped: true,
                skip_reason: Some(
                    Error::CapExceeded {
                        count,
                        cap: config.exhaustive_cap,
                    }
                    .to_string(),
                ),
                results: Vec::new(),
            });
        }
    }
    let v = config.trial_matrix(trial);
    let spec = config.objective_spec();
    let eval = SubsetEvaluator::new(&v, spec)?;
    let trace_eval = SubsetEvaluator::new(&v, ObjectiveSpec::trace_f())?;
    let surrogate_eval = SubsetEvaluator::new(&v, ObjectiveSpec::kernel_logdet(config.gamma))?;

    let mut results = Vec::with_capacity(config.strategies.len());
    for strategy in &config.strategies {
        let start = Instant::now();
        let selection = strategy.select(&v, k, Some(config.gamma), Some(seed))?;
        let wall_ms = if config.timings {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let subset = selection.sorted_indices();
        let report = match config.oracle_mode {
            OracleModeConfig::Exhaustive => {
                exhaustive_with(m, k, &subset, config.exhaustive_cap, spec.kind, |c| eval.eval(c))?
            }
            OracleModeConfig::MonteCarlo { n_samples } => {
                monte_carlo_with(m, k, &subset, n_samples, seed, spec.kind, |c| eval.eval(c))?
            }
        };
        results.push(StrategyTrial {
            strategy: strategy.name().to_string(),
            surrogate: surrogate_eval.eval(&subset),
            wasserstein2: trace_eval.wasserstein2(&subset),
            coverage: coverage_proxy(&v, &subset)?,
            indices: selection.indices,
            report,
            wall_ms,
        });
    }
    Ok(TrialReport {
        trial,
        seed,
        skipped: false,
        skip_reason: None,
        results,
    })
}

fn summarize(config: &ExperimentConfig, trials: &[TrialReport]) -> Vec<StrategySummary> {
    let reference = config
        .strategies
        .iter()
        .position(|s| matches!(s, StrategySpec::Otprune { .. }));
    let done: Vec<&TrialReport> = trials.iter().filter(|t| !t.skipped).collect();
    config
        .strategies
        .iter()
        .enumerate()
        .map(|(s, strategy)| {
            let pick = |f: &dyn Fn(&StrategyTrial) -> f64| done.iter().map(|t| f(&t.results[s])).collect::<Vec<_>>();
            let (mean_win_rate, std_win_rate) = mean_std(&pick(&|r| r.report.win_rate));
            let (mean_opt_ratio, std_opt_ratio) = mean_std(&pick(&|r| r.report.optimality_ratio));
            let relative = |f: &dyn Fn(&StrategyTrial) -> f64| {
                reference.and_then(|r| {
                    let ratios: Vec<f64> = done
                        .iter()
                        .map(|t| f(&t.results[s]) / f(&t.results[r]))
                        .filter(|x| x.is_finite())
                        .collect();
                    (!ratios.is_empty()).then(|| mean_std(&ratios).0)
                })
            };
            StrategySummary {
                strategy: strategy.name().to_string(),
                mean_win_rate,
                std_win_rate,
                mean_opt_ratio,
                std_opt_ratio,
                mean_wall_ms: mean_std(&pick(&|r| r.wall_ms)).0,
                mean_wasserstein2: mean_std(&pick(&|r| r.wasserstein2)).0,
                mean_coverage: mean_std(&pick(&|r| r.coverage)).0,
                relative_surrogate: relative(&|r| r.surrogate),
                relative_wasserstein2: relative(&|r| r.wasserstein2),
                n_trials: done.len(),
            }
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<BenchReport> {
    config.validate()?;
    let trials = (0..config.n_trials)
        .map(|t| run_trial(config, t))
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(config, &trials);
    let w2_coverage_spearman = if summaries.len() >= 2 {
        let w2: Vec<f64> = summaries.iter().map(|s| s.mean_wasserstein2).collect();
        let cov: Vec<f64> = summaries.iter().map(|s| s.mean_coverage).collect();
        spearman(&w2, &cov).ok().filter(|r| r.is_finite())
    } else {
        None
    };
    Ok(BenchReport {
        config: config.clone(),
        gamma: config.gamma,
        summaries,
        w2_coverage_spearman,
        trials,
    })
}

/// Runs [`run_experiment`] once per `gamma`. Strategies and objectives that
/// set their own `gamma` keep it.
pub fn gamma_sweep(config: &ExperimentConfig, gammas: &[f64]) -> Result<SweepReport> {
    if gammas.is_empty() {
        return Err(config_err("gammas", "must not be empty"));
    }
    for (i, g) in gammas.iter().enumerate() {
        if check_gamma(*g).is_err() {
            return Err(config_err(format!("gammas[{i}]"), "must be positive"));
        }
    }
    config.validate()?;
    let mut reports = Vec::with_capacity(gammas.len());
    let mut table = Vec::new();
    for &gamma in gammas {
        let cfg = ExperimentConfig {
            gamma,
            gammas: None,
            ..config.clone()
        };
        let report = run_experiment(&cfg)?;
        table.extend(report.summaries.iter().map(|s| SweepRow {
            gamma,
            strategy: s.strategy.clone(),
            mean_win_rate: s.mean_win_rate,
            mean_opt_ratio: s.mean_opt_ratio,
        }));
        reports.push(report);
    }
    Ok(SweepReport {
        gammas: gammas.to_vec(),
        table,
        reports,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "strategy,mean_win_rate,std_win_rate,mean_opt_ratio,std_opt_ratio,mean_wall_ms";

fn summary_line(s: &StrategySummary) -> String {
    format!(
        "{},{},{},{},{},{}",
        s.strategy, s.mean_win_rate, s.std_win_rate, s.mean_opt_ratio, s.std_opt_ratio, s.mean_wall_ms
    )
}

pub fn summary_csv(report: &BenchReport) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in &report.summaries {
        out.push_str(&summary_line(s));
        out.push('\n');
    }
    out
}

/// Summary CSV for a sweep, with a leading `gamma` column.
pub fn sweep_csv(sweep: &SweepReport) -> String {
    let mut out = format!("gamma,{SUMMARY_CSV_HEADER}\n");
    for r in &sweep.reports {
        for s in &r.summaries {
            out.push_str(&format!("{},{}\n", r.gamma, summary_line(s)));
        }
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::DimensionMismatch("need at least 2 values".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean over all rows of the squared distance to the nearest selected row.
pub fn coverage_proxy(v: &TokenMatrix, subset: &[usize]) -> Result<f64> {
    crate::objectives::validate_subset(v.rows(), subset)?;
    if subset.is_empty() {
        return Err(Error::InvalidSubset("coverage needs a nonempty subset".into()));
    }
    let total: f64 = v
        .iter_rows()
        .map(|r| {
            subset
                .iter()
                .map(|&j| r.iter().zip(v.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / v.rows() as f64)
}
